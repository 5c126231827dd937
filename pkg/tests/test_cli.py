###############################################################################
# Copyright 2025 The mpgan Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
import pathlib
import re
import shutil
import subprocess
import tempfile
import unittest
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mpgan.checkpoint import Checkpoint, save_checkpoint
from mpgan.networks import WeightStore, build_network, generator_spec
from mpgan.types import GrowthState, LossKind
from mpgan.volio import read_fvol, write_fvol

INFO = re.compile(r'^\w+\s+INFO.*', re.MULTILINE)
DEBUG = re.compile(r'^\w+\s+DEBUG.*', re.MULTILINE)


@dataclass
class ExecResult:
    proc: subprocess.CompletedProcess
    out: pathlib.Path


def run_cli(command: str,
            subcommand_args: Sequence = None,
            verbosity_arg: str = '-v',
            main_args: Sequence[str] = None,
            cwd: pathlib.Path = None,
            print_command: bool = False) -> ExecResult:
    proc = shutil.which('mpgan')
    main_args = main_args or []
    subcommand_args = [str(a) for a in subcommand_args or []]

    args = [proc, verbosity_arg, *main_args, command, *subcommand_args]
    if print_command:
        print("\n" + " ".join(args))
    p = subprocess.run(args, capture_output=True, text=True, cwd=cwd)
    return ExecResult(proc=p, out=pathlib.Path(cwd or '.'))


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.density = write_fvol(self.dir / 'd.fvol', rng.uniform(size=(6, 5, 4)))
        self.other = write_fvol(self.dir / 'e.fvol', rng.uniform(size=(6, 5, 4)))
        self.velocity = write_fvol(self.dir / 'v.fvol', rng.normal(size=(6, 5, 4, 3)) * 0.1)

    def tearDown(self):
        self.tmp.cleanup()

    def first_pass_checkpoint(self) -> pathlib.Path:
        g1 = build_network(generator_spec(1, 4))
        ckpt = Checkpoint(pass_index=1, factor=4, loss_kind=LossKind.WGAN_GP, iteration=0,
                          growth=GrowthState(0),
                          networks={'generator': WeightStore.from_module(g1)})
        return save_checkpoint(ckpt, self.dir / 'ckpt')

    def test_psnr_identical(self):
        r = run_cli('psnr', [self.density, self.density], verbosity_arg='-q', cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        self.assertEqual('identical', r.proc.stdout.strip())
        self.assertEqual('', r.proc.stderr)

    def test_psnr_value(self):
        r = run_cli('psnr', [self.density, self.other, '--peak', 1.0], verbosity_arg='-q',
                    cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        self.assertRegex(r.proc.stdout.strip(), r'^\d+\.\d{4} dB$')

    def test_render(self):
        out = self.dir / 'slice.png'
        r = run_cli('render', ['--in', self.density, '--axis', 'z', '--index', 1, '--out', out],
                    cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        self.assertTrue(out.is_file())
        self.assertEqual(b'\x89PNG', out.read_bytes()[:4])

    def test_combine(self):
        out = self.dir / 'avg.fvol'
        r = run_cli('combine', ['--mode', 'avg', '--inputs', self.density, self.other,
                                self.density, '--out', out], cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        expected = (2 * read_fvol(self.density) + read_fvol(self.other)) / 3
        np.testing.assert_allclose(expected, read_fvol(out), atol=1e-6)

    def test_combine_residual_needs_upsampled(self):
        r = run_cli('combine', ['--mode', 'res', '--inputs', self.density, self.other,
                                self.density, '--out', self.dir / 'x.fvol'], cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)
        self.assertIn('requires --upsampled', r.proc.stderr)
        self.assertFalse((self.dir / 'x.fvol').exists())

    def test_invalid_args(self):
        r = run_cli('psnr', [self.density, self.dir / 'missing.fvol'], cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)
        self.assertIn('is not a file', r.proc.stderr)
        r = run_cli('render', ['--in', self.density, '--axis', 'w', '--index', 0,
                               '--out', self.dir / 'x.png'], cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)
        r = run_cli('psnr', [self.density, self.density], main_args=['--workers', '-1'],
                    cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)

    def test_dims_mismatch_is_a_usage_error(self):
        small = write_fvol(self.dir / 's.fvol', np.zeros((2, 2, 2)))
        r = run_cli('psnr', [self.density, small], cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)
        self.assertIn('dims', r.proc.stderr)

    def test_infer_axis_verbosity(self):
        ckpt = self.first_pass_checkpoint()
        out = self.dir / 'up.fvol'
        args = ['--in', self.density, '--vel', self.velocity, '--ckpt1', ckpt, '--axis', 'x',
                '--out', out]

        r = run_cli('infer-axis', args, cwd=self.dir)
        self.assertEqual(0, r.proc.returncode, r.proc.stderr)
        self.assertGreater(len(INFO.findall(r.proc.stdout)), 0)
        self.assertEqual(0, len(DEBUG.findall(r.proc.stdout)))
        self.assertEqual((24, 20, 16), read_fvol(out).shape)

        r = run_cli('infer-axis', args, verbosity_arg='-vv', cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        self.assertGreater(len(DEBUG.findall(r.proc.stdout)), 0)

        r = run_cli('infer-axis', args, verbosity_arg='-q', cwd=self.dir)
        self.assertEqual(0, r.proc.returncode)
        self.assertEqual(0, len(INFO.findall(r.proc.stdout)))

    def test_wrong_pass_checkpoint(self):
        ckpt = self.first_pass_checkpoint()
        r = run_cli('infer', ['--in', self.density, '--vel', self.velocity, '--ckpt1', ckpt,
                              '--ckpt2', ckpt, '--out', self.dir / 'up.fvol'], cwd=self.dir)
        self.assertEqual(2, r.proc.returncode)
        self.assertIn('pass-1 generator', r.proc.stderr)


if __name__ == '__main__':
    unittest.main()
