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
import tempfile
import unittest

import numpy as np
import torch

from mpgan.checkpoint import Checkpoint, checkpoint_name, decode_checkpoint, encode_checkpoint, \
    load_checkpoint, load_generator, save_checkpoint
from mpgan.exc import ValidationError, VolumeIOError
from mpgan.networks import WeightStore, build_network, generator_spec
from mpgan.training import make_optimizer
from mpgan.types import GrowthState, LossKind, TrainConfig


def trained_checkpoint() -> Checkpoint:
    torch.manual_seed(4)
    g = build_network(generator_spec(2, 4))
    opt = make_optimizer(g.parameters(), TrainConfig())
    x = torch.rand(2, 5, 64, 64)
    g(x).square().mean().backward()
    opt.step()
    rng = np.random.default_rng(8)
    rng.uniform(size=3)
    return Checkpoint(
        pass_index=2, factor=4, loss_kind=LossKind.TEMPO, iteration=17,
        growth=GrowthState(0, 1.0),
        networks={'generator': WeightStore.from_module(g)},
        optimizers={'generator': opt.state_dict()},
        numpy_rng=rng.bit_generator.state,
        torch_rng=bytes(torch.get_rng_state().numpy().tobytes()),
        samplers={'spatial_x1': {'seed': 3, 'epoch': 2, 'position': 1, 'batch_size': 16}},
    )


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = pathlib.Path(self.tmp.name)
        self.ckpt = trained_checkpoint()

    def tearDown(self):
        self.tmp.cleanup()

    def test_bytes_are_exact(self):
        back = decode_checkpoint(encode_checkpoint(self.ckpt))
        self.assertEqual((2, 4, LossKind.TEMPO, 17), (back.pass_index, back.factor,
                                                      back.loss_kind, back.iteration))
        self.assertEqual(self.ckpt.samplers, back.samplers)
        self.assertEqual(self.ckpt.torch_rng, back.torch_rng)
        for name, arr in self.ckpt.networks['generator'].tensors.items():
            np.testing.assert_array_equal(arr, back.networks['generator'].tensors[name])
        original = self.ckpt.optimizers['generator']['state']
        for idx, values in back.optimizers['generator']['state'].items():
            for key in ('exp_avg', 'exp_avg_sq'):
                torch.testing.assert_close(original[idx][key], values[key], rtol=0, atol=0)
        rng = np.random.default_rng()
        rng.bit_generator.state = back.numpy_rng
        expected = np.random.default_rng()
        expected.bit_generator.state = self.ckpt.numpy_rng
        self.assertEqual(expected.uniform(), rng.uniform())

    def test_optimizer_state_loads(self):
        back = decode_checkpoint(encode_checkpoint(self.ckpt))
        g = back.generator()
        opt = make_optimizer(g.parameters(), TrainConfig())
        opt.load_state_dict(back.optimizers['generator'])
        self.assertEqual(len(list(g.parameters())), len(opt.state))

    def test_save_and_load(self):
        path = save_checkpoint(self.ckpt, self.out)
        self.assertEqual(checkpoint_name(2, 17), path.name)
        self.assertEqual('pass2_latest.ckpt', checkpoint_name(2))
        self.assertTrue((self.out / 'pass2_latest.ckpt').exists())
        g = load_generator(path, 2)
        self.assertFalse(g.training)
        with self.assertRaises(ValidationError):
            load_generator(path, 1)

    def test_bad_files(self):
        data = encode_checkpoint(self.ckpt)
        with self.assertRaises(ValidationError):
            decode_checkpoint(b'XXXX' + data[4:])
        with self.assertRaises(ValidationError):
            decode_checkpoint(data[:6])
        with self.assertRaises(ValidationError):
            decode_checkpoint(data[:40])
        with self.assertRaises(VolumeIOError):
            load_checkpoint(self.out / 'missing.ckpt')


if __name__ == '__main__':
    unittest.main()
