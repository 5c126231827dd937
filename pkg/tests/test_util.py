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
import asyncio
import contextlib
import io
import logging
import pathlib
import tempfile
import unittest

from mpgan.exc import CliWarning, VolumeIOError
from mpgan.util import LoggingMixin, StagingDirectory, atomic_write_bytes, async_write_bytes, \
    render_template, setup_logger, verbosity_level


class Worker(LoggingMixin):
    def __init__(self, name: str):
        self._setup_logger(name, 'sim_0001')


class TestLogging(unittest.TestCase):
    def test_verbosity_levels(self):
        self.assertEqual(logging.WARNING, verbosity_level(0, False))
        self.assertEqual(logging.INFO, verbosity_level(1, False))
        self.assertEqual(logging.DEBUG, verbosity_level(2, False))
        self.assertEqual(logging.DEBUG, verbosity_level(5, False))
        self.assertEqual(logging.ERROR, verbosity_level(0, True))

    def test_streams_split_on_level(self):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            logger = setup_logger('mpgan.test_split', level='DEBUG')
            logger.debug('d')
            logger.info('i')
            logger.warning('w')
            logger.error('e')
        self.assertEqual(['mpgan.test_split DEBUG   d', 'mpgan.test_split INFO    i'],
                         out.getvalue().splitlines())
        self.assertEqual(['mpgan.test_split WARNING w', 'mpgan.test_split ERROR   e'],
                         err.getvalue().splitlines())

    def test_setup_is_idempotent(self):
        a = setup_logger('mpgan.test_once', level=logging.INFO)
        b = setup_logger('mpgan.test_once', level=logging.DEBUG)
        self.assertIs(a, b)
        self.assertEqual(2, len(b.handlers))
        self.assertEqual(logging.INFO, b.level)

    def test_mixin_prefix(self):
        worker = Worker('mpgan.test_mixin')
        with self.assertLogs('mpgan.test_mixin', level='INFO') as cm:
            worker.log('frame 3 written', 'info')
        self.assertEqual(['INFO:mpgan.test_mixin:sim_0001: frame 3 written'], cm.output)


class TestFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_atomic_write(self):
        path = atomic_write_bytes(self.dir / 'a' / 'b.bin', b'payload')
        self.assertEqual(b'payload', path.read_bytes())
        atomic_write_bytes(path, b'new')
        self.assertEqual(b'new', path.read_bytes())
        self.assertEqual(['b.bin'], [p.name for p in path.parent.iterdir()])
        with self.assertRaises(VolumeIOError):
            atomic_write_bytes(path / 'under_a_file', b'x')

    def test_staging_publishes(self):
        async def stage() -> pathlib.Path:
            async with StagingDirectory(self.dir / 'out', prefix='.sim_') as s:
                await async_write_bytes(s.path / 'frame.fvol', b'frame')
                self.assertTrue(s.path.name.startswith('.sim_'))
                return await s.publish(self.dir / 'out' / 'sim')

        dest = asyncio.run(stage())
        self.assertEqual(b'frame', (dest / 'frame.fvol').read_bytes())
        self.assertEqual(['sim'], [p.name for p in (self.dir / 'out').iterdir()])

    def test_staging_cleans_up_on_failure(self):
        async def fail() -> None:
            async with StagingDirectory(self.dir) as s:
                await async_write_bytes(s.path / 'partial.fvol', b'x')
                raise RuntimeError('solver died')

        with self.assertRaises(RuntimeError):
            asyncio.run(fail())
        self.assertEqual([], list(self.dir.iterdir()))


class TestTemplate(unittest.TestCase):
    def test_render(self):
        owner = Worker('mpgan.test_template')
        text = render_template('{% for r in rows %}| {{ r }} |\n{% endfor %}', {'rows': [1, 2]},
                               owner)
        self.assertEqual('| 1 |\n| 2 |\n', text)

    def test_undefined_variable(self):
        owner = Worker('mpgan.test_template_error')
        with self.assertLogs('mpgan.test_template_error', level='ERROR'), \
                self.assertRaises(CliWarning):
            render_template('{{ missing }}', {}, owner)


if __name__ == '__main__':
    unittest.main()
