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
import struct
import tempfile
import unittest

import numpy as np

from mpgan.exc import ValidationError, VolumeIOError
from mpgan.volio import decode_fvol, decode_records, encode_fvol, encode_record, read_fvol, \
    write_fvol


class TestFvol(unittest.TestCase):
    def test_layout_is_x_fastest(self):
        vol = np.zeros((3, 2, 2), dtype=np.float32)
        vol[1, 0, 0] = 1.0
        vol[0, 1, 0] = 2.0
        vol[0, 0, 1] = 3.0
        data = encode_fvol(vol)
        self.assertEqual(b'FVOL', data[:4])
        self.assertEqual((1, 3, 2, 2, 1), struct.unpack('<5I', data[4:24]))
        values = np.frombuffer(data, dtype='<f4', offset=24)
        self.assertEqual(1.0, values[1])
        self.assertEqual(2.0, values[3])
        self.assertEqual(3.0, values[6])

    def test_channels_are_fastest(self):
        vol = np.arange(2 * 2 * 2 * 3, dtype=np.float32).reshape(2, 2, 2, 3)
        values = np.frombuffer(encode_fvol(vol), dtype='<f4', offset=24)
        np.testing.assert_array_equal(vol[0, 0, 0], values[:3])
        np.testing.assert_array_equal(vol[1, 0, 0], values[3:6])
        np.testing.assert_array_equal(vol, decode_fvol(encode_fvol(vol)))

    def test_file_round_trip(self):
        vol = np.random.default_rng(0).random((5, 4, 3)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_fvol(pathlib.Path(tmp) / 'nested' / 'd.fvol', vol)
            np.testing.assert_array_equal(vol, read_fvol(path))
            self.assertEqual(['d.fvol'], [p.name for p in path.parent.iterdir()])

    def test_rejects_bad_input(self):
        with self.assertRaises(ValidationError):
            decode_fvol(b'NOPE' + bytes(20))
        with self.assertRaises(ValidationError):
            decode_fvol(encode_fvol(np.zeros((2, 2, 2)))[:-4])
        with self.assertRaises(ValidationError):
            encode_fvol(np.zeros((2, 2)))
        with self.assertRaises(VolumeIOError):
            read_fvol(pathlib.Path('/nonexistent/volume.fvol'))


class TestRecords(unittest.TestCase):
    def test_stream(self):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        data = encode_record(1, [4, 5], [a, None]) + encode_record(2, [], [a[0]])
        records = list(decode_records(data))
        self.assertEqual(2, len(records))
        kind, ints, arrays = records[0]
        self.assertEqual((1, [4, 5]), (kind, ints))
        np.testing.assert_array_equal(a, arrays[0])
        self.assertIsNone(arrays[1])
        self.assertEqual(2, records[1][0])

    def test_truncated(self):
        data = encode_record(1, [4], [np.zeros((4, 4))])
        with self.assertRaises(ValidationError):
            list(decode_records(data[:-1]))
        with self.assertRaises(ValidationError):
            list(decode_records(b'XXXX' + data[4:]))


if __name__ == '__main__':
    unittest.main()
