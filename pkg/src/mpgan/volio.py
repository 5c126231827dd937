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
"""FVOL volume files and the generic little-endian record stream used by shard files.

An FVOL file is the magic `FVOL`, five u32 (version, nx, ny, nz, channels) and then
nx*ny*nz*channels float32 values with the channel index fastest, then x, y, z.  In memory a
volume is an array indexed `[x, y, z]` or `[x, y, z, c]`.
"""
import json
import pathlib
from typing import Any, Iterator, Sequence

import numpy as np

from .exc import ValidationError, VolumeIOError
from .util import async_write_bytes, atomic_write_bytes

MAGIC = b'FVOL'
VERSION = 1
RECORD_MAGIC = b'SREC'
_U32 = np.dtype('<u4')
_F32 = np.dtype('<f4')


def encode_fvol(volume: np.ndarray) -> bytes:
    """ Serialize a `[x, y, z]` or `[x, y, z, c]` array """
    arr = np.asarray(volume)
    if arr.ndim == 3:
        arr = arr[..., np.newaxis]
    if arr.ndim != 4:
        raise ValidationError(f'Expected a 3D volume with optional channels, got shape {arr.shape}')
    nx, ny, nz, nc = arr.shape
    header = np.array([VERSION, nx, ny, nz, nc], dtype=_U32).tobytes()
    payload = np.asarray(arr.transpose(3, 0, 1, 2), dtype=_F32).ravel(order='F').tobytes()
    return MAGIC + header + payload


def decode_fvol(data: bytes, source: str = '<bytes>') -> np.ndarray:
    """ Inverse of `encode_fvol`; single-channel volumes come back as `[x, y, z]` """
    if len(data) < 24 or data[:4] != MAGIC:
        raise ValidationError(f'{source}: not an FVOL file')
    version, nx, ny, nz, nc = (int(v) for v in np.frombuffer(data, dtype=_U32, count=5, offset=4))
    if version != VERSION:
        raise ValidationError(f'{source}: unsupported FVOL version {version}')
    count = nx * ny * nz * nc
    if len(data) != 24 + 4 * count:
        raise ValidationError(f'{source}: payload holds {(len(data) - 24) // 4} values, '
                              f'header promises {count}')
    flat = np.frombuffer(data, dtype=_F32, count=count, offset=24)
    vol = flat.reshape((nc, nx, ny, nz), order='F').transpose(1, 2, 3, 0)
    vol = np.ascontiguousarray(vol, dtype=np.float32)
    return vol[..., 0] if nc == 1 else vol


def read_fvol(path: pathlib.Path) -> np.ndarray:
    """ Load a volume from disk """
    try:
        data = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f'Could not read {path}: {e}') from e
    return decode_fvol(data, str(path))


def write_fvol(path: pathlib.Path, volume: np.ndarray) -> pathlib.Path:
    """ Atomically write a volume """
    return atomic_write_bytes(pathlib.Path(path), encode_fvol(volume))


async def async_write_fvol(path: pathlib.Path, volume: np.ndarray) -> pathlib.Path:
    """ aiofiles writer used inside staging directories """
    return await async_write_bytes(pathlib.Path(path), encode_fvol(volume))


def sidecar_path(path: pathlib.Path, name: str) -> pathlib.Path:
    """ `<dir>/<name>.meta.json` """
    return pathlib.Path(path) / f'{name}.meta.json'


async def async_write_sidecar(path: pathlib.Path, meta: dict[str, Any]) -> pathlib.Path:
    """ Write the JSON sidecar that accompanies a simulation's frame files """
    payload = json.dumps(meta, indent=2, sort_keys=True).encode('utf-8')
    return await async_write_bytes(path, payload)


def read_sidecar(path: pathlib.Path) -> dict[str, Any]:
    """ Load a JSON sidecar """
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeIOError(f'Could not read sidecar {path}: {e}') from e


def encode_record(kind: int, ints: Sequence[int], arrays: Sequence[np.ndarray | None]) -> bytes:
    """Serialize one record: magic, u32 kind, u32 int count, the ints, u32 array count, then per
    array a u32 rank (0 marks an absent array), its dims and its float32 payload.
    """
    parts = [RECORD_MAGIC, np.array([kind, len(ints), *ints, len(arrays)], dtype=_U32).tobytes()]
    for arr in arrays:
        if arr is None:
            parts.append(np.array([0], dtype=_U32).tobytes())
            continue
        a = np.asarray(arr, dtype=_F32)
        parts.append(np.array([a.ndim, *a.shape], dtype=_U32).tobytes())
        parts.append(np.ascontiguousarray(a).tobytes())
    return b''.join(parts)


def decode_records(data: bytes, source: str = '<bytes>') \
        -> Iterator[tuple[int, list[int], list[np.ndarray | None]]]:
    """ Yields `(kind, ints, arrays)` for every record in a record stream """
    offset = 0

    def take_u32(count: int) -> list[int]:
        nonlocal offset
        if offset + 4 * count > len(data):
            raise ValidationError(f'{source}: truncated record at byte {offset}')
        vals = np.frombuffer(data, dtype=_U32, count=count, offset=offset)
        offset += 4 * count
        return [int(v) for v in vals]

    while offset < len(data):
        if data[offset:offset + 4] != RECORD_MAGIC:
            raise ValidationError(f'{source}: bad record magic at byte {offset}')
        offset += 4
        kind, n_ints = take_u32(2)
        ints = take_u32(n_ints)
        (n_arrays,) = take_u32(1)
        arrays: list[np.ndarray | None] = []
        for _ in range(n_arrays):
            (rank,) = take_u32(1)
            if rank == 0:
                arrays.append(None)
                continue
            shape = take_u32(rank)
            count = int(np.prod(shape))
            if offset + 4 * count > len(data):
                raise ValidationError(f'{source}: truncated payload at byte {offset}')
            arr = np.frombuffer(data, dtype=_F32, count=count, offset=offset).reshape(shape)
            arrays.append(arr.astype(np.float32))
            offset += 4 * count
        yield kind, ints, arrays
