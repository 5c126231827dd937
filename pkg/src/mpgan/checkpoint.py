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
"""Training checkpoints.

A checkpoint is one file: magic, u32 version, u64 manifest length, a JSON manifest, then a
blob of raw little-endian arrays.  The manifest indexes the blob by name, so weights,
optimizer moments and rng states round-trip bit-exactly.
"""
import base64
import json
import logging
import pathlib
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .exc import ValidationError, VolumeIOError
from .networks import Generator, WeightStore, build_network, generator_spec
from .types import GrowthState, LossKind
from .util import ROOT_LOGGER, atomic_write_bytes

MAGIC = b'MPCK'
VERSION = 1
_HEADER = struct.Struct('<4sIQ')

logger = logging.getLogger(f'{ROOT_LOGGER}.checkpoint')


@dataclass
class Checkpoint:
    """Everything needed to resume a training run

    `networks` maps a role (`generator`, `critic_spatial`, `critic_temporal`) to its weights;
    `optimizers` holds the matching `torch.optim.Adam` state dicts.
    """
    pass_index: int
    factor: int
    loss_kind: LossKind
    iteration: int
    growth: GrowthState
    networks: dict[str, WeightStore]
    optimizers: dict[str, dict[str, Any]] = field(default_factory=dict)
    numpy_rng: dict[str, Any] = field(default_factory=dict)
    torch_rng: bytes = b''
    samplers: dict[str, dict[str, int]] = field(default_factory=dict)

    def generator(self) -> Generator:
        """ The generator of this checkpoint as an eval-mode module """
        spec = generator_spec(self.pass_index, self.factor)
        net = self.networks['generator'].load_into(build_network(spec))
        net.eval()
        return net  # type: ignore[return-value]


class _Blob:
    """ Append-only array table backing the manifest """

    def __init__(self):
        self.parts: list[bytes] = []
        self.offset = 0

    def put(self, arr: np.ndarray) -> dict[str, Any]:
        a = np.ascontiguousarray(arr)
        data = a.astype(a.dtype.newbyteorder('<'), copy=False).tobytes()
        entry = {'offset': self.offset, 'shape': list(a.shape), 'dtype': a.dtype.str.lstrip('<>|=')}
        self.parts.append(data)
        self.offset += len(data)
        return entry


def _get(blob: memoryview, entry: dict[str, Any]) -> np.ndarray:
    dtype = np.dtype(entry['dtype']).newbyteorder('<')
    count = int(np.prod(entry['shape'])) if entry['shape'] else 1
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry['offset'])
    return arr.reshape(entry['shape']).astype(dtype.newbyteorder('='))


def _pack_optimizer(state: dict[str, Any], blob: _Blob) -> dict[str, Any]:
    packed: dict[str, Any] = {}
    for idx, values in state['state'].items():
        packed[str(idx)] = {k: blob.put(v.detach().cpu().numpy()) if torch.is_tensor(v)
                            else {'scalar': v} for k, v in values.items()}
    return {'state': packed, 'param_groups': state['param_groups']}


def _unpack_optimizer(packed: dict[str, Any], blob: memoryview) -> dict[str, Any]:
    state = {int(idx): {k: v['scalar'] if 'scalar' in v else torch.from_numpy(_get(blob, v))
                        for k, v in values.items()}
             for idx, values in packed['state'].items()}
    return {'state': state, 'param_groups': packed['param_groups']}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """ Serialize a checkpoint """
    blob = _Blob()
    manifest = {
        'pass': ckpt.pass_index,
        'factor': ckpt.factor,
        'loss_kind': ckpt.loss_kind.value,
        'iteration': ckpt.iteration,
        'growth': {'stage': ckpt.growth.stage, 'alpha': ckpt.growth.alpha},
        'networks': {role: {'init_mode': store.init_mode,
                            'tensors': {k: blob.put(v) for k, v in store.tensors.items()}}
                     for role, store in ckpt.networks.items()},
        'optimizers': {role: _pack_optimizer(s, blob) for role, s in ckpt.optimizers.items()},
        'numpy_rng': ckpt.numpy_rng,
        'torch_rng': base64.b64encode(ckpt.torch_rng).decode('ascii'),
        'samplers': ckpt.samplers,
    }
    header = json.dumps(manifest, sort_keys=True).encode('utf-8')
    return _HEADER.pack(MAGIC, VERSION, len(header)) + header + b''.join(blob.parts)


def decode_checkpoint(data: bytes, source: str = '<bytes>') -> Checkpoint:
    """Parse a checkpoint

    Raises:
        ValidationError: on a bad magic, an unknown version or a truncated file
    """
    if len(data) < _HEADER.size:
        raise ValidationError(f'{source}: truncated checkpoint')
    magic, version, size = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError(f'{source}: not a checkpoint (magic {magic!r})')
    if version != VERSION:
        raise ValidationError(f'{source}: unsupported checkpoint version {version}')
    try:
        manifest = json.loads(data[_HEADER.size:_HEADER.size + size])
        blob = memoryview(data)[_HEADER.size + size:]
        networks = {role: WeightStore({k: _get(blob, e) for k, e in net['tensors'].items()},
                                      net['init_mode'])
                    for role, net in manifest['networks'].items()}
        optimizers = {role: _unpack_optimizer(p, blob)
                      for role, p in manifest['optimizers'].items()}
    except (ValueError, KeyError) as e:
        raise ValidationError(f'{source}: corrupt checkpoint: {e}') from e
    return Checkpoint(
        pass_index=manifest['pass'],
        factor=manifest['factor'],
        loss_kind=LossKind(manifest['loss_kind']),
        iteration=manifest['iteration'],
        growth=GrowthState(**manifest['growth']),
        networks=networks,
        optimizers=optimizers,
        numpy_rng=manifest['numpy_rng'],
        torch_rng=base64.b64decode(manifest['torch_rng']),
        samplers=manifest['samplers'],
    )


def checkpoint_name(pass_index: int, iteration: int | None = None) -> str:
    """ `pass1_0001000.ckpt`, or `pass1_latest.ckpt` without an iteration """
    return f'pass{pass_index}_{"latest" if iteration is None else f"{iteration:07d}"}.ckpt'


def save_checkpoint(ckpt: Checkpoint, out_dir: pathlib.Path) -> pathlib.Path:
    """Atomically write the numbered checkpoint and refresh the `latest` one

    Returns:
        path of the numbered checkpoint
    """
    payload = encode_checkpoint(ckpt)
    out_dir = pathlib.Path(out_dir)
    path = atomic_write_bytes(out_dir / checkpoint_name(ckpt.pass_index, ckpt.iteration), payload)
    atomic_write_bytes(out_dir / checkpoint_name(ckpt.pass_index), payload)
    logger.info(f'wrote checkpoint {path} at iteration {ckpt.iteration}')
    return path


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    """Read a checkpoint file

    Raises:
        VolumeIOError: if the file cannot be read
        ValidationError: if it is not a valid checkpoint
    """
    try:
        data = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f'Could not read checkpoint {path}: {e}') from e
    return decode_checkpoint(data, str(path))


def load_generator(path: pathlib.Path, pass_index: int | None = None) -> Generator:
    """Generator of a checkpoint, in eval mode

    Raises:
        ValidationError: if the checkpoint belongs to another pass
    """
    ckpt = load_checkpoint(path)
    if pass_index is not None and ckpt.pass_index != pass_index:
        raise ValidationError(f'{path} holds a pass-{ckpt.pass_index} generator, '
                              f'expected pass {pass_index}')
    return ckpt.generator()
