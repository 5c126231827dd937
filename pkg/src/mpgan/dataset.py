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
"""Training samples: slicing, augmentation, tiling, warped triplets, shards and batches.

Augmentation works on aligned LR/HR bricks cut from a simulation frame: the brick is cut at
a random offset first, then scaled, rotated about gravity (y) and flipped, and only then
sliced and tiled.
"""
import asyncio
import collections
import enum
import functools
import json
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.ndimage
import torch

from .exc import ValidationError, VolumeIOError
from .inference import FirstPass, first_pass_volume, plane_velocity, second_pass_input, \
    upsample_linear_z
from .losses import warp_triplet
from .networks import Generator, WeightStore
from .solver import frame_name
from .types import AugmentConfig, Axis, DatasetConfig, InferenceConfig, RunStatus
from .util import LoggingMixin, ROOT_LOGGER, atomic_write_bytes
from .volio import decode_records, encode_record, read_fvol, read_sidecar, sidecar_path

DENSITY_THRESHOLD = 0.005
SECOND_PASS_TILE = 64

logger = logging.getLogger(f'{ROOT_LOGGER}.dataset')


class SampleKind(enum.IntEnum):
    """ Shard record kinds """
    SPATIAL = 1
    TEMPORAL = 2


DEFAULT_BATCH = {SampleKind.SPATIAL: 16, SampleKind.TEMPORAL: 15}


@dataclass(frozen=True)
class SliceSample:
    """One training tile pair

    `lr_density` (t, t), `lr_velocity` (t, t, 3) in plane channel order and `hr_target`
    (j*t, j*t).  Second-pass samples are resolution-preserving (`j` = 1): their inputs are the
    interpolated base fields at HR and `first_pass` holds the first-pass output tile.
    """
    lr_density: np.ndarray
    lr_velocity: np.ndarray
    hr_target: np.ndarray
    axis: Axis
    sim_id: int
    frame_id: int
    j: int
    offset: tuple[int, int] = (0, 0)
    first_pass: np.ndarray | None = None

    kind = SampleKind.SPATIAL

    def __post_init__(self):
        t = self.lr_density.shape
        if len(t) != 2 or self.lr_velocity.shape != (*t, 3):
            raise ValidationError(f'LR density {t} and velocity {self.lr_velocity.shape} '
                                  f'do not match')
        if self.hr_target.shape != (self.j * t[0], self.j * t[1]):
            raise ValidationError(f'HR target {self.hr_target.shape} is not {self.j}x {t}')
        if self.first_pass is not None and self.first_pass.shape != self.hr_target.shape:
            raise ValidationError('first-pass tile must match the target tile')

    @property
    def tile(self) -> int:
        """ Input tile side """
        return self.lr_density.shape[0]

    def generator_input(self) -> np.ndarray:
        """ (C, t, t) network input: density, velocity, then the first-pass tile if any """
        chans = [self.lr_density[np.newaxis], self.lr_velocity.transpose(2, 0, 1)]
        if self.first_pass is not None:
            chans.append(self.first_pass[np.newaxis])
        return np.concatenate(chans).astype(np.float32)


@dataclass(frozen=True)
class TripletSample:
    """Three consecutive frames of one slice tile

    `targets` (3, H, W) with frames t-1 and t+1 already warped to frame t, `inputs`
    (3, h, w, C) unwarped generator inputs, `velocities` (3, H, W, 2) in-plane velocities in
    target pixels per time unit, and the warp time step `dt`.
    """
    targets: np.ndarray
    inputs: np.ndarray
    velocities: np.ndarray
    axis: Axis
    sim_id: int
    frame_id: int
    j: int
    dt: float = 0.5

    kind = SampleKind.TEMPORAL

    def __post_init__(self):
        _, h, w = self.targets.shape
        if self.targets.shape[0] != 3 or self.inputs.shape[0] != 3 \
                or self.velocities.shape != (3, h, w, 2):
            raise ValidationError(f'Inconsistent triplet: targets {self.targets.shape}, '
                                  f'inputs {self.inputs.shape}, velocities '
                                  f'{self.velocities.shape}')
        if (h, w) != (self.j * self.inputs.shape[1], self.j * self.inputs.shape[2]):
            raise ValidationError(f'Targets {(h, w)} are not {self.j}x inputs '
                                  f'{self.inputs.shape[1:3]}')

    def generator_inputs(self) -> np.ndarray:
        """ (3, C, h, w) """
        return self.inputs.transpose(0, 3, 1, 2).astype(np.float32)


type Sample = SliceSample | TripletSample


@dataclass(frozen=True)
class VolumePair:
    """ Aligned volumes: LR density `[a, b, c]`, LR velocity `[a, b, c, 3]` in LR cell units and
    HR density `[j*a, j*b, j*c]` """
    lr_density: np.ndarray
    lr_velocity: np.ndarray
    hr_density: np.ndarray
    j: int

    def __post_init__(self):
        dims = self.lr_density.shape
        if len(dims) != 3 or self.lr_velocity.shape != (*dims, 3):
            raise ValidationError(f'LR density {dims} and velocity {self.lr_velocity.shape} '
                                  f'do not match')
        if self.hr_density.shape != tuple(self.j * n for n in dims):
            raise ValidationError(f'HR density {self.hr_density.shape} is not {self.j}x {dims}')


class SlicePair(NamedTuple):
    """ One LR/HR slice pair ahead of tiling """
    lr_density: np.ndarray
    lr_velocity: np.ndarray
    hr_density: np.ndarray
    first_pass: np.ndarray | None = None


def slice_volume(volume: np.ndarray, axis: Axis | int) -> list[np.ndarray]:
    """ Slices normal to `axis` in index order; slice k of the z split is `volume[:, :, k]` """
    return [s.copy() for s in np.moveaxis(np.asarray(volume), Axis(axis), 0)]


def restack(slices: Sequence[np.ndarray], axis: Axis | int) -> np.ndarray:
    """ Inverse of `slice_volume` """
    return np.stack(slices, axis=Axis(axis))


def slice_passes(density: np.ndarray, threshold: float = DENSITY_THRESHOLD) -> bool:
    """ Mean density at or above `threshold` (inclusive, to rounding) """
    mean = float(np.mean(density))
    return mean >= threshold or bool(np.isclose(mean, threshold, rtol=1e-9, atol=0.0))


def filter_slices(slices: Sequence[np.ndarray],
                  threshold: float = DENSITY_THRESHOLD) -> list[np.ndarray]:
    """ Keep slices whose mean density reaches `threshold` """
    return [s for s in slices if slice_passes(s, threshold)]


@dataclass(frozen=True)
class Transform:
    """ Scale factor, quarter turns about +y, and mirrorings of x and z """
    scale: float = 1.0
    rotations: int = 0
    flip_x: bool = False
    flip_z: bool = False

    @classmethod
    def draw(cls, config: AugmentConfig, rng: np.random.Generator) -> 'Transform':
        """ Random transform; draws are made in a fixed order """
        lo, hi = config.scale_range
        scale = float(rng.uniform(lo, hi))
        rotations = int(rng.integers(0, 4))
        flips = rng.integers(0, 2, size=2)
        return cls(scale,
                   rotations if config.enable_rot90_gravity_axis else 0,
                   bool(flips[0]) and config.enable_flips,
                   bool(flips[1]) and config.enable_flips)

    @property
    def is_identity(self) -> bool:
        """ True when applying it changes nothing """
        return self.scale == 1.0 and self.rotations % 4 == 0 and not (self.flip_x or self.flip_z)


def rotate_y(volume: np.ndarray, k: int, velocity: bool = False) -> np.ndarray:
    """Rotate a `[x, y, z(, c)]` volume by `k` quarter turns about y

    One turn maps position (x, z) to (z, -x); velocity vectors (vx, vy, vz) become
    (vz, vy, -vx).
    """
    out = np.rot90(volume, k % 4, axes=(2, 0))
    if velocity:
        for _ in range(k % 4):
            out = np.stack([out[..., 2], out[..., 1], -out[..., 0]], axis=-1)
    return np.ascontiguousarray(out)


def mirror(volume: np.ndarray, axis: Axis | int, velocity: bool = False) -> np.ndarray:
    """ Mirror along `axis`; velocity volumes also negate that component """
    out = np.flip(volume, Axis(axis)).copy()
    if velocity:
        out[..., Axis(axis)] *= -1.0
    return out


def _zoom(volume: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    factors = [n_new / n_old for n_new, n_old in zip(shape, volume.shape)]
    factors += [1.0] * (volume.ndim - len(factors))
    return scipy.ndimage.zoom(volume, factors, order=1, mode='nearest', grid_mode=True)


def augment_pair(pair: VolumePair, transform: Transform) -> VolumePair:
    """Apply one transform identically to the LR and HR members

    Scaling resamples every member (the LR dims are rounded, the HR dims follow at `j` times
    them) and multiplies each velocity component by its axis' actual scale.
    """
    if transform.is_identity:
        return pair
    lr_d, lr_v, hr_d = pair.lr_density, pair.lr_velocity, pair.hr_density
    if transform.scale != 1.0:
        dims = lr_d.shape
        new = tuple(max(1, round(n * transform.scale)) for n in dims)
        lr_d = _zoom(lr_d, new)
        lr_v = _zoom(lr_v, new) * (np.array(new, dtype=np.float64) / np.array(dims))
        hr_d = _zoom(hr_d, tuple(pair.j * n for n in new))
    if transform.rotations % 4:
        lr_d = rotate_y(lr_d, transform.rotations)
        lr_v = rotate_y(lr_v, transform.rotations, velocity=True)
        hr_d = rotate_y(hr_d, transform.rotations)
    for flip, axis in ((transform.flip_x, Axis.X), (transform.flip_z, Axis.Z)):
        if flip:
            lr_d, lr_v, hr_d = mirror(lr_d, axis), mirror(lr_v, axis, True), mirror(hr_d, axis)
    return VolumePair(lr_d, lr_v, hr_d, pair.j)


def brick_offset(dims: Sequence[int], size: int, rng: np.random.Generator) -> tuple[int, ...]:
    """ Uniform LR offset of a `size` brick (clipped to `dims`) """
    return tuple(int(rng.integers(0, n - min(size, n) + 1)) for n in dims)


def cut_brick(pair: VolumePair, size: int, offset: Sequence[int]) -> VolumePair:
    """ LR brick of side `size` at `offset` and the HR brick covering the same region """
    j = pair.j
    lr = tuple(slice(o, o + min(size, n)) for o, n in zip(offset, pair.lr_density.shape))
    hr = tuple(slice(j * s.start, j * s.stop) for s in lr)
    return VolumePair(pair.lr_density[lr], pair.lr_velocity[lr], pair.hr_density[hr], j)


def brick_source_size(dims: Sequence[int], lr_tile: int, brick: int, scale: float) -> int:
    """ LR brick side, clipped to `dims`, that still spans `lr_tile` cells after scaling """
    return max(min(brick, *dims), math.ceil(lr_tile / scale - 1e-9))


def pad_offsets(dims: Sequence[int], size: int, rng: np.random.Generator) -> tuple[int, ...]:
    """ Uniform low-side padding of every LR axis shorter than `size` """
    return tuple(int(rng.integers(0, max(0, size - n) + 1)) for n in dims)


class BrickCut(NamedTuple):
    """ Where one training brick is cut, how far it is padded and how it is augmented """
    offset: tuple[int, ...]
    size: int
    pad: tuple[int, ...]
    transform: Transform


def pad_brick(pair: VolumePair, size: int, low: Sequence[int]) -> VolumePair:
    """Grow every LR axis shorter than `size` with empty cells, `low` of them before the
    data; the HR member grows by `j` times as much

    Cells beyond the closed domain walls hold no smoke and no flow, so the padding is zero.
    """
    short = [max(0, size - n) for n in pair.lr_density.shape]
    if not any(short):
        return pair
    lr_pad = [(min(a, s), s - min(a, s)) for a, s in zip(low, short)]
    hr_pad = [(pair.j * a, pair.j * b) for a, b in lr_pad]
    return VolumePair(np.pad(pair.lr_density, lr_pad),
                      np.pad(pair.lr_velocity, [*lr_pad, (0, 0)]),
                      np.pad(pair.hr_density, hr_pad), pair.j)


def tile_offset(shape: Sequence[int], tile: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform offset of a `tile` square inside `shape`

    Raises:
        ValidationError: if the slice is smaller than the tile
    """
    if min(shape) < tile:
        raise ValidationError(f'Slice {tuple(shape)} is smaller than tile {tile}')
    return int(rng.integers(0, shape[0] - tile + 1)), int(rng.integers(0, shape[1] - tile + 1))


def cut_tile(pair: SlicePair, lr_tile: int = 16, j: int = 1,
             rng: np.random.Generator | None = None, *, offset: tuple[int, int] | None = None,
             axis: Axis = Axis.Z, sim_id: int = 0, frame_id: int = 0) -> SliceSample:
    """Cut aligned tiles: the LR tile at `offset` (random when omitted) and the HR tile at
    `j * offset` with side `j * lr_tile`

    Raises:
        ValidationError: if the slice is smaller than the tile or the HR slice is not j times
            the LR slice
    """
    h, w = pair.lr_density.shape
    if pair.hr_density.shape != (j * h, j * w):
        raise ValidationError(f'HR slice {pair.hr_density.shape} is not {j}x {(h, w)}')
    if offset is None:
        offset = tile_offset((h, w), lr_tile, rng or np.random.default_rng())
    elif min(h, w) < lr_tile:
        raise ValidationError(f'Slice {(h, w)} is smaller than tile {lr_tile}')
    oy, ox = offset
    lr = np.s_[oy:oy + lr_tile, ox:ox + lr_tile]
    hr = np.s_[j * oy:j * (oy + lr_tile), j * ox:j * (ox + lr_tile)]
    first = pair.first_pass[hr].copy() if pair.first_pass is not None else None
    return SliceSample(pair.lr_density[lr].copy(), pair.lr_velocity[lr].copy(),
                       pair.hr_density[hr].copy(), axis, sim_id, frame_id, j, (oy, ox), first)


def hr_plane_velocity(lr_velocity: np.ndarray, j: int) -> np.ndarray:
    """ (t, t, 3) LR-unit velocity tile to the (j*t, j*t, 2) in-plane velocity in HR units """
    v = lr_velocity[..., :2]
    if j == 1:
        return v.copy()
    h, w = v.shape[:2]
    return _zoom(v, (j * h, j * w)) * j


def build_warped_triplet(targets: Sequence[np.ndarray], inputs: Sequence[np.ndarray],
                         velocities: Sequence[np.ndarray], dt: float, *, axis: Axis = Axis.Z,
                         sim_id: int = 0, frame_id: int = 0, j: int = 1) -> TripletSample:
    """Warp the t-1 target forward with its velocity and the t+1 target backward with its
    negated velocity, leaving frame t untouched

    Raises:
        ValidationError: if any of the three frames is missing
    """
    if len(targets) != 3 or len(inputs) != 3 or len(velocities) != 3:
        raise ValidationError('A triplet needs frames t-1, t and t+1')
    frames = torch.as_tensor(np.stack(targets), dtype=torch.float64).unsqueeze(0)
    vel = torch.as_tensor(np.stack(velocities), dtype=torch.float64).unsqueeze(0)
    warped = warp_triplet(frames, vel, dt)[0].numpy()
    return TripletSample(warped.astype(np.float32), np.stack(inputs).astype(np.float32),
                         np.stack(velocities).astype(np.float32), axis, sim_id, frame_id, j,
                         float(dt))


def encode_sample(sample: Sample) -> bytes:
    """ One shard record """
    if isinstance(sample, SliceSample):
        ints = [sample.axis, sample.sim_id, sample.frame_id, sample.j, *sample.offset]
        return encode_record(SampleKind.SPATIAL, ints, [sample.lr_density, sample.lr_velocity,
                                                        sample.hr_target, sample.first_pass])
    ints = [sample.axis, sample.sim_id, sample.frame_id, sample.j]
    return encode_record(SampleKind.TEMPORAL, ints, [sample.targets, sample.inputs,
                                                     sample.velocities, np.array([sample.dt])])


def shard_meta_path(path: pathlib.Path) -> pathlib.Path:
    """ `<shard>.meta.json` next to a shard file """
    path = pathlib.Path(path)
    return path.with_name(f'{path.name}.meta.json')


def write_shard(path: pathlib.Path, samples: Sequence[Sample],
                meta: Mapping[str, Any] | None = None) -> pathlib.Path:
    """ Atomically write a shard file and, when given, its JSON metadata """
    path = atomic_write_bytes(pathlib.Path(path), b''.join(encode_sample(s) for s in samples))
    if meta is not None:
        atomic_write_bytes(shard_meta_path(path),
                           json.dumps(dict(meta), indent=2, sort_keys=True).encode('utf-8'))
    return path


def read_shard_meta(path: pathlib.Path) -> dict[str, Any]:
    """ Metadata written with a shard; empty when the shard has none """
    meta = shard_meta_path(path)
    return read_sidecar(meta) if meta.is_file() else {}


def read_shard(path: pathlib.Path) -> list[Sample]:
    """Load every sample of a shard file

    Raises:
        VolumeIOError: if the file cannot be read
    """
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise VolumeIOError(f'Could not read shard {path}: {e}') from e
    samples: list[Sample] = []
    for kind, ints, arrays in decode_records(data, str(path)):
        match kind:
            case SampleKind.SPATIAL:
                axis, sim_id, frame_id, j, oy, ox = ints
                lr_d, lr_v, hr, first = arrays
                samples.append(SliceSample(lr_d, lr_v, hr, Axis(axis), sim_id, frame_id, j,
                                           (oy, ox), first))
            case SampleKind.TEMPORAL:
                axis, sim_id, frame_id, j = ints
                targets, inputs, vel, dt = arrays
                samples.append(TripletSample(targets, inputs, vel, Axis(axis), sim_id, frame_id,
                                             j, float(dt[0])))
            case _:
                raise ValidationError(f'{path}: unknown record kind {kind}')
    return samples


def shard_name(pass_index: int, j: int) -> str:
    """ File name of the shard holding one pass/level """
    return f'pass{pass_index}_x{j}.shard'


def curriculum_levels(factor: int) -> tuple[int, ...]:
    """ Up-scaling factors trained by the first pass """
    return (2, 4, 8) if factor == 8 else (factor,)


@functools.lru_cache(maxsize=4)
def _permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class BatchSampler:
    """Epoch-wise shuffled batches without replacement; a partial final batch is dropped and a
    pool smaller than one batch shrinks the batch to the pool.

    The permutation of epoch `e` depends only on `(seed, e)`, so the sampler state is just
    the epoch and the position within it.
    """

    def __init__(self, samples: Sequence[Sample], batch_size: int | None = None, seed: int = 0):
        if not samples:
            raise ValidationError('Cannot batch an empty sample pool')
        kinds = {s.kind for s in samples}
        if len(kinds) != 1:
            raise ValidationError('Sample pool mixes spatial and temporal samples')
        self.samples = list(samples)
        self.kind = kinds.pop()
        self.batch_size = batch_size or DEFAULT_BATCH[self.kind]
        if self.batch_size < 1:
            raise ValidationError(f'Batch size must be positive, got {self.batch_size}')
        if len(self.samples) < self.batch_size:
            logger.warning(f'{len(self.samples)} {self.kind.name.lower()} samples cannot fill a '
                           f'batch of {self.batch_size}; batching all of them')
            self.batch_size = len(self.samples)
        self.seed = seed
        self.epoch = 0
        self.position = 0

    @property
    def batches_per_epoch(self) -> int:
        """ Full batches per epoch """
        return len(self.samples) // self.batch_size

    def _order(self, epoch: int) -> np.ndarray:
        return _permutation(self.seed, epoch, len(self.samples))

    def epoch_batches(self, epoch: int) -> list[list[Sample]]:
        """ All batches of one epoch """
        order = self._order(epoch)
        bs = self.batch_size
        return [[self.samples[i] for i in order[b * bs:(b + 1) * bs]]
                for b in range(self.batches_per_epoch)]

    def next_batch(self) -> list[Sample]:
        """ Next batch of the endless stream """
        if self.position >= self.batches_per_epoch:
            self.epoch += 1
            self.position = 0
        order = self._order(self.epoch)
        start = self.position * self.batch_size
        self.position += 1
        return [self.samples[i] for i in order[start:start + self.batch_size]]

    def state_dict(self) -> dict[str, int]:
        """ Serializable position """
        return {'seed': self.seed, 'epoch': self.epoch, 'position': self.position,
                'batch_size': self.batch_size}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        """ Restore a position saved by `state_dict` """
        if int(state['batch_size']) != self.batch_size:
            raise ValidationError(f'Saved batch size {state["batch_size"]} differs from '
                                  f'{self.batch_size}')
        self.seed = int(state['seed'])
        self.epoch = int(state['epoch'])
        self.position = int(state['position'])


def make_batches(samples: Sequence[Sample], *, spatial_batch: int = 16, temporal_batch: int = 15,
                 seed: int = 0, epochs: int = 1) -> Iterator[list[Sample]]:
    """ Batches of `epochs` shuffled passes over one sample kind """
    kind = samples[0].kind if samples else SampleKind.SPATIAL
    size = spatial_batch if kind is SampleKind.SPATIAL else temporal_batch
    sampler = BatchSampler(samples, size, seed)
    for epoch in range(epochs):
        yield from sampler.epoch_batches(epoch)


def collate_spatial(batch: Sequence[SliceSample]) -> tuple[np.ndarray, np.ndarray]:
    """ (B, C, t, t) inputs and (B, 1, H, W) targets """
    return (np.stack([s.generator_input() for s in batch]),
            np.stack([s.hr_target for s in batch])[:, np.newaxis].astype(np.float32))


def collate_temporal(batch: Sequence[TripletSample]) \
        -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """ (B, 3, C, t, t) inputs, (B, 3, H, W) warped targets, (B, 3, H, W, 2) velocities, dt """
    return (np.stack([s.generator_inputs() for s in batch]),
            np.stack([s.targets for s in batch]).astype(np.float32),
            np.stack([s.velocities for s in batch]).astype(np.float32),
            batch[0].dt)


class ShardBuilder(LoggingMixin):
    """Turns one exported simulation into training samples

    First pass: XY slices of z-interpolated LR bricks against the HR brick at every curriculum
    level.  Second pass: YZ slices of the five-channel volume produced by running the frozen
    first-pass generator on each brick.
    """

    # pylint: disable-next=too-many-arguments
    def __init__(self, sim_dir: pathlib.Path, *, factor: int, pass_index: int = 1,
                 dataset: DatasetConfig | None = None, augment: AugmentConfig | None = None,
                 sim_id: int = 0, g1: Generator | None = None,
                 inference: InferenceConfig | None = None):
        self.sim_dir = pathlib.Path(sim_dir)
        self.factor = factor
        self.pass_index = pass_index
        self.dataset = dataset or DatasetConfig()
        self.augment = augment or AugmentConfig()
        self.sim_id = sim_id
        self.g1 = g1
        self.g1_digest = WeightStore.from_module(g1).digest() if g1 is not None else None
        self.inference = inference or InferenceConfig()
        self.status = RunStatus()
        self.samples: dict[str, list[Sample]] = {}
        self.cuts: list[BrickCut] = []
        self._padding_logged = False
        self._setup_logger(f'{ROOT_LOGGER}.shards', self.sim_dir.name)
        if pass_index not in (1, 2):
            raise ValidationError(f'pass must be 1 or 2, got {pass_index}')
        if pass_index == 2 and g1 is None:
            raise ValidationError('Second-pass samples need the first-pass generator')
        meta = read_sidecar(sidecar_path(self.sim_dir, self.sim_dir.name))
        self.frames = int(meta['config']['frames'])
        self.dt = float(meta['config']['dt'])
        self._load = functools.lru_cache(maxsize=24)(self._read)

    @property
    def name(self) -> str:
        """ Simulation directory name """
        return self.sim_dir.name

    @property
    def levels(self) -> tuple[int, ...]:
        """ Up-scaling factors this builder emits """
        return curriculum_levels(self.factor) if self.pass_index == 1 else (self.factor,)

    def _read(self, level: int, kind: str, frame: int) -> np.ndarray:
        return read_fvol(self.sim_dir / f'x{level}' / frame_name(kind, frame))

    def _pair(self, frame: int, j: int) -> VolumePair:
        return VolumePair(self._load(1, 'density', frame), self._load(1, 'velocity', frame),
                          self._load(j, 'density', frame), j)

    def _bricks(self, frame: int, j: int, cut: BrickCut) -> list[VolumePair]:
        return [augment_pair(pad_brick(cut_brick(self._pair(frame + d, j), cut.size, cut.offset),
                                       cut.size, cut.pad), cut.transform)
                for d in (-1, 0, 1)]

    def _pick(self, candidates: list[int], rng: np.random.Generator, frame: int) -> int | None:
        if not candidates:
            self.log(f'frame {frame}: no slice reaches density {self.dataset.density_threshold}; '
                     f'skipping brick', 'debug')
            return None
        return int(rng.choice(candidates))

    def build_first_pass_samples(self, frame: int, j: int, cut: BrickCut,
                                 rng: np.random.Generator) -> list[Sample]:
        bricks = self._bricks(frame, j, cut)
        dens = [upsample_linear_z(b.lr_density, j) for b in bricks]
        vels = [plane_velocity(upsample_linear_z(b.lr_velocity, j), Axis.Z) for b in bricks]
        k = self._pick([k for k in range(dens[1].shape[2])
                        if slice_passes(dens[1][:, :, k], self.dataset.density_threshold)],
                       rng, frame)
        if k is None:
            return []
        tile = self.dataset.lr_tile
        off = tile_offset(dens[1].shape[:2], tile, rng)
        tiles = [cut_tile(SlicePair(d[:, :, k], v[:, :, k], b.hr_density[:, :, k]), tile, j,
                          offset=off, axis=Axis.Z, sim_id=self.sim_id, frame_id=frame)
                 for d, v, b in zip(dens, vels, bricks)]
        triplet = build_warped_triplet(
            [t.hr_target for t in tiles],
            [t.generator_input().transpose(1, 2, 0) for t in tiles],
            [hr_plane_velocity(t.lr_velocity, j) for t in tiles],
            self.dt, axis=Axis.Z, sim_id=self.sim_id, frame_id=frame, j=j)
        return [tiles[1], triplet]

    def build_second_pass_samples(self, frame: int, cut: BrickCut,
                                  rng: np.random.Generator) -> list[Sample]:
        f = self.factor
        bricks = self._bricks(frame, f, cut)
        firsts: list[FirstPass] = [
            first_pass_volume(b.lr_density, b.lr_velocity, self.g1, f,  # type: ignore[arg-type]
                              overlap=self.inference.overlap_lr,
                              tile_batch=self.inference.tile_batch) for b in bricks]
        vols = [second_pass_input(fp) for fp in firsts]
        i = self._pick([i for i in range(vols[1].shape[0])
                        if slice_passes(vols[1][i, :, :, 0], self.dataset.density_threshold)],
                       rng, frame)
        if i is None:
            return []
        off = tile_offset(vols[1].shape[1:3], SECOND_PASS_TILE, rng)
        tiles = [cut_tile(SlicePair(v[i, :, :, 0], v[i, :, :, 1:4], b.hr_density[i], v[i, :, :, 4]),
                          SECOND_PASS_TILE, 1, offset=off, axis=Axis.X, sim_id=self.sim_id,
                          frame_id=frame)
                 for v, b in zip(vols, bricks)]
        triplet = build_warped_triplet(
            [t.hr_target for t in tiles],
            [t.generator_input().transpose(1, 2, 0) for t in tiles],
            [t.lr_velocity[..., :2] * f for t in tiles],
            self.dt, axis=Axis.X, sim_id=self.sim_id, frame_id=frame, j=1)
        return [tiles[1], triplet]

    def draw_cut(self, lr_dims: Sequence[int], rng: np.random.Generator) -> BrickCut:
        """Draw the augmentation first, then a brick large enough to keep `lr_tile` cells once
        scaled; a domain too small for that is padded with empty cells beyond its walls
        """
        transform = Transform.draw(self.augment, rng)
        size = brick_source_size(lr_dims, self.dataset.lr_tile, self.dataset.brick,
                                 transform.scale)
        if size > min(lr_dims) and not self._padding_logged:
            self._padding_logged = True
            self.log(f'LR domain {tuple(lr_dims)} is smaller than the {size} cells a '
                     f'{transform.scale:.3f} scale needs; padding bricks with empty cells', 'info')
        return BrickCut(brick_offset(lr_dims, size, rng), size, pad_offsets(lr_dims, size, rng),
                        transform)

    def build(self) -> dict[str, list[Sample]]:
        """Generate every sample of this simulation

        Returns:
            shard file name to samples, spatial and temporal interleaved

        Raises:
            VolumeIOError: if a frame file is missing or unreadable
        """
        out: dict[str, list[Sample]] = collections.defaultdict(list)
        cfg = self.dataset
        lr_dims = self._load(1, 'density', 0).shape
        self.cuts = []
        for frame in range(1, self.frames - 1, cfg.frame_stride):
            for b in range(cfg.bricks_per_frame):
                rng = np.random.default_rng([cfg.seed, self.sim_id, frame, b])
                cut = self.draw_cut(lr_dims, rng)
                self.cuts.append(cut)
                try:
                    if self.pass_index == 1:
                        for j in self.levels:
                            out[shard_name(1, j)] += self.build_first_pass_samples(
                                frame, j, cut, rng)
                    else:
                        out[shard_name(2, self.factor)] += self.build_second_pass_samples(
                            frame, cut, rng)
                except ValidationError as e:
                    self.status.compute_ok = False
                    self.log(f'frame {frame} brick {b}: {e}', 'warning')
        counts = {k: len(v) for k, v in out.items()}
        self.log(f'built samples {counts}', 'info')
        return dict(out)

    async def run(self) -> dict[str, list[Sample]]:
        """ `build` on a worker thread; the result is kept on `samples` """
        try:
            self.samples = await asyncio.to_thread(self.build)
        except Exception:
            self.status.compute_ok = False
            raise
        return self.samples
