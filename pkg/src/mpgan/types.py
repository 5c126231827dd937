# -*- coding: utf-8 -*-
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
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Any, Self

from .exc import ValidationError


class CommandType(enum.Enum):
    """ CLI subcommands """
    GEN_DATA = 'gen-data'
    SLICE = 'slice'
    TRAIN = 'train'
    INFER = 'infer'
    INFER_AXIS = 'infer-axis'
    COMBINE = 'combine'
    BENCH = 'bench'
    RENDER = 'render'
    PSNR = 'psnr'
    PLOT_LOSSES = 'plot-losses'


class Axis(enum.IntEnum):
    """ Volume axis; the value is the array dimension it indexes """
    X = 0
    Y = 1
    Z = 2

    @classmethod
    def parse(cls, value: 'str | int | Axis') -> 'Axis':
        """ Accepts `x`/`X`/0 style spellings """
        if isinstance(value, Axis):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError as e:
                raise ValidationError(f'Unknown axis {value!r}') from e
        return cls(value)

    @property
    def in_plane(self) -> tuple['Axis', 'Axis']:
        """ The two axes spanning a slice normal to this axis, in array order """
        a, b = (ax for ax in Axis if ax is not self)
        return a, b


class LossKind(enum.Enum):
    """ Adversarial objective used for training """
    TEMPO = 'tempo'
    WGAN_GP = 'wgan_gp'
    LSGAN = 'lsgan'


class CombineMode(enum.Enum):
    """ Ways to merge three single-axis volumes into one """
    AVG = 'avg'
    MAX = 'max'
    RES = 'res'
    CRES = 'cres'


class Subsystem(enum.Enum):
    """ What a benchmark record timed """
    SOLVER = 'solver'
    MULTIPASS = 'multipass'


@dataclass(frozen=True)
class GrowthState:
    """ Progressive-growing position: the active stage and the fade-in factor of its layers """
    stage: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if not 0 <= self.stage <= 3:
            raise ValidationError(f'Growth stage {self.stage} outside [0, 3]')
        if not 0.0 <= self.alpha <= 1.0 or math.isnan(self.alpha):
            raise ValidationError(f'Blend factor alpha={self.alpha} outside [0, 1]')
        if self.stage == 0 and self.alpha != 1.0:
            object.__setattr__(self, 'alpha', 1.0)


@dataclass(frozen=True)
class SourceSpec:
    """ Spherical inflow region re-applied every frame """
    center: tuple[float, float, float]
    radius: float
    density_rate: float
    inflow_velocity: tuple[float, float, float]

    def __post_init__(self):
        if self.radius <= 0:
            raise ValidationError(f'Source radius must be positive, got {self.radius}')
        if self.density_rate < 0:
            raise ValidationError(f'Source density rate must be >= 0, got {self.density_rate}')

    def check_inside(self, dims: tuple[int, int, int]) -> None:
        """ Raises if the sphere pokes out of a domain of `dims` cells """
        for c, n in zip(self.center, dims):
            if c - self.radius < -0.5 or c + self.radius > n - 0.5:
                raise ValidationError(f'Source at {self.center} with radius {self.radius} '
                                      f'leaves domain {dims}')


@dataclass(frozen=True)
class SimConfig:
    """ One simulation run.  `inflow_count` and `buoyancy` are drawn from the seed when left
    unset; `buoyancy` is in domain units and scaled by the grid resolution inside the solver.
    """
    hr_resolution: tuple[int, int, int] = (64, 64, 64)
    upscale_factor: int = 4
    dt: float = 0.5
    frames: int = 120
    inflow_count: int | None = None
    buoyancy: tuple[float, float, float] | None = None
    cg_tolerance: float = 1e-5
    cg_max_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hr_resolution', tuple(int(n) for n in self.hr_resolution))
        if self.buoyancy is not None:
            object.__setattr__(self, 'buoyancy', tuple(float(b) for b in self.buoyancy))
        if len(self.hr_resolution) != 3 or min(self.hr_resolution) <= 0:
            raise ValidationError(f'hr_resolution must be 3 positive ints: {self.hr_resolution}')
        if self.upscale_factor not in (4, 8):
            raise ValidationError(f'upscale_factor must be 4 or 8, got {self.upscale_factor}')
        if any(n % self.upscale_factor for n in self.hr_resolution):
            raise ValidationError(f'hr_resolution {self.hr_resolution} not divisible by '
                                  f'{self.upscale_factor}')
        if self.dt <= 0:
            raise ValidationError(f'dt must be positive, got {self.dt}')
        if self.frames < 3:
            raise ValidationError(f'at least 3 frames are required, got {self.frames}')
        if self.inflow_count is not None and not 3 <= self.inflow_count <= 12:
            raise ValidationError(f'inflow_count must lie in [3, 12], got {self.inflow_count}')
        if self.cg_tolerance <= 0 or self.cg_max_iter <= 0:
            raise ValidationError('cg_tolerance and cg_max_iter must be positive')

    @property
    def lr_resolution(self) -> tuple[int, int, int]:
        """ Resolution of the network inputs """
        a, b, c = self.hr_resolution
        f = self.upscale_factor
        return a // f, b // f, c // f

    @property
    def export_factors(self) -> tuple[int, ...]:
        """ Up-scaling factors, relative to LR, at which densities are exported """
        return (1, 2, 4, 8) if self.upscale_factor == 8 else (1, 4)

    def as_dict(self) -> dict[str, Any]:
        """ Plain-typed mapping, suitable for JSON """
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> Self:
        """ Inverse of `as_dict`; ignores keys that are not fields """
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class AugmentConfig:
    """ Physical data augmentation drawn per training brick """
    scale_range: tuple[float, float] = (0.85, 1.15)
    enable_rot90_gravity_axis: bool = True
    enable_flips: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'scale_range', tuple(float(s) for s in self.scale_range))
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValidationError(f'Invalid scale range {self.scale_range}')


@dataclass(frozen=True)
class DatasetConfig:
    """ Shard building: brick and tile sizes, the slice density filter and sampling density """
    lr_tile: int = 16
    brick: int = 20
    density_threshold: float = 0.005
    bricks_per_frame: int = 2
    frame_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr_tile <= 0 or self.brick < self.lr_tile:
            raise ValidationError(f'brick ({self.brick}) must be >= lr_tile ({self.lr_tile}) > 0')
        if self.density_threshold < 0:
            raise ValidationError('density_threshold must be >= 0')
        if self.bricks_per_frame <= 0 or self.frame_stride <= 0:
            raise ValidationError('bricks_per_frame and frame_stride must be positive')


@dataclass(frozen=True)
class InferenceConfig:
    """ Multi-pass inference: time steps for velocity rescaling and tiling """
    dt_train: float = 0.5
    dt_sim: float = 0.5
    overlap_lr: int = 4
    overlap_hr: int = 16
    tile_batch: int = 64

    def __post_init__(self):
        if self.dt_train <= 0 or self.dt_sim <= 0:
            raise ValidationError('Time steps must be positive')
        if self.overlap_lr < 0 or self.overlap_hr < 0 or self.tile_batch <= 0:
            raise ValidationError('Overlaps must be >= 0 and tile_batch positive')


@dataclass(frozen=True)
class BenchConfig:
    """ Benchmark sweep.  `sizes` are LR edge lengths for the inference fit; `table_sizes` are
    the LR edges of the two performance-table rows; `substeps` defaults to the factor. """
    sizes: tuple[int, ...] = (32, 64, 96)
    table_sizes: tuple[int, ...] = (16, 32)
    frames: int = 3
    substeps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, 'sizes', tuple(int(s) for s in self.sizes))
        object.__setattr__(self, 'table_sizes', tuple(int(s) for s in self.table_sizes))
        if not self.sizes or min(self.sizes) <= 0 or min(self.table_sizes, default=1) <= 0:
            raise ValidationError('Benchmark sizes must be positive')
        if self.frames < 1:
            raise ValidationError('frames must be >= 1')
        if self.substeps is not None and self.substeps < 1:
            raise ValidationError('substeps must be >= 1')


@dataclass(frozen=True)
class LossWeights:
    """ Loss-term weights.  Feature weights are one entry per tapped discriminator layer. """
    l1: float = 20.0
    gradient_penalty: float = 10.0
    feature: tuple[float, ...] = ()
    loss_kind: LossKind = LossKind.WGAN_GP

    def __post_init__(self):
        if self.l1 < 0 or self.gradient_penalty < 0 or any(w < 0 for w in self.feature):
            raise ValidationError('Loss weights must be non-negative')
        if self.loss_kind is LossKind.WGAN_GP and self.feature:
            raise ValidationError('The WGAN-GP objective takes no feature-space loss')


@dataclass(frozen=True)
class AdamConfig:
    """ Optimizer hyperparameters shared by every network """
    learning_rate: float = 0.0005
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """ Training schedule and hyperparameters.  `growing` enables the 2x-4x-8x curriculum;
    without it the final stage is trained directly and the learning rate decays from
    iteration zero.
    """
    adam: AdamConfig = field(default_factory=AdamConfig)
    spatial_batch: int = 16
    temporal_batch: int = 15
    blend_iters: int = 120_000
    stabilize_iters: int = 120_000
    decay_iters: int = 160_000
    growth_stages: int = 3
    loss_kind: LossKind = LossKind.WGAN_GP
    growing: bool = True
    desk_scale: bool = False
    checkpoint_every: int = 1000
    seed: int = 0
    max_bad_steps: int = 100

    def __post_init__(self):
        counts = (self.blend_iters, self.stabilize_iters, self.decay_iters,
                  self.spatial_batch, self.temporal_batch, self.checkpoint_every)
        if any(c <= 0 for c in counts):
            raise ValidationError('Iteration counts and batch sizes must be positive')
        if self.adam.learning_rate <= 0:
            raise ValidationError('Learning rate must be positive')

    @classmethod
    def for_pass(cls, pass_index: int, factor: int, **kwargs) -> Self:
        """ Default schedule for a pass/factor pair; growth only for the 8x first pass """
        kwargs.setdefault('decay_iters', 160_000 if pass_index == 1 else 600_000)
        kwargs.setdefault('growing', pass_index == 1 and factor == 8)
        desk = kwargs.pop('desk_scale', False)
        cfg = cls(**kwargs)
        return cfg.to_desk_scale() if desk else cfg

    def to_desk_scale(self) -> Self:
        """ Every iteration count divided by 100 """
        if self.desk_scale:
            return self
        return dataclasses.replace(
            self,
            blend_iters=max(1, self.blend_iters // 100),
            stabilize_iters=max(1, self.stabilize_iters // 100),
            decay_iters=max(1, self.decay_iters // 100),
            checkpoint_every=max(1, self.checkpoint_every // 100),
            desk_scale=True,
        )

    @property
    def growth_iterations(self) -> int:
        """ Iterations spent fading in and stabilising stages before decay starts """
        if not self.growing:
            return 0
        return self.growth_stages * (self.blend_iters + self.stabilize_iters)

    @property
    def total_iterations(self) -> int:
        """ Growth plus decay """
        return self.growth_iterations + self.decay_iters


@dataclass(frozen=True)
class BenchRecord:
    """ Mean wall-clock seconds per frame for one volume size """
    resolution: tuple[int, int, int]
    seconds_per_frame: float
    subsystem: Subsystem
    frames: int
    failed: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'resolution', tuple(int(n) for n in self.resolution))
        if not self.failed and not self.seconds_per_frame > 0:
            raise ValidationError(f'Timing must be positive, got {self.seconds_per_frame}')

    @property
    def voxels(self) -> int:
        """ Cell count of `resolution` """
        return math.prod(self.resolution)


@dataclass
class RunStatus:
    """ Per-stage outcome of one simulation or shard build; truthy when every stage passed """
    compute_ok: bool = True
    write_ok: bool = True
    solver_ok: bool = True

    def __bool__(self):
        return self.compute_ok and self.write_ok and self.solver_ok
