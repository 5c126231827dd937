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
"""Multi-pass volume up-scaling and the single-axis baselines.

Velocity volumes are `[x, y, z, 3]` in LR cells per time unit.  Network inputs order
velocity channels as (first in-plane, second in-plane, normal) for the slice axis.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch

from .exc import ValidationError
from .networks import Generator, cubic_matrix
from .types import Axis, CombineMode, GrowthState, InferenceConfig
from .util import ROOT_LOGGER

logger = logging.getLogger(f'{ROOT_LOGGER}.inference')


def upsample_linear(volume: np.ndarray, factor: int, axis: int) -> np.ndarray:
    """Cell-centred linear interpolation along one axis, clamped at both ends

    Output sample `o` sits at input coordinate `(o + 0.5) / factor - 0.5`.
    """
    if factor < 1:
        raise ValidationError(f'factor must be >= 1, got {factor}')
    vol = np.asarray(volume)
    if factor == 1:
        return vol.copy()
    n = vol.shape[axis]
    pos = np.clip((np.arange(n * factor) + 0.5) / factor - 0.5, 0.0, n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    shape = [1] * vol.ndim
    shape[axis] = -1
    t = (pos - lo).reshape(shape)
    return np.take(vol, lo, axis=axis) * (1.0 - t) + np.take(vol, hi, axis=axis) * t


def upsample_linear_z(volume: np.ndarray, factor: int) -> np.ndarray:
    """ (a, b, c[, C]) to (a, b, factor*c[, C]) """
    return upsample_linear(volume, factor, Axis.Z)


def upsample_trilinear(volume: np.ndarray, factor: int) -> np.ndarray:
    """ Separable linear up-sampling along x, y and z """
    vol = np.asarray(volume)
    for axis in Axis:
        vol = upsample_linear(vol, factor, axis)
    return vol


def bicubic_upsample_plane(volume: np.ndarray, factor: int, axis: Axis) -> np.ndarray:
    """ Catmull-Rom up-sampling of the two in-plane axes of slices normal to `axis` """
    vol = np.asarray(volume, dtype=np.float64)
    for a in axis.in_plane:
        mat = cubic_matrix(vol.shape[a], factor)
        vol = np.moveaxis(np.tensordot(mat, vol, axes=([1], [a])), 0, a)
    return vol


def rescale_velocity(vel: np.ndarray, dt_train: float, dt_sim: float) -> np.ndarray:
    """ Scale velocities of a run with step `dt_sim` to the training step `dt_train` """
    if not dt_train > 0 or not dt_sim > 0:
        raise ValidationError(f'Time steps must be positive, got {dt_train}, {dt_sim}')
    return np.asarray(vel) * (dt_train / dt_sim)


def plane_velocity(vel: np.ndarray, axis: Axis | int) -> np.ndarray:
    """ Reorder the last (x, y, z) velocity dim to (in-plane a, in-plane b, normal) """
    axis = Axis(axis)
    a, b = axis.in_plane
    return np.asarray(vel)[..., [a, b, axis]]


@dataclass(frozen=True)
class Tile:
    """ Core region written by one tile, and the window fed to the network """
    core: tuple[int, int, int, int]
    window: tuple[int, int, int, int]


@dataclass(frozen=True)
class TiledPlan:
    """Partition of an (H, W) slice into `tile`-sized cores read through windows widened by
    `overlap` pixels per side.  Windows share one size: near the far edges they are shifted
    inwards instead of clipped."""
    shape: tuple[int, int]
    tile: int
    overlap: int

    def __post_init__(self):
        if self.tile < 1 or self.overlap < 0 or min(self.shape) < 1:
            raise ValidationError(f'Invalid plan: shape {self.shape}, tile {self.tile}, '
                                  f'overlap {self.overlap}')

    @property
    def window_shape(self) -> tuple[int, int]:
        """ Window side per dim """
        return tuple(min(n, self.tile + 2 * self.overlap) for n in self.shape)  # type: ignore

    def origins(self, dim: int) -> list[int]:
        """ Core starts along one dim """
        return list(range(0, self.shape[dim], self.tile))

    def _span(self, dim: int, start: int) -> tuple[int, int, int, int]:
        n = self.shape[dim]
        end = min(start + self.tile, n)
        side = self.window_shape[dim]
        w0 = min(max(start - self.overlap, 0), n - side)
        return start, end, w0, w0 + side

    def tiles(self) -> Iterator[Tile]:
        """ Row-major tiles """
        for y in self.origins(0):
            y0, y1, wy0, wy1 = self._span(0, y)
            for x in self.origins(1):
                x0, x1, wx0, wx1 = self._span(1, x)
                yield Tile((y0, y1, x0, x1), (wy0, wy1, wx0, wx1))


def make_plan(shape: Sequence[int], generator: Generator, overlap: int | None = None,
              tile: int | None = None) -> TiledPlan:
    """Tile plan for one generator; `overlap` defaults to the network's receptive radius

    The published overlaps (4 LR cells for the first pass, 16 HR cells for the second) are
    widened when the analytic radius of the network is larger.
    """
    spec = generator.spec
    radius = math.ceil(spec.receptive_field().input_radius)
    if overlap is None:
        overlap = radius
    else:
        overlap = max(overlap, radius)
    return TiledPlan(tuple(shape), tile or spec.input_size, overlap)  # type: ignore[arg-type]


def _param_dtype(generator: Generator) -> torch.dtype:
    return next(generator.parameters()).dtype


def tiled_forward(generator: Generator, slices: np.ndarray, plan: TiledPlan,
                  batch: int = 64, growth: GrowthState | None = None) -> np.ndarray:
    """Evaluate `generator` tile by tile over (N, C, H, W) `slices`, writing each tile's core

    Returns:
        (N, s*H, s*W) with `s` the generator's up-scaling factor
    """
    n, _, h, w = slices.shape
    if (h, w) != tuple(plan.shape):
        raise ValidationError(f'Plan for {plan.shape} applied to slices of {(h, w)}')
    scale = generator.spec.upscale_at(growth.stage if growth else generator.spec.max_stage)
    dtype = _param_dtype(generator)
    out = np.zeros((n, h * scale, w * scale), dtype=np.float64)
    work = [(i, t) for i in range(n) for t in plan.tiles()]
    with torch.no_grad():
        for start in range(0, len(work), batch):
            chunk = work[start:start + batch]
            windows = np.stack([slices[i, :, t.window[0]:t.window[1], t.window[2]:t.window[3]]
                                for i, t in chunk])
            result = generator(torch.as_tensor(windows, dtype=dtype), growth)[:, 0]
            result = result.cpu().numpy()
            for (i, t), r in zip(chunk, result):
                y0, y1, x0, x1 = t.core
                oy, ox = (y0 - t.window[0]) * scale, (x0 - t.window[2]) * scale
                out[i, y0 * scale:y1 * scale, x0 * scale:x1 * scale] = \
                    r[oy:oy + (y1 - y0) * scale, ox:ox + (x1 - x0) * scale]
    return out


def untiled_forward(generator: Generator, slices: np.ndarray,
                    growth: GrowthState | None = None) -> np.ndarray:
    """ Whole-slice evaluation, the reference for tiled inference """
    with torch.no_grad():
        result = generator(torch.as_tensor(slices, dtype=_param_dtype(generator)), growth)
    return result[:, 0].cpu().numpy().astype(np.float64)


def apply_pass(volume: np.ndarray, generator: Generator, axis: Axis | int,
               plan: TiledPlan | None = None, *, tile_batch: int = 64) -> np.ndarray:
    """Run `generator` on every slice of a `[x, y, z, C]` volume normal to `axis`

    Returns:
        `[x, y, z]` volume with both in-plane dims scaled by the generator's factor

    Raises:
        ValidationError: on a channel mismatch or a plan overlap below the receptive radius
    """
    axis = Axis(axis)
    vol = np.asarray(volume)
    if vol.ndim != 4 or vol.shape[-1] != generator.spec.in_channels:
        raise ValidationError(f'{generator.spec.name} expects {generator.spec.in_channels} '
                              f'channels, got volume of shape {vol.shape}')
    slices = np.moveaxis(vol, axis, 0).transpose(0, 3, 1, 2)
    if plan is None:
        plan = make_plan(slices.shape[2:], generator)
    radius = generator.spec.receptive_field().input_radius
    if plan.overlap < math.ceil(radius) and any(n > plan.tile for n in plan.shape):
        raise ValidationError(f'Tile overlap {plan.overlap} is below the receptive radius '
                              f'{radius:g} of {generator.spec.name}')
    out = tiled_forward(generator, np.ascontiguousarray(slices), plan, tile_batch)
    return np.moveaxis(out, 0, axis)


class FirstPass(NamedTuple):
    """ First-pass output and the interpolated fields the second pass consumes """
    output: np.ndarray
    base_density: np.ndarray
    base_velocity: np.ndarray


def _check_factor(generator: Generator, factor: int, pass_index: int) -> None:
    expected = factor if pass_index == 1 else 1
    actual = generator.spec.upscale_at(generator.spec.max_stage)
    if actual != expected:
        raise ValidationError(f'Pass-{pass_index} generator {generator.spec.name} up-scales '
                              f'{actual}x, factor {factor} needs {expected}x')


def first_pass_volume(lr_density: np.ndarray, lr_velocity: np.ndarray, g1: Generator,
                      factor: int, *, overlap: int | None = None,
                      tile_batch: int = 64) -> FirstPass:
    """ Interpolate along z, run `g1` on every XY slice and build the interpolated base
    fields at output resolution """
    _check_factor(g1, factor, 1)
    dz = upsample_linear_z(lr_density, factor)
    vz = upsample_linear_z(lr_velocity, factor)
    net_in = np.concatenate([dz[..., np.newaxis], plane_velocity(vz, Axis.Z)], axis=-1)
    plan = make_plan(net_in.shape[:2], g1, overlap)
    output = apply_pass(net_in, g1, Axis.Z, plan, tile_batch=tile_batch)
    return FirstPass(output, bicubic_upsample_plane(dz, factor, Axis.Z),
                     bicubic_upsample_plane(vz, factor, Axis.Z))


def second_pass_input(first: FirstPass) -> np.ndarray:
    """ Five-channel `[x, y, z, 5]` volume: base density, base velocity (YZ plane order) and
    the first-pass output """
    return np.concatenate([first.base_density[..., np.newaxis],
                           plane_velocity(first.base_velocity, Axis.X),
                           first.output[..., np.newaxis]], axis=-1)


def multipass_upscale(lr_density: np.ndarray, lr_velocity: np.ndarray, g1: Generator,
                      g2: Generator, factor: int,
                      config: InferenceConfig | None = None) -> np.ndarray:
    """Up-scale a volume by `factor` in every dimension

    Linear interpolation along z, `g1` over XY slices, then `g2` over YZ slices of the
    result.  Velocities are rescaled from `config.dt_sim` to `config.dt_train` first.

    Returns:
        non-negative float32 `[f*a, f*b, f*c]` density

    Raises:
        ValidationError: on shape or factor mismatches
    """
    config = config or InferenceConfig()
    lr_density = np.asarray(lr_density)
    if lr_density.ndim != 3 or np.shape(lr_velocity) != (*lr_density.shape, 3):
        raise ValidationError(f'Density {lr_density.shape} and velocity '
                              f'{np.shape(lr_velocity)} do not form an LR pair')
    _check_factor(g2, factor, 2)
    started = time.perf_counter()
    vel = rescale_velocity(lr_velocity, config.dt_train, config.dt_sim)
    first = first_pass_volume(lr_density, vel, g1, factor, overlap=config.overlap_lr,
                              tile_batch=config.tile_batch)
    logger.debug(f'first pass done in {time.perf_counter() - started:.2f}s')
    net_in = second_pass_input(first)
    plan = make_plan(net_in.shape[1:3], g2, config.overlap_hr)
    out = apply_pass(net_in, g2, Axis.X, plan, tile_batch=config.tile_batch)
    logger.debug(f'multi-pass up-scaling of {lr_density.shape} done in '
                 f'{time.perf_counter() - started:.2f}s')
    return np.maximum(out, 0.0).astype(np.float32)


def single_axis_upscale(lr_density: np.ndarray, lr_velocity: np.ndarray, g1: Generator,
                        factor: int, axis: Axis | int, *,
                        config: InferenceConfig | None = None) -> np.ndarray:
    """ Interpolate along `axis`, then run `g1` on every slice normal to it """
    config = config or InferenceConfig()
    axis = Axis(axis)
    _check_factor(g1, factor, 1)
    vel = rescale_velocity(lr_velocity, config.dt_train, config.dt_sim)
    d = upsample_linear(lr_density, factor, axis)
    v = upsample_linear(vel, factor, axis)
    net_in = np.concatenate([d[..., np.newaxis], plane_velocity(v, axis)], axis=-1)
    plane_shape = [net_in.shape[a] for a in axis.in_plane]
    plan = make_plan(plane_shape, g1, config.overlap_lr)
    out = apply_pass(net_in, g1, axis, plan, tile_batch=config.tile_batch)
    return np.maximum(out, 0.0).astype(np.float32)


def combine_axes(volumes: Sequence[np.ndarray], mode: CombineMode | str,
                 base_axis: Axis | int = Axis.Z, upsampled: np.ndarray | None = None) -> np.ndarray:
    """Merge single-axis outputs `volumes[axis]`

    AVG and MAX are per-cell; RES adds the other axes' residuals against `upsampled` (the
    linearly up-sampled input) to the `base_axis` volume; CRES clamps those residuals at 0.

    Raises:
        ValidationError: on dim mismatches or a missing `upsampled` volume
    """
    mode = CombineMode(mode)
    vols = [np.asarray(v, dtype=np.float64) for v in volumes]
    if len(vols) != 3 or any(v.shape != vols[0].shape for v in vols):
        raise ValidationError(f'Need three volumes of equal dims, got '
                              f'{[v.shape for v in vols]}')
    match mode:
        case CombineMode.AVG:
            return np.mean(vols, axis=0)
        case CombineMode.MAX:
            return np.max(vols, axis=0)
    if upsampled is None or np.shape(upsampled) != vols[0].shape:
        raise ValidationError(f'{mode.value} needs the up-sampled input with dims '
                              f'{vols[0].shape}')
    base = Axis(base_axis)
    out = vols[base].copy()
    for axis in Axis:
        if axis is base:
            continue
        residual = vols[axis] - upsampled
        out += np.maximum(residual, 0.0) if mode is CombineMode.CRES else residual
    return out
