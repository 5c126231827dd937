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
"""Eulerian smoke solver on a MAC grid and the paired multi-resolution data generator.

Positions are expressed in cell-centre index space: density sample `[i, j, k]` sits at
`(i, j, k)`, the x-velocity face `u[i, j, k]` at `(i - 0.5, j, k)` and so on.  Velocities are
in cells per time unit.
"""
import asyncio
import dataclasses
import functools
import itertools
import logging
import pathlib
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import scipy.ndimage
import scipy.sparse
import scipy.sparse.linalg

from .exc import NumericalError, ValidationError, VolumeIOError
from .types import RunStatus, SimConfig, SourceSpec
from .util import LoggingMixin, ROOT_LOGGER, StagingDirectory
from .volio import async_write_fvol, async_write_sidecar, sidecar_path

logger = logging.getLogger(f'{ROOT_LOGGER}.solver')

type Dims = tuple[int, int, int]

_DENSITY_OFFSET = (0.0, 0.0, 0.0)
_FACE_OFFSETS = ((-0.5, 0.0, 0.0), (0.0, -0.5, 0.0), (0.0, 0.0, -0.5))


@dataclass(frozen=True)
class ScalarField:
    """ Cell-centred density indexed `[x, y, z]` """
    data: np.ndarray

    def __post_init__(self):
        if np.ndim(self.data) != 3:
            raise ValidationError(f'ScalarField needs a 3D array, got shape {np.shape(self.data)}')

    @property
    def dims(self) -> Dims:
        """ (nx, ny, nz) """
        return tuple(self.data.shape)  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims: Dims) -> 'ScalarField':
        """ Empty domain """
        return cls(np.zeros(dims))


@dataclass(frozen=True)
class StaggeredVelocityField:
    """ MAC velocity: `u` on x-faces (nx+1, ny, nz), `v` on y-faces, `w` on z-faces """
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.dims
        expected = ((nx + 1, ny, nz), (nx, ny + 1, nz), (nx, ny, nz + 1))
        for name, comp, shape in zip('uvw', self.components, expected):
            if comp.shape != shape:
                raise ValidationError(f'Velocity component {name} has shape {comp.shape}, '
                                      f'expected {shape}')

    @property
    def dims(self) -> Dims:
        """ Cell counts (nx, ny, nz) """
        return self.u.shape[0] - 1, self.u.shape[1], self.u.shape[2]

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """ (u, v, w) """
        return self.u, self.v, self.w

    @classmethod
    def zeros(cls, dims: Dims) -> 'StaggeredVelocityField':
        """ Fluid at rest """
        return cls.uniform(dims, (0.0, 0.0, 0.0))

    @classmethod
    def uniform(cls, dims: Dims, vector: Sequence[float]) -> 'StaggeredVelocityField':
        """ Every face of axis `a` carries `vector[a]` """
        nx, ny, nz = dims
        return cls(np.full((nx + 1, ny, nz), float(vector[0])),
                   np.full((nx, ny + 1, nz), float(vector[1])),
                   np.full((nx, ny, nz + 1), float(vector[2])))

    def max_abs(self) -> float:
        """ Largest face speed """
        return max(float(np.abs(c).max()) for c in self.components)

    def is_finite(self) -> bool:
        """ No NaN or inf on any face """
        return all(bool(np.isfinite(c).all()) for c in self.components)

    def divergence(self) -> np.ndarray:
        """ Net outflow per cell (unit spacing) """
        return np.diff(self.u, axis=0) + np.diff(self.v, axis=1) + np.diff(self.w, axis=2)

    def with_closed_walls(self) -> 'StaggeredVelocityField':
        """ Copy with the normal component zeroed on every domain wall """
        u, v, w = (c.copy() for c in self.components)
        u[0], u[-1] = 0.0, 0.0
        v[:, 0], v[:, -1] = 0.0, 0.0
        w[:, :, 0], w[:, :, -1] = 0.0, 0.0
        return StaggeredVelocityField(u, v, w)

    def centered(self) -> np.ndarray:
        """ Face averages at cell centres, shape (nx, ny, nz, 3) """
        return np.stack([0.5 * (self.u[:-1] + self.u[1:]),
                         0.5 * (self.v[:, :-1] + self.v[:, 1:]),
                         0.5 * (self.w[:, :, :-1] + self.w[:, :, 1:])], axis=-1)


class Projection(NamedTuple):
    """ Result of `project_cg` """
    velocity: StaggeredVelocityField
    residual: float
    iterations: int
    pressure: np.ndarray
    converged: bool


class StepResult(NamedTuple):
    """ Result of `sim_step` """
    density: ScalarField
    velocity: StaggeredVelocityField
    projection: Projection


@functools.lru_cache(maxsize=16)
def _grid_positions(shape: tuple[int, ...], offset: tuple[float, float, float]) -> np.ndarray:
    pos = np.indices(shape, dtype=np.float64)
    for a in range(3):
        pos[a] += offset[a]
    pos.flags.writeable = False
    return pos


def _sample(arr: np.ndarray, offset: tuple[float, float, float], pos: np.ndarray) -> np.ndarray:
    coords = np.stack([pos[a] - offset[a] for a in range(3)])
    return scipy.ndimage.map_coordinates(arr, coords, order=1, mode='nearest')


def _velocity_at(vel: StaggeredVelocityField, pos: np.ndarray) -> np.ndarray:
    return np.stack([_sample(c, off, pos) for c, off in zip(vel.components, _FACE_OFFSETS)])


def _backtrace(shape: tuple[int, ...], offset: tuple[float, float, float],
               vel: StaggeredVelocityField, dt: float) -> np.ndarray:
    pos = _grid_positions(shape, offset)
    return pos - dt * _velocity_at(vel, pos)


def _advect_sl(arr: np.ndarray, offset: tuple[float, float, float],
               vel: StaggeredVelocityField, dt: float) -> np.ndarray:
    return _sample(arr, offset, _backtrace(arr.shape, offset, vel, dt))


def _neighbour_extrema(arr: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    corners = []
    for a, n in enumerate(arr.shape):
        c = np.clip(coords[a], 0, n - 1)
        lo = np.floor(c).astype(np.intp)
        corners.append((lo, np.minimum(lo + 1, n - 1)))
    values = [arr[ix, iy, iz] for ix, iy, iz in itertools.product(*corners)]
    return np.minimum.reduce(values), np.maximum.reduce(values)


def _advect_mc(arr: np.ndarray, offset: tuple[float, float, float],
               vel: StaggeredVelocityField, dt: float) -> np.ndarray:
    trace = _backtrace(arr.shape, offset, vel, dt)
    forward = _sample(arr, offset, trace)
    backward = _advect_sl(forward, offset, vel, -dt)
    corrected = forward + 0.5 * (arr - backward)
    lo, hi = _neighbour_extrema(arr, np.stack([trace[a] - offset[a] for a in range(3)]))
    return np.clip(corrected, lo, hi)


def _check_advection(field: ScalarField | StaggeredVelocityField,
                     vel: StaggeredVelocityField, dt: float) -> None:
    if field.dims != vel.dims:
        raise ValidationError(f'Field grid {field.dims} does not match velocity grid {vel.dims}')
    if not dt > 0:
        raise ValidationError(f'dt must be positive, got {dt}')


def _advect(field, vel, dt, kernel):
    _check_advection(field, vel, dt)
    if isinstance(field, ScalarField):
        return ScalarField(kernel(field.data, _DENSITY_OFFSET, vel, dt))
    return StaggeredVelocityField(*(kernel(c, off, vel, dt)
                                    for c, off in zip(field.components, _FACE_OFFSETS)))


def advect_semi_lagrangian[F: (ScalarField, StaggeredVelocityField)](
        field: F, vel: StaggeredVelocityField, dt: float) -> F:
    """Backtrace every sample by `dt * vel` and interpolate trilinearly; positions outside the
    domain take boundary values

    Raises:
        ValidationError: on a grid mismatch or non-positive `dt`
    """
    return _advect(field, vel, dt, _advect_sl)


def advect_maccormack[F: (ScalarField, StaggeredVelocityField)](
        field: F, vel: StaggeredVelocityField, dt: float) -> F:
    """Forward step plus half the round-trip error, clamped per sample to the extrema of the
    eight cells the forward trace interpolated from

    Raises:
        ValidationError: on a grid mismatch or non-positive `dt`
    """
    return _advect(field, vel, dt, _advect_mc)


def add_buoyancy(vel: StaggeredVelocityField, density: ScalarField,
                 force: Sequence[float], dt: float) -> StaggeredVelocityField:
    """ Increment each face by `dt * force[axis] * density averaged to the face` """
    if density.dims != vel.dims:
        raise ValidationError(f'Density grid {density.dims} does not match velocity grid '
                              f'{vel.dims}')
    comps = list(vel.components)
    for axis in range(3):
        if force[axis] == 0:
            continue
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        padded = np.pad(density.data, pad, mode='edge')
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        face = 0.5 * (padded[tuple(lo)] + padded[tuple(hi)])
        comps[axis] = comps[axis] + dt * float(force[axis]) * face
    return StaggeredVelocityField(*comps)


def _laplacian_1d(n: int) -> scipy.sparse.csr_matrix:
    if n == 1:
        return scipy.sparse.csr_matrix((1, 1))
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return scipy.sparse.diags([off, main, off], [-1, 0, 1], format='csr')


@functools.lru_cache(maxsize=8)
def _neumann_laplacian(dims: Dims) -> scipy.sparse.csr_matrix:
    """ Positive semi-definite 7-point operator with closed walls, C-order unknowns """
    nx, ny, nz = dims
    ix, iy, iz = (scipy.sparse.identity(n, format='csr') for n in dims)
    lap = (scipy.sparse.kron(_laplacian_1d(nx), scipy.sparse.kron(iy, iz))
           + scipy.sparse.kron(ix, scipy.sparse.kron(_laplacian_1d(ny), iz))
           + scipy.sparse.kron(ix, scipy.sparse.kron(iy, _laplacian_1d(nz))))
    return lap.tocsr()


def project_cg(vel: StaggeredVelocityField, tolerance: float,
               max_iter: int) -> Projection:
    """Remove divergence from `vel` inside a closed box

    Solves the pressure Poisson system with Jacobi-preconditioned conjugate gradients and
    subtracts the pressure gradient from interior faces.  The solve stops once the divergence
    left over is below `min(tolerance, 1e-4 * max|vel|)`.  A solve that runs out of iterations
    returns its last iterate with `converged=False`.

    Raises:
        NumericalError: if `vel` holds NaN or inf
        ValidationError: if `tolerance` is not positive
    """
    if not tolerance > 0:
        raise ValidationError(f'tolerance must be positive, got {tolerance}')
    if not vel.is_finite():
        raise NumericalError('Velocity field holds non-finite values; refusing to project')

    dims = vel.dims
    closed = vel.with_closed_walls()
    vmax = vel.max_abs()
    if vmax == 0.0:
        return Projection(closed, 0.0, 0, np.zeros(dims), True)

    rhs = -closed.divergence().ravel()
    rhs -= rhs.mean()
    threshold = min(tolerance, 1e-4 * vmax)

    lap = _neumann_laplacian(dims)
    diag = lap.diagonal()
    inv_diag = np.divide(1.0, diag, out=np.zeros_like(diag), where=diag > 0)
    precond = scipy.sparse.linalg.LinearOperator(lap.shape, matvec=lambda r: inv_diag * r,
                                                 dtype=np.float64)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    if np.abs(rhs).max() <= threshold:
        pressure = np.zeros(dims)
        info = 0
    else:
        solution, info = scipy.sparse.linalg.cg(lap, rhs, rtol=0.0, atol=threshold,
                                                maxiter=max_iter, M=precond, callback=count)
        pressure = solution.reshape(dims)
        pressure -= pressure.mean()

    u, v, w = (c.copy() for c in closed.components)
    u[1:-1] -= np.diff(pressure, axis=0)
    v[:, 1:-1] -= np.diff(pressure, axis=1)
    w[:, :, 1:-1] -= np.diff(pressure, axis=2)
    projected = StaggeredVelocityField(u, v, w)
    residual = float(np.abs(projected.divergence()).max())
    converged = info == 0
    if not converged:
        logger.warning(f'Pressure solve stopped after {iterations} iterations with residual '
                       f'{residual:.3e} (target {threshold:.3e})')
    return Projection(projected, residual, iterations, pressure, converged)


def _sphere_mask(shape: tuple[int, ...], offset: tuple[float, float, float],
                 source: SourceSpec) -> np.ndarray:
    pos = _grid_positions(shape, offset)
    dist2 = sum((pos[a] - source.center[a]) ** 2 for a in range(3))
    return dist2 <= source.radius ** 2


def apply_sources(density: ScalarField, vel: StaggeredVelocityField,
                  sources: Sequence[SourceSpec]) -> tuple[ScalarField, StaggeredVelocityField]:
    """ Add each source's density rate inside its sphere and pin the sphere's faces to its
    inflow velocity """
    d = density.data.copy()
    comps = [c.copy() for c in vel.components]
    for src in sources:
        d[_sphere_mask(d.shape, _DENSITY_OFFSET, src)] += src.density_rate
        for axis, (comp, off) in enumerate(zip(comps, _FACE_OFFSETS)):
            comp[_sphere_mask(comp.shape, off, src)] = src.inflow_velocity[axis]
    return ScalarField(d), StaggeredVelocityField(*comps)


def buoyancy_in_cells(config: SimConfig) -> tuple[float, float, float]:
    """ Domain-unit buoyancy scaled to cells (one domain length spans the largest grid side) """
    if config.buoyancy is None:
        raise ValidationError('SimConfig buoyancy is unresolved; call sample_scene first')
    scale = max(config.hr_resolution)
    return tuple(b * scale for b in config.buoyancy)  # type: ignore[return-value]


def sim_step(density: ScalarField, vel: StaggeredVelocityField,
             sources: Sequence[SourceSpec], config: SimConfig) -> StepResult:
    """ Advance one frame: sources, buoyancy, velocity advection, projection, density
    advection; density is clamped at zero """
    density, vel = apply_sources(density, vel, sources)
    vel = add_buoyancy(vel, density, buoyancy_in_cells(config), config.dt)
    vel = advect_maccormack(vel, vel, config.dt)
    projection = project_cg(vel, config.cg_tolerance, config.cg_max_iter)
    vel = projection.velocity
    density = advect_maccormack(density, vel, config.dt)
    return StepResult(ScalarField(np.maximum(density.data, 0.0)), vel, projection)


def sample_scene(config: SimConfig) -> tuple[SimConfig, list[SourceSpec]]:
    """Draw inflow count, buoyancy and source spheres from the config's seed

    Returns:
        config with `inflow_count` and `buoyancy` filled in, and the sources
    """
    rng = np.random.default_rng(config.seed)
    count = config.inflow_count if config.inflow_count is not None else int(rng.integers(3, 13))
    buoyancy = config.buoyancy if config.buoyancy is not None \
        else (0.0, float(rng.uniform(0.0, 3e-4)), 0.0)
    dims = config.hr_resolution
    side = min(dims)
    speed = side / 64.0
    sources = []
    for _ in range(count):
        radius = max(1.0, float(rng.uniform(0.04, 0.08)) * side)
        center = (float(rng.uniform(radius, dims[0] - 1 - radius)),
                  float(rng.uniform(radius, max(radius, 0.5 * dims[1]))),
                  float(rng.uniform(radius, dims[2] - 1 - radius)))
        inflow = (float(rng.uniform(-0.25, 0.25)) * speed,
                  float(rng.uniform(0.0, 0.5)) * speed,
                  float(rng.uniform(-0.25, 0.25)) * speed)
        src = SourceSpec(center, radius, float(rng.uniform(0.2, 0.6)), inflow)
        src.check_inside(dims)
        sources.append(src)
    resolved = dataclasses.replace(config, inflow_count=count, buoyancy=buoyancy)
    return resolved, sources


def simulate(config: SimConfig,
             sources: Sequence[SourceSpec] | None = None) -> Iterator[StepResult]:
    """ Yields one `StepResult` per frame, starting from an empty domain """
    if sources is None:
        config, sources = sample_scene(config)
    density = ScalarField.zeros(config.hr_resolution)
    vel = StaggeredVelocityField.zeros(config.hr_resolution)
    for _ in range(config.frames):
        result = sim_step(density, vel, sources, config)
        density, vel = result.density, result.velocity
        yield result


def downsample_box(volume: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping `factor`^3 blocks of a `[x, y, z]` or `[x, y, z, c]` volume

    Raises:
        ValidationError: if a spatial dimension is not divisible by `factor`
    """
    vol = np.asarray(volume)
    if factor < 1:
        raise ValidationError(f'factor must be >= 1, got {factor}')
    if any(n % factor for n in vol.shape[:3]):
        raise ValidationError(f'Volume dims {vol.shape[:3]} not divisible by {factor}')
    if factor == 1:
        return vol.copy()
    nx, ny, nz = (n // factor for n in vol.shape[:3])
    blocks = vol.reshape(nx, factor, ny, factor, nz, factor, *vol.shape[3:])
    return blocks.mean(axis=(1, 3, 5))


def downsample_velocity(velocity: np.ndarray, factor: int) -> np.ndarray:
    """ Box-average cell-centred velocity and convert it to coarse-cell units """
    return downsample_box(velocity, factor) / factor


def frame_name(kind: str, frame: int) -> str:
    """ File name of one exported frame """
    return f'{kind}_{frame:04d}.fvol'


class SimulationRunner(LoggingMixin):
    """ Runs one simulation and exports its frames at every resolution the factor needs.

    Layout: `<out>/<name>/x{j}/density_NNNN.fvol` for each export factor `j` relative to LR,
    `velocity_NNNN.fvol` under `x1` (LR cell units) and `x{f}` (HR cell units), and
    `<out>/<name>/<name>.meta.json`.  Output is staged and moved into place when complete.
    """

    def __init__(self, config: SimConfig, out_dir: pathlib.Path, name: str | None = None):
        self.config = config
        self.out_dir = pathlib.Path(out_dir)
        self.name = name or f'sim_{config.seed:04d}'
        self.status = RunStatus()
        self.frame_files: list[pathlib.Path] = []
        self._setup_logger(f'{ROOT_LOGGER}.sim', self.name)

    async def _write_frame(self, stage: pathlib.Path, index: int, result: StepResult) -> None:
        f = self.config.upscale_factor
        hr = result.density.data.astype(np.float32)
        vel = result.velocity.centered().astype(np.float32)
        for j in self.config.export_factors:
            level = stage / f'x{j}'
            await async_write_fvol(level / frame_name('density', index),
                                   hr if j == f else downsample_box(hr, f // j))
        await async_write_fvol(stage / f'x{f}' / frame_name('velocity', index), vel)
        await async_write_fvol(stage / 'x1' / frame_name('velocity', index),
                               downsample_velocity(vel, f))
        self.frame_files.append(self.out_dir / self.name / f'x{f}' / frame_name('density', index))

    async def run(self) -> list[pathlib.Path]:
        """Simulate and export every frame

        Returns:
            HR density files in frame order

        Raises:
            VolumeIOError: on write failures, naming the path
        """
        config, sources = sample_scene(self.config)
        self.log(f'{config.inflow_count} inflows, buoyancy {config.buoyancy}, '
                 f'{config.frames} frames at {config.hr_resolution}', 'info')
        self.frame_files = []
        try:
            async with StagingDirectory(self.out_dir, prefix=f'.{self.name}_') as stage:
                for j in config.export_factors:
                    (stage.path / f'x{j}').mkdir(parents=True, exist_ok=True)
                frames = simulate(config, sources)
                for index in range(config.frames):
                    result = await asyncio.to_thread(next, frames)
                    if not result.projection.converged:
                        self.status.solver_ok = False
                    await self._write_frame(stage.path, index, result)
                    self.log(f'frame {index} written (cg iterations '
                             f'{result.projection.iterations})', 'debug')
                meta = {
                    'name': self.name,
                    'config': config.as_dict(),
                    'sources': [dataclasses.asdict(s) for s in sources],
                    'velocity_units': {'x1': 'lr cells per time unit',
                                       f'x{config.upscale_factor}': 'hr cells per time unit'},
                }
                await async_write_sidecar(sidecar_path(stage.path, self.name), meta)
                await stage.publish(self.out_dir / self.name)
        except VolumeIOError:
            self.status.write_ok = False
            raise
        except OSError as e:
            self.status.write_ok = False
            raise VolumeIOError(f'Could not stage simulation under {self.out_dir}: {e}') from e
        return self.frame_files


async def run_simulation(config: SimConfig, out_dir: pathlib.Path,
                         name: str | None = None) -> list[pathlib.Path]:
    """ Simulate `config` into `<out_dir>/<name>`; returns the HR density frame files """
    return await SimulationRunner(config, out_dir, name).run()
