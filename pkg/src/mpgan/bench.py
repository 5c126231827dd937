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
"""Wall-clock benchmarks of multi-pass inference and of the reference solver.

Every measurement runs one untimed warm-up frame first; reported times are means over the
timed frames.  Sizes are LR edge lengths; records carry the output (HR) resolution.
"""
import csv
import math
import pathlib
import time
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.stats
import torch

from .exc import ValidationError, VolumeIOError
from .inference import multipass_upscale
from .networks import Generator
from .solver import ScalarField, StaggeredVelocityField, sim_step
from .types import BenchConfig, BenchRecord, InferenceConfig, SimConfig, SourceSpec, Subsystem
from .util import LoggingMixin, ROOT_LOGGER, atomic_write_bytes, render_template

CSV_COLUMNS = ('subsystem', 'nx', 'ny', 'nz', 'voxels', 'seconds_per_frame', 'frames', 'failed')

# published timings per output frame, for context only
REFERENCE_TIMINGS = (
    {'resolution': '256^3', 'solver': 116.90, 'multipass': 10.14},
    {'resolution': '512^3', 'solver': 1376.54, 'multipass': 59.65},
)

TABLE_TEMPLATE = """\
## Performance (seconds per output frame)

| Output | Regular solver ({{ substeps }} substeps) | Multi-pass GAN | Speed-up |
|--------|------------------------------------------|----------------|----------|
{% for row in rows %}
| {{ row.resolution }} | {{ row.solver }} | {{ row.multipass }} | {{ row.speedup }} |
{% endfor %}

Scaling with the voxel count: solver exponent {{ '%.3f'|format(solver_exponent) }}, \
multi-pass exponent {{ '%.3f'|format(multipass_exponent) }}; \
linear fit of the multi-pass time R^2 = {{ '%.4f'|format(r_squared) }}.

Published reference numbers (different hardware, not comparable):

| Output | Regular solver | Multi-pass GAN |
|--------|----------------|----------------|
{% for row in reference %}
| {{ row.resolution }} | {{ '%.2f'|format(row.solver) }} | {{ '%.2f'|format(row.multipass) }} |
{% endfor %}
"""


class LinearFit(NamedTuple):
    """ Least-squares line through (voxels, seconds) """
    slope: float
    intercept: float
    r_squared: float


def _cell(record: BenchRecord | None) -> str:
    return 'failed' if record is None or record.failed else f'{record.seconds_per_frame:.3f}'


def _ok(records: Sequence[BenchRecord]) -> list[BenchRecord]:
    return [r for r in records if not r.failed]


def linear_fit(records: Sequence[BenchRecord]) -> LinearFit:
    """Seconds per frame against voxel count over the successful records

    Raises:
        ValidationError: with fewer than two distinct sizes
    """
    ok = _ok(records)
    if len({r.voxels for r in ok}) < 2:
        raise ValidationError('A fit needs at least two distinct successful sizes')
    res = scipy.stats.linregress([r.voxels for r in ok], [r.seconds_per_frame for r in ok])
    return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2))


def loglog_exponent(records: Sequence[BenchRecord]) -> float:
    """ Slope of log(seconds) against log(voxels); 1 means linear scaling """
    ok = _ok(records)
    if len({r.voxels for r in ok}) < 2:
        raise ValidationError('An exponent needs at least two distinct successful sizes')
    res = scipy.stats.linregress(np.log([r.voxels for r in ok]),
                                 np.log([r.seconds_per_frame for r in ok]))
    return float(res.slope)


def time_frames(run: Callable[[int], object], frames: int) -> float:
    """ Mean seconds of `run(frame)` over `frames` calls, after one untimed warm-up call """
    run(-1)
    started = time.perf_counter()
    for frame in range(frames):
        run(frame)
    return (time.perf_counter() - started) / frames


def smoke_volume(edge: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """ Random LR density in [0, 1) and velocity in [-1, 1) for timing runs """
    rng = np.random.default_rng(seed)
    dims = (edge, edge, edge)
    return (rng.random(dims, dtype=np.float32),
            rng.uniform(-1.0, 1.0, size=(*dims, 3)).astype(np.float32))


class Benchmark(LoggingMixin):
    """Serial timing sweeps

    Args:
        config: sizes, frame counts and solver substeps
        factor: up-scaling factor; also the default solver substep count
        g1, g2: first- and second-pass generators; timing does not depend on their weights
        inference: tiling settings used for the multi-pass runs
    """

    # pylint: disable-next=too-many-arguments
    def __init__(self, config: BenchConfig, factor: int, g1: Generator, g2: Generator,
                 inference: InferenceConfig | None = None):
        self._setup_logger(f'{ROOT_LOGGER}.bench')
        self.config = config
        self.factor = factor
        self.g1 = g1.eval()
        self.g2 = g2.eval()
        self.inference = inference or InferenceConfig()

    @property
    def substeps(self) -> int:
        """ Solver steps per output frame """
        return self.config.substeps or self.factor

    def _measure(self, subsystem: Subsystem, edge: int, run: Callable[[int], object],
                 frames: int) -> BenchRecord:
        hr = (edge * self.factor,) * 3
        try:
            seconds = time_frames(run, frames)
        except (MemoryError, RuntimeError) as e:
            if not isinstance(e, MemoryError) and 'memory' not in str(e).lower():
                raise
            self.log(f'{subsystem.value} at {hr}: out of memory ({e}); recording a failure',
                     'warning')
            return BenchRecord(hr, math.nan, subsystem, frames, failed=True)
        self.log(f'{subsystem.value} at {hr}: {seconds:.4f} s/frame', 'info')
        return BenchRecord(hr, seconds, subsystem, frames)

    def bench_inference(self, sizes: Sequence[int] | None = None,
                        frames: int | None = None) -> list[BenchRecord]:
        """ Multi-pass inference time per frame for LR volumes of edge `sizes` """
        frames = frames or self.config.frames
        records = []
        for edge in sizes or self.config.sizes:
            density, velocity = smoke_volume(edge)

            def run(_frame: int, d=density, v=velocity) -> object:
                with torch.no_grad():
                    return multipass_upscale(d, v, self.g1, self.g2, self.factor, self.inference)

            records.append(self._measure(Subsystem.MULTIPASS, edge, run, frames))
        return records

    def bench_solver(self, sizes: Sequence[int] | None = None,
                     frames: int | None = None) -> list[BenchRecord]:
        """ HR solver time per output frame: `substeps` steps at `dt / substeps` each """
        frames = frames or self.config.frames
        records = []
        for edge in sizes or self.config.table_sizes:
            n = edge * self.factor
            config = SimConfig(hr_resolution=(n, n, n), upscale_factor=self.factor,
                               dt=0.5 / self.substeps, inflow_count=3,
                               buoyancy=(0.0, 1e-4, 0.0))
            source = SourceSpec((n / 2, n / 8 + 1, n / 2), max(1.0, 0.06 * n), 0.5,
                                (0.0, 0.5, 0.0))
            state = [ScalarField.zeros(config.hr_resolution),
                     StaggeredVelocityField.zeros(config.hr_resolution)]

            def run(_frame: int, cfg=config, src=source, st=state) -> object:
                for _ in range(self.substeps):
                    result = sim_step(st[0], st[1], [src], cfg)
                    st[0], st[1] = result.density, result.velocity
                return st

            records.append(self._measure(Subsystem.SOLVER, edge, run, frames))
        return records

    def render_performance_table(self, solver: Sequence[BenchRecord],
                                 multipass: Sequence[BenchRecord],
                                 fit_records: Sequence[BenchRecord]) -> str:
        """ Markdown table of local solver and multi-pass timings per output size """
        by_res = {r.resolution: r for r in multipass}
        rows = []
        for s in solver:
            m = by_res.get(s.resolution)
            speedup = '-' if m is None or m.failed or s.failed \
                else f'{s.seconds_per_frame / m.seconds_per_frame:.1f}x'
            rows.append({'resolution': 'x'.join(map(str, s.resolution)), 'solver': _cell(s),
                         'multipass': _cell(m), 'speedup': speedup})
        return render_template(TABLE_TEMPLATE, {
            'substeps': self.substeps,
            'rows': rows,
            'solver_exponent': loglog_exponent(solver),
            'multipass_exponent': loglog_exponent(fit_records),
            'r_squared': linear_fit(fit_records).r_squared,
            'reference': REFERENCE_TIMINGS,
        }, self)


def write_records(path: pathlib.Path, records: Sequence[BenchRecord]) -> pathlib.Path:
    """ CSV with one row per record """
    lines = [','.join(CSV_COLUMNS)]
    for r in records:
        lines.append(','.join([r.subsystem.value, *map(str, r.resolution), str(r.voxels),
                               repr(r.seconds_per_frame), str(r.frames), str(int(r.failed))]))
    return atomic_write_bytes(pathlib.Path(path), ('\n'.join(lines) + '\n').encode('utf-8'))


def read_records(path: pathlib.Path) -> list[BenchRecord]:
    """ Inverse of `write_records` """
    try:
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise VolumeIOError(f'Could not read {path}: {e}') from e
    return [BenchRecord((int(r['nx']), int(r['ny']), int(r['nz'])), float(r['seconds_per_frame']),
                        Subsystem(r['subsystem']), int(r['frames']), bool(int(r['failed'])))
            for r in rows]
