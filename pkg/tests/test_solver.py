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
import itertools
import math
import pathlib
import tempfile
import time
import unittest

import numpy as np

from mpgan.exc import NumericalError, ValidationError
from mpgan.solver import ScalarField, SimulationRunner, StaggeredVelocityField, \
    advect_maccormack, advect_semi_lagrangian, add_buoyancy, downsample_box, project_cg, \
    run_simulation, sample_scene, sim_step, simulate
from mpgan.types import SimConfig, SourceSpec
from mpgan.volio import read_fvol, read_sidecar, sidecar_path


def random_velocity(dims, rng, scale=1.0) -> StaggeredVelocityField:
    nx, ny, nz = dims
    return StaggeredVelocityField(rng.uniform(-scale, scale, (nx + 1, ny, nz)),
                                  rng.uniform(-scale, scale, (nx, ny + 1, nz)),
                                  rng.uniform(-scale, scale, (nx, ny, nz + 1)))


def dense_neumann_laplacian(dims) -> np.ndarray:
    n = int(np.prod(dims))
    lap = np.zeros((n, n))
    index = np.arange(n).reshape(dims)
    for cell in itertools.product(*(range(d) for d in dims)):
        row = index[cell]
        for axis in range(3):
            for step in (-1, 1):
                nb = list(cell)
                nb[axis] += step
                if 0 <= nb[axis] < dims[axis]:
                    lap[row, row] += 1.0
                    lap[row, index[tuple(nb)]] -= 1.0
    return lap


class TestPressureProjection(unittest.TestCase):
    def setUp(self):
        self.start = time.time()

    def tearDown(self):
        print(f'{self.id()} ran in {time.time() - self.start:.2f}s')

    def test_matches_dense_solve(self):
        dims = (8, 8, 8)
        pinv = np.linalg.pinv(dense_neumann_laplacian(dims))
        rng = np.random.default_rng(7)
        for _ in range(100):
            vel = random_velocity(dims, rng)
            result = project_cg(vel, tolerance=1e-10, max_iter=5000)
            self.assertTrue(result.converged)
            rhs = -vel.with_closed_walls().divergence().ravel()
            rhs -= rhs.mean()
            expected = (pinv @ rhs).reshape(dims)
            err = np.linalg.norm(result.pressure - expected) / np.linalg.norm(expected)
            self.assertLess(err, 1e-5)

    def test_divergence_free_on_32(self):
        rng = np.random.default_rng(3)
        vel = random_velocity((32, 32, 32), rng)
        result = project_cg(vel, tolerance=1e-5, max_iter=2000)
        self.assertTrue(result.converged)
        self.assertLessEqual(np.abs(result.velocity.divergence()).max(), 1e-4 * vel.max_abs())
        self.assertGreater(result.iterations, 0)

    def test_walls_closed(self):
        vel = random_velocity((6, 5, 4), np.random.default_rng(0))
        out = project_cg(vel, 1e-6, 500).velocity
        self.assertEqual(0.0, np.abs(out.u[[0, -1]]).max())
        self.assertEqual(0.0, np.abs(out.v[:, [0, -1]]).max())
        self.assertEqual(0.0, np.abs(out.w[:, :, [0, -1]]).max())

    def test_zero_velocity_short_circuits(self):
        result = project_cg(StaggeredVelocityField.zeros((4, 4, 4)), 1e-5, 10)
        self.assertEqual(0, result.iterations)
        self.assertTrue(result.converged)

    def test_iteration_cap_reports_non_convergence(self):
        vel = random_velocity((16, 16, 16), np.random.default_rng(1))
        with self.assertLogs('mpgan.solver', level='WARNING') as logs:
            result = project_cg(vel, 1e-12, 2)
        self.assertFalse(result.converged)
        self.assertTrue(np.isfinite(result.residual))
        self.assertIn('Pressure solve stopped', logs.output[0])

    def test_rejects_non_finite(self):
        vel = StaggeredVelocityField.zeros((4, 4, 4))
        vel.u[2, 1, 1] = np.nan
        with self.assertRaises(NumericalError):
            project_cg(vel, 1e-5, 10)

    def test_rejects_bad_tolerance(self):
        with self.assertRaises(ValidationError):
            project_cg(StaggeredVelocityField.zeros((4, 4, 4)), 0.0, 10)


class TestAdvection(unittest.TestCase):
    def test_zero_velocity_is_identity(self):
        rng = np.random.default_rng(0)
        density = ScalarField(rng.random((7, 6, 5)))
        still = StaggeredVelocityField.zeros((7, 6, 5))
        for advect in (advect_semi_lagrangian, advect_maccormack):
            np.testing.assert_array_equal(advect(density, still, 0.5).data, density.data)
            moved = advect(random_velocity((7, 6, 5), rng), still, 0.5)
            self.assertIsInstance(moved, StaggeredVelocityField)

    def test_linear_ramp_matches_backtrace(self):
        dims = (16, 16, 16)
        ramp = np.broadcast_to(np.arange(16.0)[:, None, None], dims).copy()
        vector = np.array([2.0, 0.0, 0.0])
        dt = 0.5
        vel = StaggeredVelocityField.uniform(dims, vector)

        expected = np.empty(dims)
        for cell in itertools.product(*(range(n) for n in dims)):
            src = [min(max(c - v * dt, 0.0), n - 1) for c, v, n in zip(cell, vector, dims)]
            lo = [int(math.floor(s)) for s in src]
            frac = [s - a for s, a in zip(src, lo)]
            value = 0.0
            for corner in itertools.product((0, 1), repeat=3):
                idx = tuple(min(a + k, n - 1) for a, k, n in zip(lo, corner, dims))
                w = math.prod(f if k else 1.0 - f for f, k in zip(frac, corner))
                value += w * ramp[idx]
            expected[cell] = value

        sl = advect_semi_lagrangian(ScalarField(ramp), vel, dt).data
        np.testing.assert_allclose(expected, sl, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.maximum(np.arange(16.0) - 1, 0), sl[:, 3, 7], atol=1e-12)
        # the last layer sits against the outflow wall, where the reverse trace is clamped
        mc = advect_maccormack(ScalarField(ramp), vel, dt).data
        np.testing.assert_allclose(expected[:15], mc[:15], rtol=0, atol=1e-12)

    def test_maccormack_clamp(self):
        rng = np.random.default_rng(11)
        dims = (22, 22, 22)
        density = ScalarField(rng.random(dims))
        vector = rng.uniform(-1.7, 1.7, 3)
        out = advect_maccormack(density, StaggeredVelocityField.uniform(dims, vector), 1.0).data

        pos = np.indices(dims, dtype=np.float64)
        corners = []
        for a, n in enumerate(dims):
            c = np.clip(pos[a] - vector[a], 0, n - 1)
            lo = np.floor(c).astype(int)
            corners.append((lo, np.minimum(lo + 1, n - 1)))
        values = np.stack([density.data[ix, iy, iz]
                           for ix, iy, iz in itertools.product(*corners)])
        self.assertGreaterEqual(density.data.size, 10_000)
        self.assertTrue(np.all(out >= values.min(axis=0) - 1e-12))
        self.assertTrue(np.all(out <= values.max(axis=0) + 1e-12))

    def test_gaussian_translation(self):
        dims = (32, 32, 32)
        vector = np.array([0.5, 0.25, 0.0])
        steps = 8
        x, y, z = np.indices(dims, dtype=np.float64)

        def blob(shift):
            c = np.array([12.0, 12.0, 16.0]) + shift
            return np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * 3.0 ** 2))

        vel = StaggeredVelocityField.uniform(dims, vector)
        expected = blob(steps * vector)
        errors = {}
        for name, advect in (('sl', advect_semi_lagrangian), ('mc', advect_maccormack)):
            field = ScalarField(blob(np.zeros(3)))
            for _ in range(steps):
                field = advect(field, vel, 1.0)
            errors[name] = np.linalg.norm(field.data - expected)
        self.assertLessEqual(errors['mc'], errors['sl'])

    def test_grid_mismatch(self):
        with self.assertRaises(ValidationError):
            advect_semi_lagrangian(ScalarField.zeros((4, 4, 4)),
                                   StaggeredVelocityField.zeros((4, 4, 5)), 0.5)
        with self.assertRaises(ValidationError):
            advect_maccormack(ScalarField.zeros((4, 4, 4)),
                              StaggeredVelocityField.zeros((4, 4, 4)), 0.0)


class TestSimulation(unittest.TestCase):
    def test_buoyancy_pushes_up_where_dense(self):
        density = ScalarField.zeros((4, 4, 4))
        density.data[1, 1, 1] = 1.0
        vel = add_buoyancy(StaggeredVelocityField.zeros((4, 4, 4)), density, (0, 2.0, 0), 0.5)
        self.assertAlmostEqual(0.5, vel.v[1, 1, 1])
        self.assertAlmostEqual(0.5, vel.v[1, 2, 1])
        self.assertEqual(0.0, vel.v[2, 2, 2])
        self.assertEqual(0.0, np.abs(vel.u).max())

    def test_step_keeps_density_non_negative(self):
        config = SimConfig(hr_resolution=(16, 16, 16), frames=3, inflow_count=3,
                           buoyancy=(0.0, 2e-4, 0.0))
        source = SourceSpec((8.0, 3.0, 8.0), 2.0, 0.5, (0.0, 0.3, 0.0))
        dims = (16, 16, 16)
        result = sim_step(ScalarField.zeros(dims), StaggeredVelocityField.zeros(dims),
                          [source], config)
        self.assertGreater(result.density.data.max(), 0.0)
        self.assertGreaterEqual(result.density.data.min(), 0.0)
        self.assertTrue(result.velocity.is_finite())

    def test_scene_is_seeded(self):
        config = SimConfig(hr_resolution=(32, 32, 32), frames=3, seed=5)
        a, sources_a = sample_scene(config)
        b, sources_b = sample_scene(config)
        self.assertEqual(a, b)
        self.assertEqual(sources_a, sources_b)
        self.assertTrue(3 <= a.inflow_count <= 12)
        self.assertEqual(a.inflow_count, len(sources_a))
        for s in sources_a:
            s.check_inside(config.hr_resolution)

    def test_simulate_yields_every_frame(self):
        config = SimConfig(hr_resolution=(16, 16, 16), frames=4, seed=1)
        frames = list(simulate(config))
        self.assertEqual(4, len(frames))
        self.assertGreater(frames[-1].density.data.sum(), frames[0].density.data.sum())

    def test_downsample_box(self):
        vol = np.arange(4 * 4 * 4, dtype=np.float64).reshape(4, 4, 4)
        out = downsample_box(vol, 2)
        self.assertEqual((2, 2, 2), out.shape)
        self.assertAlmostEqual(vol[:2, :2, :2].mean(), out[0, 0, 0])
        self.assertAlmostEqual(vol.mean(), out.mean())
        with self.assertRaises(ValidationError):
            downsample_box(np.zeros((5, 4, 4)), 2)

    def test_bad_configs(self):
        with self.assertRaises(ValidationError):
            SimConfig(hr_resolution=(30, 32, 32), upscale_factor=4)
        with self.assertRaises(ValidationError):
            SimConfig(upscale_factor=3)
        with self.assertRaises(ValidationError):
            SimConfig(frames=2)
        with self.assertRaises(ValidationError):
            SimConfig(inflow_count=13)


class TestSimulationRunner(unittest.TestCase):
    def test_exports_every_level(self):
        config = SimConfig(hr_resolution=(16, 16, 16), frames=3, seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            out = pathlib.Path(tmp)
            runner = SimulationRunner(config, out)
            files = asyncio.run(runner.run())
            self.assertEqual(3, len(files))
            self.assertTrue(runner.status)
            sim = out / runner.name
            for frame in range(3):
                self.assertEqual((4, 4, 4),
                                 read_fvol(sim / 'x1' / f'density_{frame:04d}.fvol').shape)
                self.assertEqual((4, 4, 4, 3),
                                 read_fvol(sim / 'x1' / f'velocity_{frame:04d}.fvol').shape)
                self.assertEqual((16, 16, 16),
                                 read_fvol(sim / 'x4' / f'density_{frame:04d}.fvol').shape)
            meta = read_sidecar(sidecar_path(sim, runner.name))
            self.assertEqual(3, meta['config']['frames'])
            self.assertEqual([runner.name], [p.name for p in out.iterdir()])

    def test_lr_density_is_box_average(self):
        config = SimConfig(hr_resolution=(16, 16, 16), upscale_factor=8, frames=3, seed=4)
        with tempfile.TemporaryDirectory() as tmp:
            runner = SimulationRunner(config, pathlib.Path(tmp), 'box')
            asyncio.run(runner.run())
            sim = pathlib.Path(tmp) / 'box'
            hr = read_fvol(sim / 'x8' / 'density_0002.fvol')
            for j in (1, 2, 4):
                np.testing.assert_allclose(read_fvol(sim / f'x{j}' / 'density_0002.fvol'),
                                           downsample_box(hr, 8 // j), rtol=1e-5, atol=1e-7)

    def test_rerun_replaces_previous_output(self):
        config = SimConfig(hr_resolution=(8, 8, 8), frames=3, seed=9)
        with tempfile.TemporaryDirectory() as tmp:
            out = pathlib.Path(tmp)
            first = [read_fvol(f) for f in asyncio.run(run_simulation(config, out, 'sim'))]
            (out / 'sim' / 'stale.txt').write_text('x', encoding='utf-8')
            files = asyncio.run(run_simulation(config, out, 'sim'))
            self.assertFalse((out / 'sim' / 'stale.txt').exists())
            for a, path in zip(first, files):
                np.testing.assert_array_equal(a, read_fvol(path))
            self.assertEqual(['sim'], [p.name for p in out.iterdir()])


if __name__ == '__main__':
    unittest.main()
