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
import os
import time
import unittest

import numpy as np
import torch

from mpgan.exc import ValidationError
from mpgan.inference import TiledPlan, apply_pass, combine_axes, make_plan, multipass_upscale, \
    plane_velocity, rescale_velocity, single_axis_upscale, tiled_forward, untiled_forward, \
    upsample_linear, upsample_linear_z, upsample_trilinear
from mpgan.networks import build_network, generator_spec, zero_residual_
from mpgan.types import Axis, CombineMode, InferenceConfig

SLOW = os.environ.get('MPGAN_SLOW_TESTS') == '1'


def catmull_rom(n: int, factor: int) -> np.ndarray:
    def kernel(s: float) -> float:
        s = abs(s)
        if s < 1:
            return 1.5 * s ** 3 - 2.5 * s ** 2 + 1
        if s < 2:
            return -0.5 * s ** 3 + 2.5 * s ** 2 - 4 * s + 2
        return 0.0
    mat = np.zeros((n * factor, n))
    for o in range(n * factor):
        p = (o + 0.5) / factor - 0.5
        for i in range(int(np.floor(p)) - 1, int(np.floor(p)) + 3):
            mat[o, min(max(i, 0), n - 1)] += kernel(p - i)
    return mat


def identity_generators(factor: int, dtype=torch.float64):
    g1 = zero_residual_(build_network(generator_spec(1, factor))).to(dtype).eval()
    g2 = zero_residual_(build_network(generator_spec(2, factor))).to(dtype).eval()
    return g1, g2


class TestInterpolation(unittest.TestCase):
    def test_cell_centred_linear(self):
        np.testing.assert_allclose([0.0, 0.25, 0.75, 1.0],
                                   upsample_linear(np.array([0.0, 1.0]), 2, 0))
        vol = np.full((3, 4, 5), 0.7)
        np.testing.assert_allclose(np.full((9, 12, 15), 0.7), upsample_trilinear(vol, 3))
        with self.assertRaises(ValidationError):
            upsample_linear(vol, 0, 0)

    def test_linear_z_only_touches_depth(self):
        vol = np.zeros((2, 3, 2, 3))
        vol[:, :, 1] = 1.0
        out = upsample_linear_z(vol, 2)
        self.assertEqual((2, 3, 4, 3), out.shape)
        np.testing.assert_allclose(np.broadcast_to([0.0, 0.25, 0.75, 1.0], (2, 3, 3, 4)),
                                   np.moveaxis(out, 2, -1))

    def test_velocity_helpers(self):
        vel = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(vel * 0.25, rescale_velocity(vel, 0.5, 2.0))
        with self.assertRaises(ValidationError):
            rescale_velocity(vel, 0.5, 0.0)
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal([2.0, 3.0, 1.0], plane_velocity(v, Axis.X))
        np.testing.assert_array_equal([1.0, 3.0, 2.0], plane_velocity(v, Axis.Y))
        np.testing.assert_array_equal([1.0, 2.0, 3.0], plane_velocity(v, Axis.Z))


class TestTiling(unittest.TestCase):
    def setUp(self):
        self.startTime = time.time()
        torch.manual_seed(2)

    def tearDown(self):
        t = time.time() - self.startTime
        print(f'{self.id()}: {t:.3f}s')

    def test_plan_covers_every_pixel_once(self):
        plan = TiledPlan((40, 23), 16, 4)
        hits = np.zeros(plan.shape, dtype=int)
        for tile in plan.tiles():
            y0, y1, x0, x1 = tile.core
            wy0, wy1, wx0, wx1 = tile.window
            hits[y0:y1, x0:x1] += 1
            self.assertEqual((wy1 - wy0, wx1 - wx0), plan.window_shape)
            self.assertTrue(wy0 <= y0 and y1 <= wy1 and wx0 <= x0 and x1 <= wx1)
        np.testing.assert_array_equal(np.ones(plan.shape, dtype=int), hits)
        with self.assertRaises(ValidationError):
            TiledPlan((4, 4), 0, 1)

    def test_overlap_widened_to_receptive_radius(self):
        g1 = build_network(generator_spec(1, 8))
        self.assertEqual(8, make_plan((50, 50), g1, overlap=4).overlap)
        self.assertEqual(10, make_plan((50, 50), g1, overlap=10).overlap)

    def test_tiled_matches_untiled(self):
        g = build_network(generator_spec(1, 4)).to(torch.float64).eval()
        slices = np.random.default_rng(0).uniform(size=(2, 4, 40, 40))
        plan = make_plan((40, 40), g)
        self.assertGreater(len(list(plan.tiles())), 1)
        tiled = tiled_forward(g, slices, plan, batch=5)
        whole = untiled_forward(g, slices)
        self.assertEqual((2, 160, 160), tiled.shape)
        self.assertLessEqual(np.max(np.abs(tiled - whole)), 1e-4)

    def test_short_overlap_shows_seams(self):
        g = build_network(generator_spec(1, 4)).to(torch.float64).eval()
        slices = np.random.default_rng(0).uniform(size=(2, 4, 40, 40))
        radius = g.spec.receptive_field().input_radius
        plan = TiledPlan((40, 40), 16, 1)
        self.assertLess(plan.overlap, radius)
        tiled = tiled_forward(g, slices, plan, batch=5)
        whole = untiled_forward(g, slices)
        self.assertGreater(np.max(np.abs(tiled - whole)), 1e-4)

    def test_apply_pass_rejects(self):
        g = build_network(generator_spec(1, 4))
        with self.assertRaises(ValidationError):
            apply_pass(np.zeros((4, 4, 4, 3)), g, Axis.Z)
        with self.assertRaises(ValidationError):
            apply_pass(np.zeros((40, 40, 2, 4)), g, Axis.Z, TiledPlan((40, 40), 16, 1))


class TestMultipass(unittest.TestCase):
    def setUp(self):
        self.startTime = time.time()
        rng = np.random.default_rng(7)
        self.density = rng.uniform(size=(12, 10, 6))
        self.velocity = rng.normal(size=(12, 10, 6, 3))

    def tearDown(self):
        t = time.time() - self.startTime
        print(f'{self.id()}: {t:.3f}s')

    def test_identity_networks_give_separable_interpolation(self):
        g1, g2 = identity_generators(4)
        out = multipass_upscale(self.density, self.velocity, g1, g2, 4)
        self.assertEqual((48, 40, 24), out.shape)
        self.assertEqual(np.float32, out.dtype)
        expected = upsample_linear(self.density, 4, 2)
        expected = np.einsum('ia,jb,abk->ijk', catmull_rom(12, 4), catmull_rom(10, 4), expected)
        np.testing.assert_allclose(np.maximum(expected, 0.0), out, atol=1e-6)

    def test_single_axis(self):
        g1, _ = identity_generators(4)
        out = single_axis_upscale(self.density, self.velocity, g1, 4, Axis.X)
        self.assertEqual((48, 40, 24), out.shape)
        expected = upsample_linear(self.density, 4, 0)
        expected = np.einsum('jb,kc,abc->ajk', catmull_rom(10, 4), catmull_rom(6, 4), expected)
        np.testing.assert_allclose(np.maximum(expected, 0.0), out, atol=1e-6)

    def test_velocity_rescaling_reaches_network(self):
        g1 = build_network(generator_spec(1, 4)).to(torch.float64).eval()
        _, g2 = identity_generators(4)
        slow = multipass_upscale(self.density, self.velocity, g1, g2, 4,
                                 InferenceConfig(dt_train=0.5, dt_sim=1.0))
        halved = multipass_upscale(self.density, self.velocity * 0.5, g1, g2, 4)
        np.testing.assert_allclose(slow, halved, atol=1e-5)
        self.assertGreaterEqual(float(slow.min()), 0.0)

    def test_mismatches(self):
        g1, g2 = identity_generators(4)
        with self.assertRaises(ValidationError):
            multipass_upscale(self.density, self.velocity[..., :2], g1, g2, 4)
        with self.assertRaises(ValidationError):
            multipass_upscale(self.density, self.velocity, g1, g1, 4)
        with self.assertRaises(ValidationError):
            multipass_upscale(self.density, self.velocity, g1, g2, 8)

    @unittest.skipUnless(SLOW, 'set MPGAN_SLOW_TESTS=1 for full-size inference')
    def test_full_size_shapes(self):
        for factor, edge in ((4, 64), (8, 50)):
            with self.subTest(factor=factor):
                g1, g2 = identity_generators(factor, torch.float32)
                d = np.random.default_rng(factor).uniform(size=(edge,) * 3)
                out = multipass_upscale(d, np.zeros((edge,) * 3 + (3,)), g1, g2, factor)
                self.assertEqual((edge * factor,) * 3, out.shape)
                self.assertTrue(np.all(out >= 0))


class TestCombine(unittest.TestCase):
    def setUp(self):
        self.up = np.full((2, 2, 2), 1.0)
        self.vols = [np.full((2, 2, 2), v) for v in (2.0, 0.5, 1.5)]

    def test_modes(self):
        np.testing.assert_allclose(np.full((2, 2, 2), 4 / 3), combine_axes(self.vols, 'avg'))
        np.testing.assert_allclose(np.full((2, 2, 2), 2.0),
                                   combine_axes(self.vols, CombineMode.MAX))
        # base z: 1.5 plus residuals 1.0 and -0.5
        np.testing.assert_allclose(np.full((2, 2, 2), 2.0),
                                   combine_axes(self.vols, 'res', Axis.Z, self.up))
        np.testing.assert_allclose(np.full((2, 2, 2), 2.5),
                                   combine_axes(self.vols, 'cres', Axis.Z, self.up))
        np.testing.assert_allclose(np.full((2, 2, 2), 2.5),
                                   combine_axes(self.vols, 'cres', Axis.X, self.up))

    def test_rejects(self):
        with self.assertRaises(ValidationError):
            combine_axes(self.vols[:2], 'avg')
        with self.assertRaises(ValidationError):
            combine_axes([*self.vols[:2], np.zeros((2, 2, 3))], 'max')
        with self.assertRaises(ValidationError):
            combine_axes(self.vols, 'res')
        with self.assertRaises(ValueError):
            combine_axes(self.vols, 'median')


if __name__ == '__main__':
    unittest.main()
