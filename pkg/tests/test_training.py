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
import math
import os
import pathlib
import tempfile
import time
import unittest
import warnings

import numpy as np
import torch

from mpgan.dataset import SliceSample, TripletSample, shard_name, write_shard
from mpgan.exc import ValidationError, VolumeIOError
from mpgan.networks import WeightStore, build_network, generator_spec
from mpgan.training import LOG_COLUMNS, FirstPassTrainer, SamplePool, SecondPassTrainer, \
    adam_update, curriculum_schedule, make_optimizer, moving_average, read_log, split_samples, \
    train_first_pass, train_second_pass
from mpgan.types import Axis, LossKind, LossWeights, TrainConfig

SLOW = os.environ.get('MPGAN_SLOW_TESTS') == '1'


def smooth_field(rng: np.random.Generator, side: int) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side] / side
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 0.05)


def first_pass_pool(count: int, *, factor: int = 4, tile: int = 16, seed: int = 0) -> SamplePool:
    rng = np.random.default_rng(seed)
    spatial, temporal = [], []
    for i in range(count):
        hr = smooth_field(rng, tile * factor)
        lr = hr.reshape(tile, factor, tile, factor).mean(axis=(1, 3))
        vel = rng.normal(scale=0.1, size=(tile, tile, 3))
        spatial.append(SliceSample(lr, vel, hr, Axis.Z, 0, i, factor))
        inputs = np.stack([np.concatenate([lr[..., None], vel], axis=-1)] * 3)
        temporal.append(TripletSample(np.stack([hr] * 3), inputs,
                                      np.zeros((3, tile * factor, tile * factor, 2)),
                                      Axis.Z, 0, i, factor))
    return SamplePool(spatial, temporal)


def second_pass_pool(count: int, side: int = 64) -> SamplePool:
    rng = np.random.default_rng(5)
    spatial = []
    for i in range(count):
        hr = smooth_field(rng, side)
        spatial.append(SliceSample(hr * 0.9, np.zeros((side, side, 3)), hr, Axis.X, 0, i, 1,
                                   first_pass=hr * 0.95))
    return SamplePool(spatial, [])


def tiny_config(**kwargs) -> TrainConfig:
    kwargs.setdefault('spatial_batch', 2)
    kwargs.setdefault('temporal_batch', 2)
    kwargs.setdefault('decay_iters', 8)
    kwargs.setdefault('checkpoint_every', 2)
    kwargs.setdefault('growing', False)
    return TrainConfig(**kwargs)


class TestSchedule(unittest.TestCase):
    def test_growing_schedule(self):
        config = TrainConfig(blend_iters=10, stabilize_iters=10, decay_iters=20)
        expected = {0: (1, 0.0, 1.0), 5: (1, 0.5, 1.0), 15: (1, 1.0, 1.0), 20: (2, 0.0, 1.0),
                    59: (3, 1.0, 1.0), 60: (3, 1.0, 1.0), 70: (3, 1.0, 0.5),
                    80: (3, 1.0, 0.0), 95: (3, 1.0, 0.0)}
        for iteration, (stage, alpha, lr) in expected.items():
            with self.subTest(iteration=iteration):
                sched = curriculum_schedule(iteration, config)
                self.assertEqual(stage, sched.stage)
                self.assertAlmostEqual(alpha, sched.alpha)
                self.assertAlmostEqual(lr, sched.lr_scale)

    def test_flat_schedule(self):
        config = TrainConfig(growing=False, decay_iters=10)
        self.assertEqual(10, config.total_iterations)
        self.assertEqual((3, 1.0, 1.0), tuple(curriculum_schedule(0, config)))
        self.assertAlmostEqual(0.5, curriculum_schedule(5, config).lr_scale)
        with self.assertRaises(ValidationError):
            curriculum_schedule(-1, config)

    def test_moving_average(self):
        np.testing.assert_allclose([1.0, 1.5, 2.5, 3.5], moving_average([1, 2, 3, 4], 2))
        self.assertEqual(0, moving_average([]).size)


class TestAdamUpdate(unittest.TestCase):
    def setUp(self):
        self.param = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        self.optimizer = make_optimizer([self.param], TrainConfig())

    def test_scaled_step(self):
        self.param.grad = torch.tensor([3.0, -0.5], dtype=torch.float64)
        self.assertTrue(adam_update(self.optimizer, 0.5))
        # first step with beta1 = 0 moves each weight by lr * sign(grad)
        np.testing.assert_allclose([1.0 - 0.00025, -2.0 + 0.00025],
                                   self.param.detach().numpy(), atol=1e-9)
        self.assertEqual(0.0005, self.optimizer.param_groups[0]['initial_lr'])

    def test_trajectory_matches_scalar_adam(self):
        lr, beta2, eps = 0.0005, 0.99, 1e-8
        expected = [1.0, -2.0]
        v = [0.0, 0.0]
        for t in range(1, 11):
            grad = [3.0 * math.cos(t), 0.1 * t - 0.55]
            scale = 1.0 - t / 20
            self.param.grad = torch.tensor(grad, dtype=torch.float64)
            self.assertTrue(adam_update(self.optimizer, scale))
            for i, g in enumerate(grad):
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                v_hat = v[i] / (1 - beta2 ** t)
                expected[i] -= lr * scale * g / (math.sqrt(v_hat) + eps)
            np.testing.assert_allclose(expected, self.param.detach().numpy(), rtol=0, atol=1e-12,
                                       err_msg=f'step {t}')
        self.assertAlmostEqual(0.5 * lr, self.optimizer.param_groups[0]['lr'], places=15)

    def test_non_finite_gradient_is_rejected(self):
        self.param.grad = torch.tensor([math.nan, 1.0], dtype=torch.float64)
        with self.assertLogs('mpgan.training', 'WARNING'):
            self.assertFalse(adam_update(self.optimizer))
        np.testing.assert_array_equal([1.0, -2.0], self.param.detach().numpy())
        self.assertEqual({}, dict(self.optimizer.state))


class TestTrainer(unittest.TestCase):
    def setUp(self):
        self.startTime = time.time()
        self.tmp = tempfile.TemporaryDirectory()
        self.out = pathlib.Path(self.tmp.name)
        self.pools = {4: first_pass_pool(4)}

    def tearDown(self):
        self.tmp.cleanup()
        t = time.time() - self.startTime
        print(f'{self.id()}: {t:.3f}s')

    def test_step_for_every_loss(self):
        for kind in LossKind:
            with self.subTest(kind=kind):
                trainer = FirstPassTrainer(tiny_config(loss_kind=kind), self.pools,
                                           self.out / kind.value, factor=4)
                row = trainer.step()
                self.assertEqual(set(LOG_COLUMNS), set(row))
                self.assertEqual(1, trainer.iteration)
                self.assertTrue(all(math.isfinite(v) for v in row.values()))
                if kind is not LossKind.WGAN_GP:
                    self.assertEqual(0.0, row['gradient_penalty'])
                if kind is not LossKind.TEMPO:
                    self.assertEqual(0.0, row['g_feature'])

    def test_train_writes_log_and_checkpoints(self):
        trainer = FirstPassTrainer(tiny_config(), self.pools, self.out, factor=4)
        last = trainer.train(3)
        self.assertEqual('pass1_0000003.ckpt', last.name)
        self.assertTrue((self.out / 'pass1_0000002.ckpt').exists())
        self.assertTrue((self.out / 'pass1_latest.ckpt').exists())
        log = read_log(trainer.log_path)
        np.testing.assert_array_equal([0, 1, 2], log['iteration'])
        np.testing.assert_allclose([1.0, 1.0 - 1 / 8, 1.0 - 2 / 8], log['lr_scale'])

    def test_resume_is_deterministic(self):
        straight = FirstPassTrainer(tiny_config(), self.pools, self.out / 'a', factor=4)
        straight.train(4)

        first = FirstPassTrainer(tiny_config(), self.pools, self.out / 'b', factor=4)
        ckpt = first.train(2)
        resumed = FirstPassTrainer(tiny_config(), self.pools, self.out / 'b', factor=4)
        resumed.resume(ckpt)
        self.assertEqual(2, resumed.iteration)
        resumed.train(4)

        for name, param in straight.generator.named_parameters():
            np.testing.assert_array_equal(param.detach().numpy(),
                                          dict(resumed.generator.named_parameters())[name]
                                          .detach().numpy(), err_msg=name)
        a = read_log(straight.log_path)
        b = read_log(resumed.log_path)
        for column in LOG_COLUMNS:
            if column != 'wall_clock':
                np.testing.assert_array_equal(a[column], b[column], err_msg=column)

    def test_resume_rejects_other_runs(self):
        ckpt = FirstPassTrainer(tiny_config(), self.pools, self.out, factor=4).checkpoint()
        other = FirstPassTrainer(tiny_config(loss_kind=LossKind.LSGAN), self.pools,
                                 self.out, factor=4)
        with self.assertRaises(ValidationError):
            other.restore(ckpt)

    def test_missing_pool(self):
        with self.assertRaises(ValidationError):
            FirstPassTrainer(tiny_config(), {2: first_pass_pool(2, factor=2)}, self.out, factor=4)

    def test_second_pass(self):
        g1 = build_network(generator_spec(1, 4))
        before = [p.detach().clone() for p in g1.parameters()]
        with self.assertLogs('mpgan.trainer', 'WARNING'):
            trainer = SecondPassTrainer(tiny_config(), {1: second_pass_pool(4)}, self.out,
                                        factor=4, frozen_g1=g1)
        row = trainer.step()
        self.assertEqual(0.0, row['d_temporal'])
        for p, q in zip(before, g1.parameters()):
            torch.testing.assert_close(p, q, rtol=0, atol=0)
            self.assertFalse(q.requires_grad)
        with self.assertRaises(ValidationError):
            SecondPassTrainer(tiny_config(growing=True), {1: second_pass_pool(4)}, self.out,
                              factor=4, frozen_g1=g1)

    def test_pass_entry_points_read_shards(self):
        shards = self.out / 'shards'
        write_shard(shards / shard_name(1, 4), [*self.pools[4].spatial, *self.pools[4].temporal])
        last = train_first_pass(tiny_config(), shards, self.out / 'g1', factor=4, iterations=2)
        self.assertEqual('pass1_0000002.ckpt', last.name)
        resumed = train_first_pass(tiny_config(), shards, self.out / 'g1', factor=4, resume=last,
                                   iterations=3)
        self.assertEqual('pass1_0000003.ckpt', resumed.name)

        g1 = build_network(generator_spec(1, 4))
        write_shard(shards / shard_name(2, 4), second_pass_pool(4).spatial,
                    {'g1_digest': WeightStore.from_module(g1).digest()})
        with self.assertLogs('mpgan.trainer', 'WARNING'):
            last2 = train_second_pass(tiny_config(), shards, g1, self.out / 'g2', factor=4,
                                      iterations=1)
        self.assertTrue(last2.exists())
        other_g1 = build_network(generator_spec(1, 4))
        with self.assertRaises(ValidationError):
            train_second_pass(tiny_config(), shards, other_g1, self.out / 'g2', factor=4)
        with self.assertRaises(VolumeIOError):
            train_first_pass(tiny_config(), self.out / 'empty', self.out / 'g1', factor=4)

    def test_second_pass_checks_first_pass_digest(self):
        g1 = build_network(generator_spec(1, 4))
        digest = WeightStore.from_module(g1).digest()
        trainer = SecondPassTrainer(tiny_config(), {1: second_pass_pool(4)}, self.out,
                                    factor=4, frozen_g1=g1, shard_digest=digest)
        self.assertEqual(digest, trainer.g1_digest)
        with torch.no_grad():
            next(g1.parameters()).add_(1.0)
        with self.assertRaises(ValidationError):
            SecondPassTrainer(tiny_config(), {1: second_pass_pool(4)}, self.out, factor=4,
                              frozen_g1=g1, shard_digest=digest)

    def test_loss_check(self):
        trainer = FirstPassTrainer(tiny_config(), self.pools, self.out, factor=4)
        weight = torch.ones((), requires_grad=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            self.assertTrue(trainer._check({'g_l1': weight * 3.0}))
            with self.assertLogs('mpgan.trainer', 'DEBUG') as cm:
                self.assertFalse(trainer._check({'g_l1': weight * 2e6}))
        self.assertEqual([], [str(w.message) for w in caught])
        self.assertIn('losses beyond 1e+06', cm.output[0])
        self.assertTrue(cm.output[0].startswith('DEBUG:'))
        with self.assertLogs('mpgan.trainer', 'WARNING'):
            self.assertFalse(trainer._check({'g_l1': weight * math.inf}))

    def test_split_samples(self):
        pool = self.pools[4]
        split = split_samples([*pool.spatial, *pool.temporal])
        self.assertEqual(4, len(split.spatial))
        self.assertEqual(4, len(split.temporal))

    @unittest.skipUnless(SLOW, 'set MPGAN_SLOW_TESTS=1 for the desk-scale overfit run')
    def test_desk_overfit(self):
        pools = {4: first_pass_pool(8)}
        trainer = FirstPassTrainer(tiny_config(decay_iters=400, checkpoint_every=100), pools,
                                   self.out, factor=4, weights=LossWeights(l1=100.0))
        trainer.train(300)
        l1 = read_log(trainer.log_path)['g_l1']
        self.assertLess(np.mean(l1[-20:]), 0.5 * np.mean(l1[:20]))


if __name__ == '__main__':
    unittest.main()
