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
"""Adversarial training of the first- and second-pass networks.

Each iteration updates the spatial and temporal critics once and then the generator once.
The growing schedule, the learning-rate decay and the loss kind come from `TrainConfig`.
"""
import csv
import dataclasses
import logging
import pathlib
import time
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch

from . import losses
from .checkpoint import Checkpoint, checkpoint_name, load_checkpoint, save_checkpoint
from .dataset import BatchSampler, SampleKind, SliceSample, TripletSample, collate_spatial, \
    collate_temporal, read_shard, read_shard_meta, shard_name, curriculum_levels
from .exc import NumericalError, ValidationError
from .losses import LOSS_COLUMNS
from .networks import Discriminator, Generator, WeightStore, bicubic_upsample, build_network, \
    discriminator_spec, generator_spec
from .types import GrowthState, LossKind, LossWeights, TrainConfig
from .util import LoggingMixin, ROOT_LOGGER

LOG_COLUMNS = ('iteration', 'stage', 'alpha', 'lr_scale', *LOSS_COLUMNS, 'wall_clock')
DIVERGENCE_LIMIT = 1e6

logger = logging.getLogger(f'{ROOT_LOGGER}.training')


class Curriculum(NamedTuple):
    """ Schedule position of one iteration """
    stage: int
    alpha: float
    lr_scale: float


def curriculum_schedule(iteration: int, config: TrainConfig) -> Curriculum:
    """Growth stage, fade-in factor and learning-rate scale at `iteration`

    Growing runs spend `blend_iters` fading each stage in (alpha 0 to 1) and
    `stabilize_iters` at alpha 1, for stages 1 to `growth_stages`; the learning rate then
    decays linearly to zero over `decay_iters`.  Without growing the final stage is active
    from the start and the decay begins at iteration zero.
    """
    if iteration < 0:
        raise ValidationError(f'iteration must be >= 0, got {iteration}')
    top = config.growth_stages
    if iteration < config.growth_iterations:
        index, within = divmod(iteration, config.blend_iters + config.stabilize_iters)
        return Curriculum(index + 1, min(1.0, within / config.blend_iters), 1.0)
    decayed = iteration - config.growth_iterations
    return Curriculum(top, 1.0, max(0.0, 1.0 - decayed / config.decay_iters))


def make_optimizer(params: Iterable[torch.nn.Parameter], config: TrainConfig) -> torch.optim.Adam:
    """ Adam with the configured hyperparameters """
    adam = config.adam
    return torch.optim.Adam(params, lr=adam.learning_rate, betas=(adam.beta1, adam.beta2),
                            eps=adam.eps)


def adam_update(optimizer: torch.optim.Optimizer, lr_scale: float = 1.0) -> bool:
    """Bias-corrected Adam step at `lr_scale` times the base learning rate

    Returns:
        False, without touching weights or moments, if any gradient is not finite
    """
    grads = [p.grad for group in optimizer.param_groups for p in group['params']
             if p.grad is not None]
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        logger.warning('rejected optimizer step: non-finite gradient')
        optimizer.zero_grad(set_to_none=True)
        return False
    for group in optimizer.param_groups:
        group['lr'] = group.setdefault('initial_lr', group['lr']) * lr_scale
    optimizer.step()
    return True


class TripletBatch(NamedTuple):
    """ Collated temporal batch as tensors """
    inputs: torch.Tensor
    targets: torch.Tensor
    velocities: torch.Tensor
    dt: float


class SamplePool(NamedTuple):
    """ Samples of one up-scaling level """
    spatial: list[SliceSample]
    temporal: list[TripletSample]


def split_samples(samples: Iterable[SliceSample | TripletSample]) -> SamplePool:
    """ Separate a shard's samples by kind """
    pool = SamplePool([], [])
    for s in samples:
        (pool.spatial if s.kind is SampleKind.SPATIAL else pool.temporal).append(s)
    return pool


def load_pools(shard_dir: pathlib.Path, pass_index: int, factor: int) -> dict[int, SamplePool]:
    """Read the shards a pass trains on, keyed by the generator's up-scaling factor

    Raises:
        VolumeIOError: if a shard is missing
    """
    shard_dir = pathlib.Path(shard_dir)
    if pass_index == 2:
        return {1: split_samples(read_shard(shard_dir / shard_name(2, factor)))}
    return {j: split_samples(read_shard(shard_dir / shard_name(1, j)))
            for j in curriculum_levels(factor)}


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer(LoggingMixin):
    """Alternating critic/generator optimisation for one pass

    Args:
        config: schedule and hyperparameters
        pools: samples per generator up-scaling factor (1 for the second pass)
        out_dir: checkpoint and log directory
        pass_index: 1 or 2
        factor: overall up-scaling factor, 4 or 8
        weights: loss weights; the loss kind always follows `config.loss_kind`
    """
    # pylint: disable=too-many-instance-attributes

    # pylint: disable-next=too-many-arguments
    def __init__(self, config: TrainConfig, pools: Mapping[int, SamplePool],
                 out_dir: pathlib.Path, *, pass_index: int, factor: int,
                 weights: LossWeights | None = None):
        self._setup_logger(f'{ROOT_LOGGER}.trainer', f'pass {pass_index} {factor}x')
        self.config = config
        self.pass_index = pass_index
        self.factor = factor
        self.out_dir = pathlib.Path(out_dir)
        self.weights = dataclasses.replace(weights or LossWeights(), loss_kind=config.loss_kind)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.generator: Generator = build_network(  # type: ignore[assignment]
            generator_spec(pass_index, factor))
        self.critic_spatial: Discriminator = build_network(  # type: ignore[assignment]
            discriminator_spec(pass_index, factor, temporal=False))
        self.critic_temporal: Discriminator = build_network(  # type: ignore[assignment]
            discriminator_spec(pass_index, factor, temporal=True))
        self.optimizers = {role: make_optimizer(net.parameters(), config)
                           for role, net in self.networks.items()}
        self.samplers = self._make_samplers(pools)
        self.iteration = 0
        self.bad_steps = 0
        self._started = time.perf_counter()

    @property
    def networks(self) -> dict[str, torch.nn.Module]:
        """ Trained networks by checkpoint role """
        return {'generator': self.generator, 'critic_spatial': self.critic_spatial,
                'critic_temporal': self.critic_temporal}

    @property
    def log_path(self) -> pathlib.Path:
        """ CSV training log """
        return self.out_dir / f'pass{self.pass_index}_log.csv'

    def _make_samplers(self, pools: Mapping[int, SamplePool]) -> dict[str, BatchSampler]:
        needed = {self.generator.spec.upscale_at(s.stage)
                  for s in self._stages_used()}
        samplers: dict[str, BatchSampler] = {}
        for j in sorted(needed):
            if j not in pools or not pools[j].spatial:
                raise ValidationError(f'No spatial samples for {j}x training')
            seed = self.config.seed * 1000 + 2 * j
            samplers[f'spatial_x{j}'] = BatchSampler(pools[j].spatial, self.config.spatial_batch,
                                                     seed)
            if pools[j].temporal:
                samplers[f'temporal_x{j}'] = BatchSampler(pools[j].temporal,
                                                          self.config.temporal_batch, seed + 1)
            else:
                self.log(f'no temporal samples at {j}x; the temporal critic is idle there',
                         'warning')
        return samplers

    def _stages_used(self) -> list[GrowthState]:
        if not self.config.growing or not self.generator.spec.growing:
            return [GrowthState(self.generator.spec.max_stage)]
        return [GrowthState(s) for s in range(1, self.config.growth_stages + 1)]

    def growth_at(self, sched: Curriculum) -> GrowthState:
        """ Network growth state for a schedule position """
        if not self.config.growing or not self.generator.spec.growing:
            return GrowthState(self.generator.spec.max_stage, 1.0)
        return GrowthState(sched.stage, sched.alpha)

    def _condition(self, x: torch.Tensor, j: int) -> torch.Tensor:
        return bicubic_upsample(x[:, :1], j)

    def _temporal_batch(self, j: int) -> TripletBatch | None:
        sampler = self.samplers.get(f'temporal_x{j}')
        if sampler is None:
            return None
        inputs, targets, vel, dt = collate_temporal(sampler.next_batch())
        return TripletBatch(torch.from_numpy(inputs), torch.from_numpy(targets),
                            torch.from_numpy(vel), dt)

    def _fakes(self, x: torch.Tensor, triplet: TripletBatch | None,
               growth: GrowthState) -> tuple[torch.Tensor, torch.Tensor | None]:
        fake_s = self.generator(x, growth)
        if triplet is None:
            return fake_s, None
        b, t, c, h, w = triplet.inputs.shape
        frames = self.generator(triplet.inputs.reshape(b * t, c, h, w), growth)
        frames = frames.reshape(b, t, *frames.shape[-2:])
        return fake_s, losses.warp_triplet(frames, triplet.velocities, triplet.dt)

    def _critic_loss(self, critic: Discriminator, growth: GrowthState, real: torch.Tensor,
                     fake: torch.Tensor, cond: torch.Tensor | None = None) \
            -> tuple[torch.Tensor, torch.Tensor]:
        def score(z: torch.Tensor) -> torch.Tensor:
            return critic(z if cond is None else torch.cat([cond, z], dim=1), growth)

        real_score, fake_score = score(real), score(fake)
        match self.weights.loss_kind:
            case LossKind.WGAN_GP:
                r = losses.draw_r(self.rng, real.shape[0])
                gp = losses.gradient_penalty(lambda z: critic(z, growth), real, fake, r, cond)
                return losses.loss_wgan_critic(real_score, fake_score, gp,
                                               self.weights.gradient_penalty), gp
            case LossKind.LSGAN:
                return losses.loss_lsgan_critic(torch.sigmoid(real_score),
                                                torch.sigmoid(fake_score)), torch.zeros(())
        return losses.loss_tempo_critic(real_score, fake_score), torch.zeros(())

    def _critic_terms(self, growth: GrowthState, real_s: torch.Tensor, fake_s: torch.Tensor,
                      cond: torch.Tensor, real_t: torch.Tensor | None,
                      fake_t: torch.Tensor | None) -> dict[str, torch.Tensor]:
        d_s, gp_s = self._critic_loss(self.critic_spatial, growth, real_s, fake_s, cond)
        terms = {'d_spatial': d_s, 'd_temporal': torch.zeros(()), 'gradient_penalty': gp_s}
        if real_t is not None and fake_t is not None:
            d_t, gp_t = self._critic_loss(self.critic_temporal, growth, real_t, fake_t)
            terms['d_temporal'] = d_t
            terms['gradient_penalty'] = gp_s + gp_t
        return terms

    def _generator_terms(self, growth: GrowthState, fake_s: torch.Tensor, real_s: torch.Tensor,
                         cond: torch.Tensor,
                         fake_t: torch.Tensor | None) -> dict[str, torch.Tensor]:
        kind = self.weights.loss_kind
        fake_taps: list[torch.Tensor] = []
        taps = fake_taps if kind is LossKind.TEMPO else None
        score_s = self.critic_spatial(torch.cat([cond, fake_s], dim=1), growth, taps)
        score_t = self.critic_temporal(fake_t, growth) if fake_t is not None else None
        match kind:
            case LossKind.WGAN_GP:
                return losses.loss_wgan_generator(score_s, score_t, fake_s, real_s,
                                                  l1_weight=self.weights.l1)
            case LossKind.TEMPO:
                real_taps: list[torch.Tensor] = []
                with torch.no_grad():
                    self.critic_spatial(torch.cat([cond, real_s], dim=1), growth, real_taps)
                weights = self.weights.feature or losses.feature_weights(len(fake_taps))
                return losses.loss_tempo_generator(score_s, score_t, fake_s, real_s,
                                                   l1_weight=self.weights.l1,
                                                   fake_taps=fake_taps, real_taps=real_taps,
                                                   feature_weight=weights)
        adv_s = losses.loss_lsgan_generator(torch.sigmoid(score_s))
        adv_t = losses.loss_lsgan_generator(torch.sigmoid(score_t)) if score_t is not None \
            else torch.zeros(())
        l1 = losses.l1_term(fake_s, real_s)
        return {'g_adv_spatial': adv_s, 'g_adv_temporal': adv_t, 'g_feature': torch.zeros(()),
                'g_l1': l1, 'g_total': adv_s + adv_t + self.weights.l1 * l1}

    def _check(self, terms: Mapping[str, torch.Tensor]) -> bool:
        if not losses.all_finite(dict(terms)):
            self.log(f'iteration {self.iteration}: rejected step, non-finite loss', 'warning')
            return False
        values = self._floats(terms)
        diverged = {k: v for k, v in values.items() if abs(v) > DIVERGENCE_LIMIT}
        if diverged:
            self.log(f'iteration {self.iteration}: rejected step, losses beyond '
                     f'{DIVERGENCE_LIMIT:g}: {diverged}', 'debug')
            return False
        return True

    def step(self) -> dict[str, float]:
        """One critic update and one generator update

        Returns:
            the CSV row of this iteration

        Raises:
            NumericalError: after `max_bad_steps` consecutive non-finite or exploding steps
        """
        sched = curriculum_schedule(self.iteration, self.config)
        growth = self.growth_at(sched)
        j = self.generator.spec.upscale_at(growth.stage)
        x_np, y_np = collate_spatial(self.samplers[f'spatial_x{j}'].next_batch())
        x, real_s = torch.from_numpy(x_np), torch.from_numpy(y_np)
        triplet = self._temporal_batch(j)
        real_t = triplet.targets if triplet else None
        cond = self._condition(x, j)

        with torch.no_grad():
            fake_s, fake_t = self._fakes(x, triplet, growth)
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        d_terms = self._critic_terms(growth, real_s, fake_s, cond, real_t, fake_t)
        ok = self._check(d_terms)
        if losses.all_finite(d_terms):
            (d_terms['d_spatial'] + d_terms['d_temporal']).backward()
            ok &= adam_update(self.optimizers['critic_spatial'], sched.lr_scale)
            ok &= adam_update(self.optimizers['critic_temporal'], sched.lr_scale)

        _set_trainable(self.critic_spatial, False)
        _set_trainable(self.critic_temporal, False)
        self.optimizers['generator'].zero_grad(set_to_none=True)
        fake_s, fake_t = self._fakes(x, triplet, growth)
        g_terms = self._generator_terms(growth, fake_s, real_s, cond, fake_t)
        ok &= self._check(g_terms)
        if losses.all_finite(g_terms):
            g_terms['g_total'].backward()
            ok &= adam_update(self.optimizers['generator'], sched.lr_scale)
        _set_trainable(self.critic_spatial, True)
        _set_trainable(self.critic_temporal, True)

        self.bad_steps = 0 if ok else self.bad_steps + 1
        if self.bad_steps >= self.config.max_bad_steps:
            self.log(f'training diverged: {self.bad_steps} consecutive bad steps at iteration '
                     f'{self.iteration}; last terms {self._floats({**d_terms, **g_terms})}')
            raise NumericalError(f'Training diverged at iteration {self.iteration}')
        row = {'iteration': self.iteration, 'stage': growth.stage, 'alpha': growth.alpha,
               'lr_scale': sched.lr_scale, **self._floats({**d_terms, **g_terms}),
               'wall_clock': time.perf_counter() - self._started}
        self.iteration += 1
        return row

    @staticmethod
    def _floats(terms: Mapping[str, torch.Tensor]) -> dict[str, float]:
        return {k: float(terms[k].detach()) if k in terms else 0.0 for k in LOSS_COLUMNS}

    def checkpoint(self) -> Checkpoint:
        """ Snapshot of the full training state """
        sched = curriculum_schedule(self.iteration, self.config)
        return Checkpoint(
            pass_index=self.pass_index,
            factor=self.factor,
            loss_kind=self.config.loss_kind,
            iteration=self.iteration,
            growth=self.growth_at(sched),
            networks={role: WeightStore.from_module(net) for role, net in self.networks.items()},
            optimizers={role: opt.state_dict() for role, opt in self.optimizers.items()},
            numpy_rng=self.rng.bit_generator.state,
            torch_rng=bytes(torch.get_rng_state().numpy().tobytes()),
            samplers={name: s.state_dict() for name, s in self.samplers.items()},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Continue from a checkpoint of the same pass, factor and loss kind

        Raises:
            ValidationError: if the checkpoint belongs to another run shape
        """
        if (ckpt.pass_index, ckpt.factor, ckpt.loss_kind) != \
                (self.pass_index, self.factor, self.config.loss_kind):
            raise ValidationError(
                f'Checkpoint is pass {ckpt.pass_index} {ckpt.factor}x {ckpt.loss_kind.value}, '
                f'run is pass {self.pass_index} {self.factor}x {self.config.loss_kind.value}')
        for role, net in self.networks.items():
            ckpt.networks[role].load_into(net)  # type: ignore[arg-type]
        for role, opt in self.optimizers.items():
            opt.load_state_dict(ckpt.optimizers[role])
        self.rng.bit_generator.state = ckpt.numpy_rng
        torch.set_rng_state(torch.frombuffer(bytearray(ckpt.torch_rng), dtype=torch.uint8))
        for name, state in ckpt.samplers.items():
            if name in self.samplers:
                self.samplers[name].load_state_dict(state)
        self.iteration = ckpt.iteration
        self.log(f'resumed at iteration {self.iteration}', 'info')

    def resume(self, path: pathlib.Path) -> None:
        """ `restore` from a checkpoint file """
        self.restore(load_checkpoint(path))

    def _open_log(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        rows: list[dict[str, str]] = []
        if self.iteration and self.log_path.exists():
            with open(self.log_path, newline='', encoding='utf-8') as f:
                rows = [r for r in csv.DictReader(f) if int(r['iteration']) < self.iteration]
        # pylint: disable-next=consider-using-with
        f = open(self.log_path, 'w', newline='', encoding='utf-8')
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        return f, writer

    def train(self, iterations: int | None = None) -> pathlib.Path:
        """Run until `iterations` (default: the schedule's total) and checkpoint

        Returns:
            path of the last checkpoint written
        """
        end = self.config.total_iterations if iterations is None else iterations
        self.log(f'training iterations {self.iteration}..{end} with '
                 f'{self.config.loss_kind.value}', 'info')
        last = self.out_dir / checkpoint_name(self.pass_index)
        f, writer = self._open_log()
        with f:
            while self.iteration < end:
                writer.writerow(self.step())
                if self.iteration % self.config.checkpoint_every == 0:
                    f.flush()
                    last = save_checkpoint(self.checkpoint(), self.out_dir)
            if not last.exists() or self.iteration % self.config.checkpoint_every:
                last = save_checkpoint(self.checkpoint(), self.out_dir)
        return last


class FirstPassTrainer(Trainer):
    """ XY-plane training; growing and curriculum apply to the 8x networks """

    def __init__(self, config: TrainConfig, pools: Mapping[int, SamplePool],
                 out_dir: pathlib.Path, *, factor: int, weights: LossWeights | None = None):
        super().__init__(config, pools, out_dir, pass_index=1, factor=factor, weights=weights)


class SecondPassTrainer(Trainer):
    """Fixed-resolution YZ-plane training

    The first-pass generator is held frozen: it produced the shard inputs and its weights
    are never handed to an optimizer.  `shard_digest` is the first-pass weight digest the
    shards were built with; a mismatch means the inputs came from another generator.

    Raises:
        ValidationError: on growing or a first-pass digest mismatch
    """

    # pylint: disable-next=too-many-arguments
    def __init__(self, config: TrainConfig, pools: Mapping[int, SamplePool],
                 out_dir: pathlib.Path, *, factor: int, frozen_g1: Generator,
                 shard_digest: str | None = None, weights: LossWeights | None = None):
        if config.growing:
            raise ValidationError('The second pass trains without growing')
        _set_trainable(frozen_g1.eval(), False)
        self.g1_digest = WeightStore.from_module(frozen_g1).digest()
        if shard_digest is not None and shard_digest != self.g1_digest:
            raise ValidationError(f'Second-pass shards were built with first-pass weights '
                                  f'{shard_digest[:12]}, not {self.g1_digest[:12]}')
        super().__init__(config, pools, out_dir, pass_index=2, factor=factor, weights=weights)
        if shard_digest is None:
            self.log('shards carry no first-pass digest; their origin is unchecked', 'warning')


def train_first_pass(config: TrainConfig, shard_dir: pathlib.Path, out_dir: pathlib.Path, *,
                     factor: int, resume: pathlib.Path | None = None,
                     iterations: int | None = None) -> pathlib.Path:
    """ Train G1 with its critics on the pass-1 shards; returns the last checkpoint """
    trainer = FirstPassTrainer(config, load_pools(shard_dir, 1, factor), out_dir, factor=factor)
    if resume:
        trainer.resume(resume)
    return trainer.train(iterations)


# pylint: disable-next=too-many-arguments
def train_second_pass(config: TrainConfig, shard_dir: pathlib.Path, frozen_g1: Generator,
                      out_dir: pathlib.Path, *, factor: int, resume: pathlib.Path | None = None,
                      iterations: int | None = None) -> pathlib.Path:
    """ Train G2 with its critics on the pass-2 shards; returns the last checkpoint """
    meta = read_shard_meta(pathlib.Path(shard_dir) / shard_name(2, factor))
    trainer = SecondPassTrainer(config, load_pools(shard_dir, 2, factor), out_dir, factor=factor,
                                frozen_g1=frozen_g1, shard_digest=meta.get('g1_digest'))
    if resume:
        trainer.resume(resume)
    return trainer.train(iterations)


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    """ Trailing mean over `window` entries; shorter at the start """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    csum = np.cumsum(np.insert(arr, 0, 0.0))
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def read_log(path: pathlib.Path) -> dict[str, np.ndarray]:
    """ Columns of a training CSV log """
    with open(path, newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {c: np.zeros(0) for c in LOG_COLUMNS}
    return {c: np.array([float(r[c]) for r in rows]) for c in rows[0]}

