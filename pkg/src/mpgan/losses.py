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
"""Training objectives and the in-plane advection warp.

All expectations are means over the batch; the L1 and feature terms are means over
elements.  Tempo and least-squares critics see sigmoid outputs, WGAN critics raw scores.
"""
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .exc import ValidationError

type Tensor = torch.Tensor

LOSS_COLUMNS = ('d_spatial', 'd_temporal', 'gradient_penalty', 'g_adv_spatial',
                'g_adv_temporal', 'g_feature', 'g_l1', 'g_total')


def warp2d(tile: Tensor, velocity: Tensor, dt: float, sign: int = 1) -> Tensor:
    """Semi-Lagrangian advection of a batch of tiles by `sign * dt * velocity`

    Args:
        tile: (B, H, W) or (B, C, H, W)
        velocity: (B, H, W, 2), pixels per time unit along H and W
        dt: time step
        sign: +1 advects forward, -1 with the negated velocity

    Returns:
        tiles of the input shape; samples traced outside take the edge value
    """
    squeeze = tile.dim() == 3
    x = tile.unsqueeze(1) if squeeze else tile
    b, _, h, w = x.shape
    if velocity.shape != (b, h, w, 2):
        raise ValidationError(f'Velocity {tuple(velocity.shape)} does not match tiles '
                              f'{tuple(x.shape)}')
    rows, cols = torch.meshgrid(torch.arange(h, dtype=x.dtype, device=x.device),
                                torch.arange(w, dtype=x.dtype, device=x.device), indexing='ij')
    disp = (sign * dt) * velocity.to(x.dtype)
    src_r = rows - disp[..., 0]
    src_c = cols - disp[..., 1]
    grid = torch.stack((2.0 * src_c / max(w - 1, 1) - 1.0,
                        2.0 * src_r / max(h - 1, 1) - 1.0), dim=-1)
    out = F.grid_sample(x, grid, mode='bilinear', padding_mode='border', align_corners=True)
    return out[:, 0] if squeeze else out


def warp_triplet(frames: Tensor, velocities: Tensor, dt: float) -> Tensor:
    """ Align (B, 3, H, W) frames t-1, t, t+1 to frame t with their (B, 3, H, W, 2) velocities """
    return torch.stack([warp2d(frames[:, 0], velocities[:, 0], dt, 1),
                        frames[:, 1],
                        warp2d(frames[:, 2], velocities[:, 2], dt, -1)], dim=1)


def l1_term(output: Tensor, target: Tensor) -> Tensor:
    """ Mean absolute error """
    return torch.mean(torch.abs(output - target))


def feature_weights(taps: int) -> tuple[float, ...]:
    """ Equal weights summing to one over `taps` layers """
    return tuple(1.0 / taps for _ in range(taps)) if taps else ()


def feature_term(fake: Sequence[Tensor], real: Sequence[Tensor],
                 weights: Sequence[float]) -> Tensor:
    """ Weighted sum over layers of mean squared activation differences """
    if len(fake) != len(real) or (weights and len(weights) != len(fake)):
        raise ValidationError(f'{len(fake)} fake taps, {len(real)} real taps, '
                              f'{len(weights)} weights')
    total = torch.zeros(())
    for w, f, r in zip(weights, fake, real):
        total = total + w * torch.mean((f - r) ** 2)
    return total


def _zero_like(ref: Tensor) -> Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def loss_tempo_critic(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """ `-log D(real) - log(1 - D(fake))` with `D = sigmoid(logit)` """
    return torch.mean(-F.logsigmoid(real_logits)) + torch.mean(-F.logsigmoid(-fake_logits))


def loss_tempo_generator(fake_spatial: Tensor, fake_temporal: Tensor | None, output: Tensor,
                         target: Tensor, *, l1_weight: float,
                         fake_taps: Sequence[Tensor] = (), real_taps: Sequence[Tensor] = (),
                         feature_weight: Sequence[float] = ()) -> dict[str, Tensor]:
    """ Adversarial log terms, feature-space term and weighted L1; `g_total` sums them """
    adv_s = torch.mean(-F.logsigmoid(fake_spatial))
    adv_t = torch.mean(-F.logsigmoid(fake_temporal)) if fake_temporal is not None \
        else _zero_like(adv_s)
    feat = feature_term(fake_taps, real_taps, feature_weight) if fake_taps \
        else _zero_like(adv_s)
    l1 = l1_term(output, target)
    return {'g_adv_spatial': adv_s, 'g_adv_temporal': adv_t, 'g_feature': feat, 'g_l1': l1,
            'g_total': adv_s + adv_t + feat + l1_weight * l1}


def loss_lsgan_critic(real: Tensor, fake: Tensor) -> Tensor:
    """ `0.5 E[(D(real) - 1)^2] + 0.5 E[D(fake)^2]` """
    return 0.5 * torch.mean((real - 1.0) ** 2) + 0.5 * torch.mean(fake ** 2)


def loss_lsgan_generator(fake: Tensor) -> Tensor:
    """ `0.5 E[(D(fake) - 1)^2]` """
    return 0.5 * torch.mean((fake - 1.0) ** 2)


def draw_r(rng: np.random.Generator, batch: int) -> Tensor:
    """ Per-sample interpolation factors in [0, 1) """
    return torch.as_tensor(rng.uniform(0.0, 1.0, size=batch))


def interpolate(real: Tensor, fake: Tensor, r: Tensor) -> Tensor:
    """ `(1 - R) * fake + R * real` with one R per sample """
    r = r.to(real.dtype).reshape(-1, *([1] * (real.dim() - 1)))
    return (1.0 - r) * fake + r * real


def gradient_penalty(critic: Callable[[Tensor], Tensor], real: Tensor, fake: Tensor,
                     r: Tensor, condition: Tensor | None = None) -> Tensor:
    """Mean over the batch of `(||grad_y D(y)|| - 1)^2` at the interpolates

    The condition, when given, is concatenated along channels and not interpolated; the
    gradient is taken with respect to the interpolated channels only.  The graph is kept, so
    the penalty can be back-propagated into the critic's parameters.
    """
    y_hat = interpolate(real.detach(), fake.detach(), r).requires_grad_(True)
    inputs = y_hat if condition is None else torch.cat([condition.detach(), y_hat], dim=1)
    scores = critic(inputs)
    grads, = torch.autograd.grad(outputs=scores, inputs=y_hat,
                                 grad_outputs=torch.ones_like(scores), create_graph=True)
    norm = grads.reshape(grads.shape[0], -1).norm(2, dim=-1)
    return torch.mean((norm - 1.0) ** 2)


def loss_wgan_critic(real: Tensor, fake: Tensor, penalty: Tensor, gp_weight: float) -> Tensor:
    """ `-E[D(real)] + E[D(fake)] + lambda * penalty` """
    return -torch.mean(real) + torch.mean(fake) + gp_weight * penalty


def loss_wgan_generator(fake_spatial: Tensor, fake_temporal: Tensor | None, output: Tensor,
                        target: Tensor, *, l1_weight: float) -> dict[str, Tensor]:
    """ `-E[D_t(fake)] - E[D_s(x, fake)] + lambda * L1`; no feature-space term """
    adv_s = -torch.mean(fake_spatial)
    adv_t = -torch.mean(fake_temporal) if fake_temporal is not None else _zero_like(adv_s)
    l1 = l1_term(output, target)
    return {'g_adv_spatial': adv_s, 'g_adv_temporal': adv_t, 'g_feature': _zero_like(adv_s),
            'g_l1': l1, 'g_total': adv_s + adv_t + l1_weight * l1}


def all_finite(terms: dict[str, Tensor] | Sequence[Tensor]) -> bool:
    """ True when every term is finite """
    values = terms.values() if isinstance(terms, dict) else terms
    return all(bool(torch.isfinite(v).all()) for v in values)
