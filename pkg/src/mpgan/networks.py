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
"""Declarative network specs and the torch modules built from them.

Generators are residual: their output is a bicubic up-sampling of one input channel plus
the learned detail.  Growing networks carry one to/from-density layer per stage and blend
the newest stage in with `alpha`.
"""
import enum
import functools
import hashlib
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exc import ValidationError
from .types import GrowthState

PN_EPS = 1e-8
LEAKY_SLOPE = 0.2


class LayerKind(enum.Enum):
    """ Layer descriptor kinds """
    CONV = 'conv'
    RES_BLOCK = 'res_block'
    AVG_DEPOOL = 'avg_depool'
    AVG_POOL = 'avg_pool'
    PIXEL_NORM = 'pixel_norm'
    ACTIVATION = 'activation'
    TO_DENSITY_1X1 = 'to_density_1x1'
    FROM_DENSITY_1X1 = 'from_density_1x1'
    FLATTEN_FC = 'flatten_fc'


class NetRole(enum.Enum):
    """ What a network does """
    GENERATOR = 'generator'
    DISCRIMINATOR = 'discriminator'


_BRANCH_KINDS = (LayerKind.TO_DENSITY_1X1, LayerKind.FROM_DENSITY_1X1)


@dataclass(frozen=True)
class LayerSpec:
    """ One layer.  Parameter-free layers carry the channel count passing through them. """
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: int = 1
    stage: int = 0

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """ Parameter tensor name (relative to the layer) to shape """
        i, o, k = self.in_channels, self.out_channels, self.kernel
        match self.kind:
            case LayerKind.CONV | LayerKind.TO_DENSITY_1X1 | LayerKind.FROM_DENSITY_1X1:
                return {'weight': (o, i, k, k), 'bias': (o,)}
            case LayerKind.RES_BLOCK:
                shapes = {'conv1.weight': (o, i, k, k), 'conv1.bias': (o,),
                          'conv2.weight': (o, o, k, k), 'conv2.bias': (o,)}
                if i != o:
                    shapes |= {'skip.weight': (o, i, 1, 1), 'skip.bias': (o,)}
                return shapes
            case LayerKind.FLATTEN_FC:
                return {'weight': (o, i), 'bias': (o,)}
        return {}

    @property
    def param_count(self) -> int:
        """ Weights plus biases """
        return sum(math.prod(s) for s in self.param_shapes.values())


class ReceptiveField(NamedTuple):
    """ Half-width `radius` and full `extent` in LR cells, and the radius in input pixels """
    radius: float
    extent: float
    input_radius: float


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list of one network

    `input_size` is the input tile side at full depth and `lr_cell` the number of input pixels
    per LR cell.  Generators add their output to a bicubic up-sampling of input channel
    `residual_channel`.
    """
    name: str
    role: NetRole
    in_channels: int
    input_size: int
    layers: tuple[LayerSpec, ...]
    growing: bool = False
    lr_cell: int = 1
    residual_channel: int = 0

    def __post_init__(self):
        stages = [layer.stage for layer in self.layers]
        if stages != sorted(stages):
            raise ValidationError(f'{self.name}: stage indices must be non-decreasing')
        if self.role is NetRole.GENERATOR:
            self._check_generator()
        else:
            self._check_discriminator()

    def _check_chain(self, layers: list[LayerSpec], channels: int) -> int:
        for layer in layers:
            if layer.in_channels != channels:
                raise ValidationError(f'{self.name}: {layer.kind.value} at stage {layer.stage} '
                                      f'expects {layer.in_channels} channels, gets {channels}')
            channels = layer.out_channels
        return channels

    def _check_generator(self) -> None:
        channels = self.in_channels
        for layer in self.layers:
            if layer.kind is LayerKind.TO_DENSITY_1X1:
                self._check_chain([layer], channels)
                continue
            channels = self._check_chain([layer], channels)
        if not any(layer.kind is LayerKind.TO_DENSITY_1X1 and layer.stage == self.max_stage
                   for layer in self.layers):
            raise ValidationError(f'{self.name}: final stage lacks a to-density layer')

    def _check_discriminator(self) -> None:
        if self.stage_layers(0)[-1].kind is not LayerKind.FLATTEN_FC:
            raise ValidationError(f'{self.name}: discriminator must end with flatten+FC')
        feeding: int | None = None
        for stage in range(self.max_stage, -1, -1):
            layers = self.stage_layers(stage)
            heads = [layer for layer in layers if layer.kind is LayerKind.FROM_DENSITY_1X1]
            body = [layer for layer in layers if layer.kind not in _BRANCH_KINDS
                    and layer.kind is not LayerKind.FLATTEN_FC]
            if not body:
                raise ValidationError(f'{self.name}: stage {stage} has no layers')
            for h in heads:
                if h.in_channels != self.in_channels or h.out_channels != body[0].in_channels:
                    raise ValidationError(f'{self.name}: from-density layer of stage {stage} '
                                          f'does not fit the stage body')
            if feeding is None:
                if not heads:
                    raise ValidationError(f'{self.name}: top stage lacks a from-density layer')
                feeding = heads[0].out_channels
            feeding = self._check_chain(body, feeding)
        side = self.input_size_at(0)
        fc = self.stage_layers(0)[-1]
        if fc.in_channels != feeding * side * side:
            raise ValidationError(f'{self.name}: flatten+FC expects {fc.in_channels} features, '
                                  f'gets {feeding * side * side}')

    @property
    def max_stage(self) -> int:
        """ Deepest stage """
        return max(layer.stage for layer in self.layers)

    def stage_layers(self, stage: int) -> list[LayerSpec]:
        """ Layers of one stage in forward order """
        return [layer for layer in self.layers if layer.stage == stage]

    @property
    def param_count(self) -> int:
        """ Sum of weights and biases over all layers """
        return sum(layer.param_count for layer in self.layers)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """ Fully qualified parameter names (`layers.{i}.{param}`) to shapes """
        return {f'layers.{i}.{name}': shape
                for i, layer in enumerate(self.layers)
                for name, shape in layer.param_shapes.items()}

    def upscale_at(self, stage: int) -> int:
        """ Output/input size ratio of a generator evaluated up to `stage` """
        depools = sum(1 for layer in self.layers
                      if layer.kind is LayerKind.AVG_DEPOOL and layer.stage <= stage)
        return 2 ** depools

    def input_size_at(self, stage: int) -> int:
        """ Discriminator input side when evaluated up to `stage` """
        return self.input_size // 2 ** (self.max_stage - stage)

    def receptive_field(self) -> ReceptiveField:
        """ See `receptive_field` """
        return receptive_field(self)


def receptive_field(spec: NetworkSpec) -> ReceptiveField:
    """Analytic receptive field of the full-depth main path

    Every k x k convolution widens the radius by (k - 1) / 2 feature pixels; depooling halves
    and pooling doubles the size of a feature pixel in input pixels.
    """
    radius = 0.0
    pixel = 1.0
    for layer in spec.layers:
        match layer.kind:
            case LayerKind.CONV:
                radius += (layer.kernel - 1) / 2 * pixel
            case LayerKind.RES_BLOCK:
                radius += 2 * (layer.kernel - 1) / 2 * pixel
            case LayerKind.AVG_DEPOOL:
                pixel /= 2
            case LayerKind.AVG_POOL:
                pixel *= 2
    lr = radius / spec.lr_cell
    return ReceptiveField(lr, 1 + 2 * lr, radius)


def _res_stage(stage: int, kernel: int, widths: list[tuple[int, int]],
               depool: bool = False) -> list[LayerSpec]:
    layers = []
    if depool:
        layers.append(LayerSpec(LayerKind.AVG_DEPOOL, widths[0][0], widths[0][0], 1, stage))
    layers += [LayerSpec(LayerKind.RES_BLOCK, i, o, kernel, stage) for i, o in widths]
    return layers


def _generator(name: str, in_channels: int, input_size: int,
               stages: list[list[tuple[int, int]]], *, kernel: int = 3, growing: bool,
               lr_cell: int = 1, residual_channel: int = 0) -> NetworkSpec:
    layers: list[LayerSpec] = []
    for s, widths in enumerate(stages):
        layers += _res_stage(s, kernel, widths, depool=s > 0)
        if growing or s == len(stages) - 1:
            layers.append(LayerSpec(LayerKind.TO_DENSITY_1X1, widths[-1][1], 1, 1, s))
    return NetworkSpec(name, NetRole.GENERATOR, in_channels, input_size, tuple(layers),
                       growing, lr_cell, residual_channel)


def _disc_stage(stage: int, in_channels: int, head: int, convs: list[tuple[int, int]],
                kernel: int, *, with_head: bool, tail: str) -> list[LayerSpec]:
    layers = []
    if with_head:
        layers.append(LayerSpec(LayerKind.FROM_DENSITY_1X1, in_channels, head, 1, stage))
    for i, o in convs:
        layers.append(LayerSpec(LayerKind.CONV, i, o, kernel, stage))
        layers.append(LayerSpec(LayerKind.ACTIVATION, o, o, 1, stage))
    last = convs[-1][1]
    if tail == 'pool':
        layers.append(LayerSpec(LayerKind.AVG_POOL, last, last, 1, stage))
    return layers


def _discriminator(name: str, in_channels: int, input_size: int,
                   stages: list[tuple[int, list[tuple[int, int]]]], *, kernel: int = 3,
                   growing: bool) -> NetworkSpec:
    """ `stages[s] = (from-density width, convs)`, growth order; stage 0 ends in the FC """
    top = len(stages) - 1
    layers: list[LayerSpec] = []
    for s, (head, convs) in enumerate(stages):
        body = _disc_stage(s, in_channels, head, convs, kernel,
                           with_head=growing or s == top, tail='fc' if s == 0 else 'pool')
        if s == 0:
            side = input_size // 2 ** top
            last = convs[-1][1]
            body.append(LayerSpec(LayerKind.FLATTEN_FC, last * side * side, 1, 1, 0))
        layers += body
    return NetworkSpec(name, NetRole.DISCRIMINATOR, in_channels, input_size, tuple(layers),
                       growing)


_G1_8X_STAGES = [[(4, 16), (16, 64)], [(64, 128), (128, 64)], [(64, 64), (64, 32)],
                 [(32, 32), (32, 16)]]
_D1_8X_STAGES = [(128, [(128, 32), (32, 4)]), (128, [(128, 128), (128, 128)]),
                 (64, [(64, 64), (64, 128)]), (32, [(32, 32), (32, 64)])]


def build_g1_8x() -> NetworkSpec:
    """ First-pass 8x generator: 16x16x4 LR tile to 128x128 in four growing blocks """
    return _generator('g1_8x', 4, 16, _G1_8X_STAGES, growing=True)


def build_d1s_8x() -> NetworkSpec:
    """ First-pass spatial critic: (condition, density) at 128x128 """
    return _discriminator('d1s_8x', 2, 128, _D1_8X_STAGES, growing=True)


def build_d1t_8x() -> NetworkSpec:
    """ First-pass temporal critic: warped triplet at 128x128 """
    return _discriminator('d1t_8x', 3, 128, _D1_8X_STAGES, growing=True)


def build_g2_8x() -> NetworkSpec:
    """ Second-pass 8x generator: eight 5x5 residual blocks at constant 64x64 resolution """
    widths = [(5, 12), (12, 48), (48, 96), (96, 48), (48, 48), (48, 24), (24, 24), (24, 12)]
    return _generator('g2_8x', 5, 64, [widths], kernel=5, growing=False, lr_cell=4,
                      residual_channel=4)


def _d2_8x(name: str, in_channels: int) -> NetworkSpec:
    widths = [24, 24, 48, 48, 96, 96, 96, 32, 4]
    return _discriminator(name, in_channels, 64, [(24, list(zip(widths, widths[1:])))],
                          kernel=5, growing=False)


def build_d2s_8x() -> NetworkSpec:
    """ Second-pass spatial critic at 64x64 """
    return _d2_8x('d2s_8x', 2)


def build_d2t_8x() -> NetworkSpec:
    """ Second-pass temporal critic at 64x64 """
    return _d2_8x('d2t_8x', 3)


def build_g_4x() -> NetworkSpec:
    """ First-pass 4x generator: four residual blocks, 16x16x4 to 64x64 """
    return _generator('g_4x', 4, 16, [[(4, 32)], [(32, 64)], [(64, 32), (32, 16)]],
                      growing=False)


def build_g2_4x() -> NetworkSpec:
    """ Second-pass 4x generator at constant 64x64 resolution """
    return _generator('g2_4x', 5, 64, [[(5, 16), (16, 32), (32, 32), (32, 16)]],
                      growing=False, lr_cell=4, residual_channel=4)


def build_d_4x(temporal: bool = False) -> NetworkSpec:
    """ 4x critic: the first three 8x critic stages at a fixed 64x64 input """
    return _discriminator('d_4x_t' if temporal else 'd_4x_s', 3 if temporal else 2, 64,
                          _D1_8X_STAGES[:3], growing=False)


def generator_spec(pass_index: int, factor: int) -> NetworkSpec:
    """ Generator spec for a pass and factor """
    builders = {(1, 8): build_g1_8x, (2, 8): build_g2_8x, (1, 4): build_g_4x, (2, 4): build_g2_4x}
    try:
        return builders[(pass_index, factor)]()
    except KeyError as e:
        raise ValidationError(f'No generator for pass {pass_index} at {factor}x') from e


def discriminator_spec(pass_index: int, factor: int, temporal: bool) -> NetworkSpec:
    """ Spatial or temporal critic spec for a pass and factor """
    if pass_index not in (1, 2) or factor not in (4, 8):
        raise ValidationError(f'No critic for pass {pass_index} at {factor}x')
    if factor == 4:
        return build_d_4x(temporal)
    builders = {(1, False): build_d1s_8x, (1, True): build_d1t_8x,
                (2, False): build_d2s_8x, (2, True): build_d2t_8x}
    return builders[(pass_index, temporal)]()


def eq_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
              stride: int = 1) -> torch.Tensor:
    """ Same-padded convolution with the stored weight scaled by sqrt(2 / fan_in) """
    out_c, in_c, kh, kw = weight.shape
    if x.shape[1] != in_c:
        raise ValidationError(f'Convolution expects {in_c} input channels, got {x.shape[1]}')
    scale = math.sqrt(2.0 / (in_c * kh * kw))
    return F.conv2d(x, weight * scale, bias, stride=stride, padding=(kh // 2, kw // 2))


def pixel_norm(x: torch.Tensor, eps: float = PN_EPS) -> torch.Tensor:
    """ Normalise each pixel's feature vector to unit RMS over channels """
    return x / torch.sqrt(torch.mean(x * x, dim=1, keepdim=True) + eps)


class EqualizedConv2d(nn.Module):
    """ Convolution whose unit-normal weights are rescaled at every call """

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel).normal_())
        self.bias = nn.Parameter(torch.zeros(out_channels))

    # pylint: disable-next=missing-function-docstring
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return eq_conv2d(x, self.weight, self.bias)


class FromDensity(EqualizedConv2d):
    """ Critic input layer: 1x1 equalized convolution and leaky ReLU """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(super().forward(x), LEAKY_SLOPE)


class EqualizedLinear(nn.Module):
    """ Fully connected layer with the equalized learning-rate scale """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features).normal_())
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.scale = math.sqrt(2.0 / in_features)

    # pylint: disable-next=missing-function-docstring
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x.flatten(1), self.weight * self.scale, self.bias)


class ResBlock(nn.Module):
    """ conv-ReLU-PN-conv-ReLU-PN branch added to an identity or 1x1 projected skip """

    def __init__(self, in_channels: int, out_channels: int, kernel: int):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_channels, out_channels, kernel)
        self.conv2 = EqualizedConv2d(out_channels, out_channels, kernel)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1) \
            if in_channels != out_channels else None

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        """ Residual branch only """
        h = pixel_norm(F.relu(self.conv1(x)))
        return pixel_norm(F.relu(self.conv2(h)))

    # pylint: disable-next=missing-function-docstring
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = x if self.skip is None else self.skip(x)
        return skip + self.branch(x)


class _Lambda(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):  # pylint: disable=missing-function-docstring
        return self.fn(x)


def depool2x(x: torch.Tensor) -> torch.Tensor:
    """ 2x nearest-neighbour up-sampling """
    return F.interpolate(x, scale_factor=2, mode='nearest')


def pool2x(x: torch.Tensor) -> torch.Tensor:
    """ 2x average pooling """
    return F.avg_pool2d(x, 2)


def _build_layer(layer: LayerSpec) -> nn.Module:
    match layer.kind:
        case LayerKind.CONV | LayerKind.TO_DENSITY_1X1:
            return EqualizedConv2d(layer.in_channels, layer.out_channels, layer.kernel)
        case LayerKind.FROM_DENSITY_1X1:
            return FromDensity(layer.in_channels, layer.out_channels, layer.kernel)
        case LayerKind.RES_BLOCK:
            return ResBlock(layer.in_channels, layer.out_channels, layer.kernel)
        case LayerKind.AVG_DEPOOL:
            return _Lambda(depool2x)
        case LayerKind.AVG_POOL:
            return _Lambda(pool2x)
        case LayerKind.PIXEL_NORM:
            return _Lambda(pixel_norm)
        case LayerKind.ACTIVATION:
            return nn.LeakyReLU(LEAKY_SLOPE)
        case LayerKind.FLATTEN_FC:
            return EqualizedLinear(layer.in_channels, layer.out_channels)
    raise ValidationError(f'Unknown layer kind {layer.kind}')


@functools.lru_cache(maxsize=32)
def _cubic_matrix(n: int, factor: int) -> np.ndarray:
    """ (n*factor, n) Catmull-Rom interpolation matrix, cell-centred, edge-clamped """
    m = n * factor
    mat = np.zeros((m, n))
    for o in range(m):
        p = (o + 0.5) / factor - 0.5
        base = math.floor(p)
        t = p - base
        weights = (((-0.5 * t + 1.0) * t - 0.5) * t,
                   (1.5 * t - 2.5) * t * t + 1.0,
                   ((-1.5 * t + 2.0) * t + 0.5) * t,
                   (0.5 * t - 0.5) * t * t)
        for tap, w in zip(range(base - 1, base + 3), weights):
            mat[o, min(max(tap, 0), n - 1)] += w
    mat.flags.writeable = False
    return mat


def cubic_matrix(n: int, factor: int) -> np.ndarray:
    """ Catmull-Rom up-sampling matrix; `factor` 1 is the identity """
    if factor == 1:
        return np.eye(n)
    return _cubic_matrix(n, factor)


def bicubic_upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """ Separable Catmull-Rom up-sampling of the last two dims """
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    mh = torch.as_tensor(_cubic_matrix(h, factor), dtype=x.dtype, device=x.device)
    mw = torch.as_tensor(_cubic_matrix(w, factor), dtype=x.dtype, device=x.device)
    return mh @ x @ mw.T


def blend_stage_outputs(base: torch.Tensor, previous: torch.Tensor | None,
                        current: torch.Tensor, alpha: float) -> torch.Tensor:
    """ `base + (1 - alpha) * up(previous) + alpha * current`; exact at both endpoints """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f'alpha={alpha} outside [0, 1]')
    if previous is None or alpha == 1.0:
        return base + current
    up = depool2x(previous)
    if alpha == 0.0:
        return base + up
    return base + (1.0 - alpha) * up + alpha * current


class Network(nn.Module):
    """ Modules of a `NetworkSpec`; `layers[i]` realises `spec.layers[i]` """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(_build_layer(layer) for layer in spec.layers)

    def _growth(self, growth: GrowthState | None) -> GrowthState:
        if growth is None:
            return GrowthState(self.spec.max_stage, 1.0)
        if growth.stage > self.spec.max_stage:
            raise ValidationError(f'{self.spec.name}: stage {growth.stage} beyond built depth '
                                  f'{self.spec.max_stage}')
        if not self.spec.growing and growth.stage != self.spec.max_stage:
            raise ValidationError(f'{self.spec.name} does not grow; stage must be '
                                  f'{self.spec.max_stage}')
        return growth

    def indexed(self, stage: int, *kinds: LayerKind) -> Iterator[tuple[int, nn.Module]]:
        """ (index, module) pairs of a stage, optionally filtered by kind """
        for i, layer in enumerate(self.spec.layers):
            if layer.stage == stage and (not kinds or layer.kind in kinds):
                yield i, self.layers[i]


class Generator(Network):
    """ Residual generator; see `forward` """

    def forward(self, x: torch.Tensor,  # pylint: disable=arguments-differ
                growth: GrowthState | None = None) -> torch.Tensor:
        """Evaluate up to `growth.stage`

        Args:
            x: (B, C, h, w) input tiles
            growth: active stage and blend; defaults to full depth

        Returns:
            (B, 1, H, W) densities
        """
        growth = self._growth(growth)
        stage = growth.stage
        base = bicubic_upsample(x[:, self.spec.residual_channel:self.spec.residual_channel + 1],
                                self.spec.upscale_at(stage))
        h = x
        previous = None
        current = None
        for i, layer in enumerate(self.spec.layers):
            if layer.stage > stage:
                break
            if layer.kind is LayerKind.TO_DENSITY_1X1:
                if layer.stage == stage:
                    current = self.layers[i](h)
                elif layer.stage == stage - 1 and growth.alpha < 1.0:
                    previous = self.layers[i](h)
                continue
            h = self.layers[i](h)
        if current is None:
            raise ValidationError(f'{self.spec.name}: stage {stage} has no to-density layer')
        return blend_stage_outputs(base, previous, current, growth.alpha)

    def residual_modules(self) -> Iterator[nn.Module]:
        """ Residual branches and to-density layers: zeroing them leaves pure up-sampling """
        for i, layer in enumerate(self.spec.layers):
            if layer.kind is LayerKind.TO_DENSITY_1X1:
                yield self.layers[i]
            elif layer.kind is LayerKind.RES_BLOCK:
                block = self.layers[i]
                yield block.conv1
                yield block.conv2


class Discriminator(Network):
    """ Critic producing one scalar per input """

    def _body(self, stage: int, h: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.spec.layers):
            if layer.stage == stage and layer.kind is not LayerKind.FROM_DENSITY_1X1:
                h = self.layers[i](h)
        return h

    def _head(self, stage: int, x: torch.Tensor) -> torch.Tensor:
        for _, module in self.indexed(stage, LayerKind.FROM_DENSITY_1X1):
            return module(x)
        raise ValidationError(f'{self.spec.name}: stage {stage} has no from-density layer')

    def forward(self, x: torch.Tensor,  # pylint: disable=arguments-differ
                growth: GrowthState | None = None,
                taps: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Score `x`, a (B, C, S, S) batch with S = `spec.input_size_at(stage)`

        Args:
            taps: when given, receives the activations after each stage (the feature-space
                loss layers), highest stage first

        Returns:
            (B, 1) scores
        """
        growth = self._growth(growth)
        stage = growth.stage
        expected = self.spec.input_size_at(stage)
        if x.shape[-1] != expected or x.shape[-2] != expected:
            raise ValidationError(f'{self.spec.name}: stage {stage} expects {expected}^2 inputs, '
                                  f'got {tuple(x.shape[-2:])}')
        if stage > 0 and growth.alpha == 0.0:
            h = self._head(stage - 1, pool2x(x))
        else:
            h = self._body(stage, self._head(stage, x))
            if stage > 0 and growth.alpha < 1.0:
                h = (1.0 - growth.alpha) * self._head(stage - 1, pool2x(x)) + growth.alpha * h
        if taps is not None and stage > 0:
            taps.append(h)
        for s in range(stage - 1, -1, -1):
            h = self._body(s, h)
            if taps is not None and s > 0:
                taps.append(h)
        return h


def build_network(spec: NetworkSpec) -> Generator | Discriminator:
    """ Instantiate the modules of `spec` with unit-normal weights and zero biases """
    return Generator(spec) if spec.role is NetRole.GENERATOR else Discriminator(spec)


def zero_residual_(generator: Generator) -> Generator:
    """ Zero every residual branch and to-density layer in place """
    with torch.no_grad():
        for module in generator.residual_modules():
            for p in module.parameters():
                p.zero_()
    return generator


@dataclass
class WeightStore:
    """ Named float32 tensors of one network plus the tag of how they were initialised """
    tensors: dict[str, np.ndarray]
    init_mode: str = 'equalized_normal'

    @classmethod
    def from_module(cls, module: nn.Module, init_mode: str = 'equalized_normal') -> 'WeightStore':
        """ Snapshot a module's parameters """
        return cls({k: v.detach().cpu().numpy().astype(np.float32).copy()
                    for k, v in module.state_dict().items()}, init_mode)

    def check(self, spec: NetworkSpec) -> None:
        """Raises if names or shapes disagree with `spec`

        Raises:
            ValidationError: listing the missing, extra or mis-shaped tensors
        """
        expected = spec.parameter_shapes()
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        wrong = sorted(k for k in set(expected) & set(self.tensors)
                       if tuple(self.tensors[k].shape) != expected[k])
        if missing or extra or wrong:
            raise ValidationError(f'{spec.name}: weights do not match spec (missing {missing}, '
                                  f'extra {extra}, mis-shaped {wrong})')

    def load_into(self, module: Network) -> Network:
        """ Copy the tensors into `module`, keeping its dtype and device """
        self.check(module.spec)
        state = {k: torch.as_tensor(v) for k, v in self.tensors.items()}
        module.load_state_dict(state)
        return module

    def digest(self) -> str:
        """ SHA-256 over tensor names, shapes and float32 payloads in name order """
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype='<f4')
            h.update(name.encode('utf-8'))
            h.update(np.array(arr.shape, dtype='<u4').tobytes())
            h.update(arr.tobytes())
        return h.hexdigest()
