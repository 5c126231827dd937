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
"""YAML run configuration.

Precedence, highest first: CLI flags, the config file, the scale preset, dataclass defaults.
"""
import dataclasses
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any

import yaml

from .exc import ConfigError, ConfigWarning, ValidationError
from .types import AdamConfig, AugmentConfig, BenchConfig, DatasetConfig, InferenceConfig, \
    LossKind, SimConfig, TrainConfig

try:
    _Loader = yaml.CSafeLoader
except AttributeError:  # pragma: no cover - libyaml missing
    _Loader = yaml.SafeLoader  # type: ignore[misc]

SECTIONS: dict[str, type] = {
    'simulation': SimConfig,
    'augment': AugmentConfig,
    'dataset': DatasetConfig,
    'training': TrainConfig,
    'inference': InferenceConfig,
    'bench': BenchConfig,
}
TOP_LEVEL = {'seed', 'factor', 'scale', *SECTIONS}
# keys a section accepts beyond its dataclass fields
_EXTRA_KEYS = {'simulation': {'simulations'}}

PRESETS: dict[str, dict[str, Any]] = {
    'desk': {'simulations': 4, 'frames': 30, 'hr_edge': {4: 64, 8: 128}, 'desk_scale': True},
    'full': {'simulations': 20, 'frames': 120, 'hr_edge': {4: 256, 8: 512}, 'desk_scale': False},
}


def load_yaml(path: pathlib.Path) -> dict[str, Any]:
    """Reads a YAML mapping

    Raises:
        ConfigError: unreadable file, bad YAML, or a non-mapping document
    """
    try:
        with open(path, encoding='utf-8') as f:
            data = yaml.load(f, Loader=_Loader)
    except OSError as e:
        raise ConfigError(f'Could not read config {path}: {e}') from e
    except yaml.YAMLError as e:
        raise ConfigError(f'Could not parse config {path}: {e}') from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f'Config {path} must be a mapping, got {type(data).__name__}')
    return data


def check_section(name: str, data: Any) -> None:
    """ Unified checking of one config section

    Raises:
        `ConfigWarning` if the section carries keys that will be ignored;
        `ConfigError` if the section is unusable
    """
    try:
        assert name in SECTIONS, f'unknown section {name!r}'
    except AssertionError as e:
        raise ConfigWarning(e) from e

    try:
        assert isinstance(data, dict), f'section {name!r} must be a mapping'
    except AssertionError as e:
        raise ConfigError(e) from e

    allowed = {f.name for f in dataclasses.fields(SECTIONS[name])} | _EXTRA_KEYS.get(name, set())
    unknown = sorted(set(data) - allowed)
    try:
        assert not unknown, f'section {name!r}: ignoring unknown keys {unknown}'
    except AssertionError as e:
        raise ConfigWarning(e) from e


def check_config(raw: dict[str, Any], logger: logging.Logger | None = None) -> dict[str, Any]:
    """Validates a loaded config mapping, dropping (and logging) what is ignorable

    Returns:
        the cleaned mapping

    Raises:
        ConfigError: for invalid top-level values or unusable sections
    """
    logger = logger or logging.getLogger(__name__)
    clean: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in TOP_LEVEL:
            logger.warning(f'Ignoring unknown config key {key!r}')
            continue
        if key not in SECTIONS:
            clean[key] = value
            continue
        try:
            check_section(key, value)
            clean[key] = dict(value)
        except ConfigWarning as e:
            logger.warning(e)
            clean[key] = {k: v for k, v in value.items()
                          if k in {f.name for f in dataclasses.fields(SECTIONS[key])}
                          | _EXTRA_KEYS.get(key, set())}

    try:
        assert clean.get('factor', 4) in (4, 8), f'factor must be 4 or 8, got {clean["factor"]}'
        assert clean.get('scale', 'desk') in PRESETS, \
            f'scale must be one of {sorted(PRESETS)}, got {clean["scale"]}'
        assert isinstance(clean.get('seed', 0), int) and clean.get('seed', 0) >= 0, \
            'seed must be a non-negative integer'
    except AssertionError as e:
        raise ConfigError(e) from e
    return clean


def _build(cls: type, values: dict[str, Any], section: str):
    try:
        return cls(**values)
    except (TypeError, ValidationError) as e:
        raise ConfigError(f'Invalid {section} settings: {e}') from e


@dataclass(frozen=True)
class Settings:
    """ Resolved run settings; the typed configs are built on demand """
    seed: int = 0
    factor: int = 4
    scale: str = 'desk'
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: pathlib.Path | None = None, *, logger: logging.Logger | None = None,
             **overrides) -> 'Settings':
        """Loads `path` (if given) and applies non-None CLI `overrides` of seed/factor/scale

        Raises:
            ConfigError: see `check_config`
        """
        raw = check_config(load_yaml(path), logger) if path else {}
        top = {k: raw[k] for k in ('seed', 'factor', 'scale') if k in raw}
        top.update({k: v for k, v in overrides.items() if v is not None})
        check_config(top, logger)
        return cls(sections={k: raw.get(k, {}) for k in SECTIONS}, **top)

    @property
    def preset(self) -> dict[str, Any]:
        """ Scale preset values """
        return PRESETS[self.scale]

    @property
    def simulations(self) -> int:
        """ Number of simulations for `gen-data` """
        return int(self.sections.get('simulation', {}).get('simulations',
                                                           self.preset['simulations']))

    def sim_config(self, index: int = 0, **overrides) -> SimConfig:
        """ Config of the `index`-th simulation; seeds are consecutive from `seed` """
        edge = self.preset['hr_edge'][self.factor]
        values: dict[str, Any] = {'hr_resolution': (edge, edge, edge),
                                  'frames': self.preset['frames']}
        values.update({k: v for k, v in self.sections.get('simulation', {}).items()
                       if k != 'simulations'})
        values.update({k: v for k, v in overrides.items() if v is not None})
        values['upscale_factor'] = self.factor
        values['seed'] = values.get('seed', self.seed) + index
        return _build(SimConfig, values, 'simulation')

    def augment_config(self) -> AugmentConfig:
        """ Augmentation settings """
        values = {'seed': self.seed, **self.sections.get('augment', {})}
        return _build(AugmentConfig, values, 'augment')

    def dataset_config(self) -> DatasetConfig:
        """ Shard-building settings """
        values = {'seed': self.seed, **self.sections.get('dataset', {})}
        return _build(DatasetConfig, values, 'dataset')

    def train_config(self, pass_index: int, *, desk_scale: bool | None = None,
                     loss_kind: LossKind | None = None) -> TrainConfig:
        """ Schedule for one pass, starting from the published constants """
        values = {'seed': self.seed, **self.sections.get('training', {})}
        if isinstance(values.get('adam'), dict):
            values['adam'] = _build(AdamConfig, values['adam'], 'training.adam')
        if isinstance(values.get('loss_kind'), str):
            try:
                values['loss_kind'] = LossKind(values['loss_kind'])
            except ValueError as e:
                raise ConfigError(f'Unknown loss kind {values["loss_kind"]!r}') from e
        if loss_kind is not None:
            values['loss_kind'] = loss_kind
        values['desk_scale'] = self.preset['desk_scale'] if desk_scale is None else desk_scale
        try:
            return TrainConfig.for_pass(pass_index, self.factor, **values)
        except (TypeError, ValidationError) as e:
            raise ConfigError(f'Invalid training settings: {e}') from e

    def inference_config(self, **overrides) -> InferenceConfig:
        """ Inference settings """
        values = {**self.sections.get('inference', {}),
                  **{k: v for k, v in overrides.items() if v is not None}}
        return _build(InferenceConfig, values, 'inference')

    def bench_config(self, **overrides) -> BenchConfig:
        """ Benchmark settings """
        values = {**self.sections.get('bench', {}),
                  **{k: v for k, v in overrides.items() if v is not None}}
        return _build(BenchConfig, values, 'bench')
