"""Run configuration: flat key=value files parsed strictly into dataclasses."""
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from spikeflow.errors import ConfigError
from spikeflow.lif import LifConfig
from spikeflow.losses import LossConfig
from spikeflow.models import ModelSpec
from spikeflow.trainer import TrainConfig

TRUE_WORDS = ('1', 'true', 'yes', 'on')
FALSE_WORDS = ('0', 'false', 'no', 'off')


@dataclass
class RunConfig:
    """Everything one training run needs."""

    model: ModelSpec = field(default_factory=ModelSpec)
    lif: LifConfig = field(default_factory=LifConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @classmethod
    def ssl_defaults(cls) -> 'RunConfig':
        return cls(loss=LossConfig(mode='ssl'), train=TrainConfig.ssl())

    @classmethod
    def supervised_defaults(cls) -> 'RunConfig':
        return cls(loss=LossConfig(mode='supervised'), train=TrainConfig.supervised())

    def items(self) -> List[Tuple[str, object]]:
        """Every documented key with its resolved value, in section order."""
        pairs = []
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                pairs.append((f'{section}.{f.name}', getattr(getattr(self, section), f.name)))
        pairs.append(('seed', self.seed))
        return pairs

    def to_text(self) -> str:
        return '\n'.join(f'{key}={_format(value)}' for key, value in self.items())


SECTIONS = ('model', 'lif', 'loss', 'train')


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            word = raw.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse '{raw}' as {kind.__name__}") from exc


def _field_types(section: str) -> Dict[str, type]:
    sample = getattr(RunConfig(), section)
    return {f.name: type(getattr(sample, f.name)) for f in dataclasses.fields(sample)}


def known_keys() -> List[str]:
    return [key for key, _ in RunConfig().items()]


def parse_pairs(text: str, source: str = '<config>') -> Dict[str, str]:
    """key=value lines; '#' starts a comment. Duplicate keys are rejected."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{line}'")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        pairs[key] = value
    return pairs


def build_config(pairs: Dict[str, str]) -> RunConfig:
    """Apply overrides to the preset selected by loss.mode (ssl when absent)."""
    known = set(known_keys())
    unknown = sorted(k for k in pairs if k not in known)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")

    mode = pairs.get('loss.mode', 'ssl')
    if mode == 'supervised':
        base = RunConfig.supervised_defaults()
    elif mode == 'ssl':
        base = RunConfig.ssl_defaults()
    else:
        raise ConfigError(f"loss.mode must be 'ssl' or 'supervised', got '{mode}'")

    sections = {}
    for section in SECTIONS:
        types = _field_types(section)
        overrides = {}
        for name, kind in types.items():
            key = f'{section}.{name}'
            if key in pairs:
                overrides[name] = _coerce(key, pairs[key], kind)
        # dataclasses.replace re-runs validation in __post_init__.
        sections[section] = dataclasses.replace(getattr(base, section), **overrides)
    seed = _coerce('seed', pairs['seed'], int) if 'seed' in pairs else base.seed
    return RunConfig(seed=seed, **sections)


def parse_config(text: str, source: str = '<config>') -> RunConfig:
    return build_config(parse_pairs(text, source))


def load_config(path: os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
