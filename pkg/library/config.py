import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import yaml

from library.attention import AttentionConfig
from library.data import SyntheticTaskSpec
from library.errors import ConfigurationError
from library.log import logger
from library.model import SharedEncoderConfig
from library.training import Stage, TrainConfig

RESOLVED_FILE = "config.resolved.yaml"
DEFAULT_CONFIG = "config.yaml"


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    beam: int = 12
    max_len: int = 0    # 0: bounded by the number of encoder frames

    def validate(self):
        if self.mode not in ("greedy", "beam"):
            raise ConfigurationError(f"decode.mode must be greedy or beam, got '{self.mode}'")
        if self.beam < 1 or self.max_len < 0:
            raise ConfigurationError("decode.beam must be >= 1 and decode.max_len >= 0")
        return self


@dataclass
class SweepConfig:
    grid: List[float] = field(default_factory=lambda: [0.0, 0.5, 0.85, 0.9, 0.95, 1.0])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 30
    ter_threshold: float = 0.5

    def validate(self):
        if not self.grid or any(not 0.0 <= lam <= 1.0 for lam in self.grid):
            raise ConfigurationError(f"sweep.grid must be non-empty with values in [0, 1], got {self.grid}")
        if not self.seeds or self.epochs < 1:
            raise ConfigurationError("sweep.seeds must be non-empty and sweep.epochs >= 1")
        return self


SECTIONS = {
    "data": SyntheticTaskSpec,
    "model": SharedEncoderConfig,
    "train": TrainConfig,
    "attention_model": AttentionConfig,
    "decode": DecodeConfig,
    "sweep": SweepConfig,
}
STAGE_SECTIONS = tuple(stage.value for stage in Stage)


def load_yaml(configfile):
    with open(configfile, "r") as stream:
        yamlconfig = yaml.safe_load(stream)
        return yamlconfig


def _build(cls, values: Dict[str, Any], section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"section '{section}': {e}")


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass
class RunConfig:
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: SharedEncoderConfig = field(default_factory=SharedEncoderConfig)
    train: Dict[str, Any] = field(default_factory=dict)
    stages: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    attention_model: AttentionConfig = field(default_factory=AttentionConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def train_config(self, stage: str, **overrides) -> TrainConfig:
        """ `train` defaults, then the stage section, then explicit overrides """
        if stage not in STAGE_SECTIONS:
            raise ConfigurationError(f"stage must be one of {list(STAGE_SECTIONS)}, got '{stage}'")
        values = dict(self.train)
        values.update(self.stages.get(stage, {}))
        values.update({k: v for k, v in overrides.items() if v is not None})
        values["stage"] = stage
        return _build(TrainConfig, values, stage).resolved()

    def to_dict(self) -> dict:
        out = {"data": _plain(self.data), "model": _plain(self.model), "train": _plain(self.train)}
        for stage in STAGE_SECTIONS:
            if self.stages.get(stage):
                out[stage] = _plain(self.stages[stage])
        out.update({"attention_model": _plain(self.attention_model), "decode": _plain(self.decode),
                    "sweep": _plain(self.sweep)})
        return out

    def write_resolved(self, run_dir: str, extra: Optional[dict] = None) -> str:
        os.makedirs(run_dir, exist_ok=True)
        path = os.path.join(run_dir, RESOLVED_FILE)
        content = self.to_dict()
        if extra:
            content["run"] = _plain(extra)
        with open(path, "w") as stream:
            yaml.safe_dump(content, stream, sort_keys=False)
        return path


def parse_overrides(args: Sequence[str]) -> Dict[str, Any]:
    """ ['--train.epochs', '5', ...] -> {'train.epochs': 5}; values are parsed as YAML scalars or lists """
    overrides = {}
    args = list(args)
    i = 0
    while i < len(args):
        key = args[i]
        if not key.startswith("--") or "." not in key:
            raise ConfigurationError(f"unrecognized argument '{key}' (overrides look like --section.key value)")
        key = key[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigurationError(f"override --{key} needs a value")
            raw = args[i + 1]
            i += 2
        try:
            overrides[key] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse value of --{key}: {e}")
    return overrides


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    raw = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            raw = load_yaml(path) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"{path}: {e}")
        logger.debug(f"Loaded config from {path}")
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping of sections")
    raw = {section: dict(values or {}) for section, values in raw.items()}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override '{dotted}' must look like section.key")
        raw.setdefault(section, {})[key] = value

    unknown = sorted(set(raw) - set(SECTIONS) - set(STAGE_SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    config = RunConfig(
        data=_build(SyntheticTaskSpec, raw.get("data", {}), "data").validate(),
        model=_build(SharedEncoderConfig, raw.get("model", {}), "model").validate(),
        attention_model=_build(AttentionConfig, raw.get("attention_model", {}), "attention_model").validate(),
        decode=_build(DecodeConfig, raw.get("decode", {}), "decode").validate(),
        sweep=_build(SweepConfig, raw.get("sweep", {}), "sweep").validate(),
    )
    _build(TrainConfig, raw.get("train", {}), "train")
    config.train = raw.get("train", {})
    for stage in STAGE_SECTIONS:
        if stage in raw:
            _build(TrainConfig, raw[stage], stage)
            config.stages[stage] = raw[stage]
    return config
