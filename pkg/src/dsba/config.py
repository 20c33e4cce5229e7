"""Run configuration: nested dataclasses with strict YAML (de)serialization.

Every field has a default, so an empty config file runs the synthetic
desk-scale experiment. Unknown keys are rejected with field-level diagnostics.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from .data import PoisonSchedule
from .errors import ConfigError
from .losses import LossCoefficients
from .trainer import TrainConfig

LOSS_NAMES = ("align", "perc", "dist", "eff", "ste", "cons")
OUTER_LOSSES = ("align", "perc", "dist")
INNER_LOSSES = ("eff", "ste", "cons")


@dataclass
class DatasetConfig:
    name: str = "synthetic-gaussian"
    root: str = "data"
    n: int = 512
    resize: int = 32
    num_classes: int = 10


@dataclass
class ModelConfig:
    feature_dim: int = 128
    encoder_width: int = 32
    generator_width: int = 16
    taps_width: int = 16


@dataclass
class PretrainConfig:
    epochs: int = 25
    batch_size: int = 256
    lr: float = 1e-3
    temperature: float = 0.5


@dataclass
class WeightConfig:
    outer_bases: tuple = (0.5, 0.3, 0.2)
    eta_attack: float = 0.01
    eta_preserve: float = 0.01
    eta_dist: float = 0.01
    eta_inner: float = 0.01
    eta_align: float = 0.01
    alpha_momentum: float = 0.9
    flip_distribution_gate: bool = False


@dataclass
class EvalConfig:
    probe_epochs: int = 200
    stealth_slice: int = 128


@dataclass
class DefenseConfig:
    enabled: bool = True
    n_overlays: int = 64
    strip_samples: int = 64
    nc_steps: int = 200
    nc_lambda: float = 0.01


@dataclass
class AttackConfig:
    target_class: int = 0


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    poison: PoisonSchedule = field(default_factory=PoisonSchedule)
    coefficients: LossCoefficients = field(default_factory=LossCoefficients)
    weights: WeightConfig = field(default_factory=WeightConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    disable_losses: tuple = ()
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in self.disable_losses:
            if name not in LOSS_NAMES:
                raise ConfigError(f"disable_losses: unknown loss {name!r}; "
                                  f"expected one of {LOSS_NAMES}")


def _build(cls, payload, path):
    """Construct a (possibly nested) dataclass, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(payload) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        spec = known[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(spec.type) or (
                isinstance(spec.default_factory, type)
                and dataclasses.is_dataclass(spec.default_factory)):
            kwargs[key] = _build(spec.default_factory, value, where)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in fields(obj):
            if f.name == "resource_limit_callback":  # not serializable; runtime-only
                continue
            out[f.name] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def config_from_dict(payload: dict | None) -> RunConfig:
    return _build(RunConfig, payload or {}, "")


def config_to_dict(config: RunConfig) -> dict:
    payload = _to_plain(config)
    # runtime-only scheduler memory is not part of the declarative config
    return payload


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    return config_from_dict(payload)


def save_config(config: RunConfig, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)


def section_hash(*payloads) -> str:
    digest = hashlib.sha256()
    for payload in payloads:
        digest.update(json.dumps(payload, sort_keys=True, default=str).encode())
    return digest.hexdigest()
