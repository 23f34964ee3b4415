"""Strict JSON pipeline configuration.

Unknown keys are rejected with a dotted field path; omitted keys fall back
to defaults.  The fine-tune section inherits any unset field from the
training section so the recalibration stage reuses stage-1 hyperparameters
unless explicitly overridden.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError


@dataclass
class DataSection:
    image_size: int = 64
    n_train: int = 200
    n_test_normal: int = 50
    n_test_anom: int = 50
    object_radius: float = 0.32
    background_amplitude: float = 0.13
    variance_factor: float = 10.0
    defect_kinds: list[str] = field(default_factory=lambda: ["patch", "scratch", "hole"])
    defect_size_min: int = 3
    defect_size_max: int = 7


@dataclass
class ModelSection:
    teacher_channels: int = 16
    hidden_channels: int = 16
    ae_hidden_channels: int = 16
    latent_dim: int = 16


@dataclass
class PretrainSection:
    iterations: int = 3000
    lr: float = 1e-3


@dataclass
class TrainSection:
    iterations: int = 2000
    lr: float = 5e-4
    lambda_ts: float = 1.0
    lambda_aes: float = 1.0
    lambda_tae: float = 1.0
    hard_fraction: float = 0.1
    batch: int = 1


@dataclass
class FinetuneSection:
    # None inherits the corresponding training-section value
    iterations: int = 1500
    lr: float | None = None
    lambda_ts: float | None = None
    lambda_aes: float | None = None
    lambda_tae: float | None = None
    hard_fraction: float | None = None
    batch: int | None = None


@dataclass
class QuantSection:
    calibration_size: int = 32
    sweeps: int = 2


@dataclass
class HqsSection:
    thresholds: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75])


@dataclass
class EvalSection:
    fpr_limit: float = 0.3


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    quantization: QuantSection = field(default_factory=QuantSection)
    hqs: HqsSection = field(default_factory=HqsSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def finetune_resolved(self) -> TrainSection:
        ft = self.finetune
        return TrainSection(
            iterations=ft.iterations,
            lr=self.train.lr if ft.lr is None else ft.lr,
            lambda_ts=self.train.lambda_ts if ft.lambda_ts is None else ft.lambda_ts,
            lambda_aes=self.train.lambda_aes if ft.lambda_aes is None else ft.lambda_aes,
            lambda_tae=self.train.lambda_tae if ft.lambda_tae is None else ft.lambda_tae,
            hard_fraction=(self.train.hard_fraction if ft.hard_fraction is None
                           else ft.hard_fraction),
            batch=self.train.batch if ft.batch is None else ft.batch,
        )


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "train": TrainSection,
    "finetune": FinetuneSection,
    "quantization": QuantSection,
    "hqs": HqsSection,
    "eval": EvalSection,
}
_SCALARS = {"seed": int, "out_dir": str}


# expected element types for fields whose default is None (inherited)
_OPTIONAL_TYPES = {"lr": float, "lambda_ts": float, "lambda_aes": float,
                   "lambda_tae": float, "hard_fraction": float, "batch": int}


def _coerce(value, want, where: str):
    if isinstance(value, bool):
        raise ConfigError(f"'{where}': booleans are not valid here")
    if want is float and isinstance(value, (int, float)):
        return float(value)
    if want is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"'{where}': expected an integer, got {value}")
        if isinstance(value, (int, float)):
            return int(value)
    if not isinstance(value, want):
        raise ConfigError(f"'{where}': expected {want.__name__}, got {type(value).__name__}")
    return value


def _fill_section(cls, raw: dict, path: str):
    section = cls()
    known = set(section.__dataclass_fields__)
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        where = f"{path}.{key}"
        current = getattr(section, key)
        if current is None:
            value = _coerce(value, _OPTIONAL_TYPES[key], where)
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"'{where}': expected a list")
            elem = type(current[0]) if current else str
            value = [_coerce(v, elem, where) for v in value]
        else:
            value = _coerce(value, type(current), where)
        setattr(section, key, value)
    return section


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    cfg = PipelineConfig()
    for key, value in raw.items():
        if key in _SCALARS:
            if not isinstance(value, _SCALARS[key]) or isinstance(value, bool):
                raise ConfigError(f"'{key}': expected {_SCALARS[key].__name__}")
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}': expected a JSON object")
            setattr(cfg, key, _fill_section(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return cfg


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
