"""Run configuration: nested dataclasses loaded from JSON with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from jepalab.masking import MaskConfig
from jepalab.model import ENCODER_PRESETS, PREDICTOR_PRESETS, EncoderConfig, PredictorConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted path when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a directory path
    n_train: int = 2000
    n_eval: int = 1024
    corr: float = 0.8
    grid_objects: int = 1
    image_size: int = 32
    seed: int = 0
    eval_seed: int = 10_000


@dataclass
class ModelConfig:
    encoder: str = "vit-t/4"
    predictor: str = "vit-t/4"
    # explicit values override the preset
    depth: Optional[int] = None
    dim: Optional[int] = None
    heads: Optional[int] = None
    mlp_ratio: Optional[float] = None
    patch: Optional[int] = None
    predictor_depth: Optional[int] = None
    predictor_dim: Optional[int] = None
    predictor_heads: Optional[int] = None

    def encoder_config(self) -> EncoderConfig:
        if self.encoder not in ENCODER_PRESETS:
            raise ConfigError(f"unknown encoder preset {self.encoder!r}", "model.encoder")
        base = dataclasses.asdict(ENCODER_PRESETS[self.encoder])
        for k in ("depth", "dim", "heads", "mlp_ratio", "patch"):
            if getattr(self, k) is not None:
                base[k] = getattr(self, k)
        return EncoderConfig(**base)

    def predictor_config(self) -> PredictorConfig:
        if self.predictor not in PREDICTOR_PRESETS:
            raise ConfigError(f"unknown predictor preset {self.predictor!r}", "model.predictor")
        base = dataclasses.asdict(PREDICTOR_PRESETS[self.predictor])
        for k in ("depth", "dim", "heads"):
            v = getattr(self, f"predictor_{k}")
            if v is not None:
                base[k] = v
        return PredictorConfig(**base)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    max_lr: float = 1e-3
    final_lr: float = 1e-6
    warmup_epochs: int = 5
    wd_range: tuple[float, float] = (0.04, 0.4)
    ema_range: tuple[float, float] = (0.996, 1.0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "mse"  # "mse" | "smooth_l1"
    target_norm: bool = False  # extra parameter-free layer norm on teacher outputs
    log_every: int = 10
    checkpoint_every: int = 0  # steps; 0 -> once per epoch

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", "train.batch_size")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs must be < train.epochs", "train.warmup_epochs")
        if self.loss not in ("mse", "smooth_l1"):
            raise ConfigError(f"unknown loss {self.loss!r}", "train.loss")


@dataclass
class MetricsConfig:
    mode: str = "teacher"  # encoder used for embeddings: "teacher" | "student"
    n_embed: int = 1024
    rankme_eps: float = 1e-7
    lidar_n: int = 128
    lidar_q: int = 8
    lidar_delta: float = 1e-4
    lidar_eps: float = 1e-7


@dataclass
class ProbeConfig:
    optimizer: str = "lars"  # "lars" | "sgd_nesterov"
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 0.001
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    conditioning: bool = True
    inference_pool_kernel: int = 4
    inference_pool_stride: int = 4
    out_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> "RunConfig":
        self.train.validate()
        try:
            self.mask.validate()
            self.model.encoder_config()
            self.model.predictor_config()
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from err
        size = self.data.image_size
        if size % self.model.encoder_config().patch:
            raise ConfigError("data.image_size must be divisible by the patch size", "data.image_size")
        if self.metrics.mode not in ("teacher", "student"):
            raise ConfigError(f"unknown metrics.mode {self.metrics.mode!r}", "metrics.mode")
        if self.probe.optimizer not in ("lars", "sgd_nesterov"):
            raise ConfigError(f"unknown probe.optimizer {self.probe.optimizer!r}", "probe.optimizer")
        if not self.seeds:
            raise ConfigError("seeds must not be empty", "seeds")
        return self

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


# ---------------------------------------------------------------------------
# dict <-> dataclass
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(value: Any, tp, key: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key} must not be null", key)
    origin = typing.get_origin(tp)
    try:
        if dataclasses.is_dataclass(tp):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object", key)
            return _build(tp, value, key + ".")
        if origin is tuple:
            args = typing.get_args(tp)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            if len(value) != len(args):
                raise ConfigError(f"{key} expects {len(args)} values, got {len(value)}", key)
            return tuple(_coerce(v, a, key) for v, a in zip(value, args))
        if origin is list:
            (arg,) = typing.get_args(tp)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return [_coerce(v, arg, key) for v in value]
        if tp is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("on", "true", "1", "yes"):
                    return True
                if lowered in ("off", "false", "0", "no"):
                    return False
                raise ConfigError(f"{key} expects on/off, got {value!r}", key)
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{key} expects a boolean, got {value!r}", key)
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ConfigError(f"{key} expects an integer, got {value!r}", key)
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise ConfigError(f"{key} expects a number, got {value!r}", key)
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot interpret {value!r} ({err})", key) from err
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key {prefix + k!r}", prefix + k)
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {err}", prefix.rstrip(".") or None) from err


def _set_dotted(data: dict, cls, key: str, raw: Any) -> None:
    parts = key.split(".")
    node, node_cls = data, cls
    for i, part in enumerate(parts):
        hints = typing.get_type_hints(node_cls)
        if part not in hints or part not in {f.name for f in dataclasses.fields(node_cls)}:
            raise ConfigError(f"unknown config key {key!r}", key)
        tp, _ = _strip_optional(hints[part])
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(tp):
                raise ConfigError(f"{key} is a section, not a value", key)
            node[part] = raw
        else:
            if not dataclasses.is_dataclass(tp):
                raise ConfigError(f"unknown config key {key!r}", key)
            node = node.setdefault(part, {})
            node_cls = tp


def build_config(data: dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = json.loads(json.dumps(data or {}))
    for key, raw in (overrides or {}).items():
        _set_dotted(data, RunConfig, key, raw)
    return _build(RunConfig, data).validate()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file {path} does not exist") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    return build_config(data, overrides)


def from_dict(data: dict) -> RunConfig:
    return build_config(data)
