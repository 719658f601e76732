import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Type, TypeVar

from errors import ConfigError

VERSION = "0.1.0"

# Logging - can be overridden per process via CLI flags
LOG_LEVEL = os.getenv("W2R2_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("W2R2_LOG_FILE") or None

# Sweep worker pool size
SWEEP_WORKERS = int(os.getenv("W2R2_WORKERS", str(os.cpu_count() or 1)))

RELATIONS = ("leftmost", "rightmost", "nearest_to_anchor", "farthest_from_anchor", "none")
STOPGRAD_MODES = ("encoder_blocked", "none")
OPTIMIZERS = ("sgd", "adam")
OBJECTIVES = ("w2r2", "baseline")


def seed_override() -> Optional[int]:
    """Seed forced by W2R2_SEED, read at call time so smoke tests can set it."""
    raw = os.getenv("W2R2_SEED")
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"W2R2_SEED must be an integer, got {raw!r}")


@dataclass(frozen=True)
class WorldConfig:
    num_objects_min: int = 4
    num_objects_max: int = 8
    num_categories: int = 12
    rho: float = 0.5
    sigma2d: float = 0.05
    sigma3d: float = 0.02
    q_grid: float = 0.5
    size_min: float = 0.08
    size_max: float = 0.25
    relation_margin: float = 0.05
    max_attempts: int = 1000
    seed: int = 0
    train_count: int = 10000
    val_count: int = 2000

    def validate(self) -> None:
        if self.num_objects_min < 2:
            raise ConfigError("num_objects_min must be >= 2")
        if self.num_objects_max < self.num_objects_min:
            raise ConfigError("num_objects_max must be >= num_objects_min")
        if self.num_categories < 2:
            raise ConfigError("num_categories must be >= 2")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.sigma2d < 0 or self.sigma3d < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.q_grid <= 0:
            raise ConfigError("q_grid must be > 0")
        if not 0 < self.size_min <= self.size_max < 0.5:
            raise ConfigError("sizes must satisfy 0 < size_min <= size_max < 0.5")
        if self.relation_margin < 0:
            raise ConfigError("relation_margin must be >= 0")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.train_count < 0 or self.val_count < 0:
            raise ConfigError("split counts must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    d2d: int = 32
    d3d: int = 32
    dq: int = 16
    dh: int = 32
    n_max: int = 8
    init_scale: Optional[float] = None  # None -> 1/sqrt(fan_in) per layer
    seed: int = 0

    def validate(self) -> None:
        for name in ("d2d", "d3d", "dq", "dh", "n_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.init_scale is not None and self.init_scale <= 0:
            raise ConfigError("init_scale must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.5
    mu: float = 0.7
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    stopgrad_mode: str = "encoder_blocked"
    optimizer: str = "adam"
    eval_every: int = 0  # 0 -> evaluate at the end of every epoch
    objective: str = "w2r2"
    box_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu must be in (0, 1), got {self.mu}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.stopgrad_mode not in STOPGRAD_MODES:
            raise ConfigError(f"stopgrad_mode must be one of {STOPGRAD_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.box_weight < 0:
            raise ConfigError("box_weight must be >= 0")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.objective == "baseline" else self.lam


ConfigT = TypeVar("ConfigT", WorldConfig, ModelConfig, TrainConfig)

# JSON keys that are not valid Python identifiers
_KEY_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}


def _check_type(cls_name: str, key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{cls_name}.{key}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{cls_name}.{key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float) or (default is None and key == "init_scale"):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{cls_name}.{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{cls_name}.{key}: expected string, got {value!r}")
        return value
    return value


def config_from_dict(cls: Type[ConfigT], data: Dict[str, Any]) -> ConfigT:
    """Build a config from a JSON mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for raw_key, value in data.items():
        key = _KEY_ALIASES.get(raw_key, raw_key)
        if key not in known:
            raise ConfigError(f"{cls.__name__}: unknown key {raw_key!r}")
        kwargs[key] = _check_type(cls.__name__, raw_key, value, getattr(defaults, key))
    cfg = cls(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: Any) -> Dict[str, Any]:
    return {_REVERSE_ALIASES.get(k, k): v for k, v in asdict(cfg).items()}


def load_config(path: str, cls: Type[ConfigT]) -> ConfigT:
    """Load a config JSON file; any problem is a ConfigError."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        return config_from_dict(cls, data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}")


def apply_seed_override(cfg: ConfigT) -> ConfigT:
    seed = seed_override()
    if seed is None:
        return cfg
    return replace(cfg, seed=seed)
