import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Tuple

from dotenv import load_dotenv

from errors import ConfigError


load_dotenv()

__version__ = "0.1.0"


@dataclass
class Settings:
    # Where CLI commands write when --out is not given
    out_root: str = os.environ.get("GMAE_OUT_ROOT", "runs")

    # Minimum level emitted by logger.log (debug / info / warning / error)
    log_level: str = os.environ.get("GMAE_LOG_LEVEL", "info").lower()

    # Default sweep parallelism (--jobs overrides)
    jobs: int = int(os.environ.get("GMAE_JOBS", "1"))

    # Stamped into every run manifest
    code_version: str = os.environ.get("GMAE_CODE_VERSION", f"gmae-{__version__}")


settings = Settings()


# ---------- TRAINING CONFIG ----------

NORMALIZE_MODES = ("minmax", "zscore", "none")
PAIRING_MODES = ("cycle", "all")
ACTIVATIONS = ("relu", "sigmoid", "tanh")


@dataclass(frozen=True)
class TrainConfig:
    """
    Every knob of a training run. Field names double as the keys of the
    JSON config file; unknown keys are rejected by load_train_config.
    """

    dim_z: int = 64
    dim_c: int = 64
    alpha: float = 0.01
    beta: float = 0.01
    epochs: int = 500
    learning_rate: float = 1e-3
    seed: int = 42
    # 0 -> number of distinct labels in the dataset
    n_clusters: int = 0
    n_omega: int = 5
    missing_ratio: float = 0.0

    encoder_widths: Tuple[int, ...] = (512, 256)
    adapter_width: int = 512
    trunk_widths: Tuple[int, ...] = (256,)
    decoder_widths: Tuple[int, ...] = (256, 512)
    discriminator_widths: Tuple[int, ...] = (128,)
    activation: str = "relu"

    adversarial_pairing: str = "cycle"
    neighbor_refresh: int = 10
    normalize: str = "minmax"

    # ablation switches for the loss groups
    use_cor_dis: bool = True
    use_ent: bool = True

    # k-means on the current Q every N epochs (0 = never)
    eval_every: int = 0
    kmeans_restarts: int = 10
    kmeans_max_iters: int = 300

    # 0 = full batch
    batch_size: int = 0

    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be non-negative (alpha={self.alpha}, beta={self.beta})")
        if self.dim_z < 1 or self.dim_c < 1:
            raise ConfigError(f"dim_z and dim_c must be >= 1 (dim_z={self.dim_z}, dim_c={self.dim_c})")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.n_omega < 1:
            raise ConfigError(f"n_omega must be >= 1, got {self.n_omega}")
        if self.n_clusters < 0:
            raise ConfigError(f"n_clusters must be >= 0, got {self.n_clusters}")
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ConfigError(f"missing_ratio must lie in [0, 1), got {self.missing_ratio}")
        widths = (
            list(self.encoder_widths)
            + [self.adapter_width]
            + list(self.trunk_widths)
            + list(self.decoder_widths)
            + list(self.discriminator_widths)
        )
        if not self.encoder_widths or not self.trunk_widths:
            raise ConfigError("encoder_widths and trunk_widths need at least one width")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.adversarial_pairing not in PAIRING_MODES:
            raise ConfigError(
                f"adversarial_pairing must be one of {PAIRING_MODES}, got {self.adversarial_pairing!r}"
            )
        if self.normalize not in NORMALIZE_MODES:
            raise ConfigError(f"normalize must be one of {NORMALIZE_MODES}, got {self.normalize!r}")
        if self.neighbor_refresh < 1:
            raise ConfigError(f"neighbor_refresh must be >= 1, got {self.neighbor_refresh}")
        if self.eval_every < 0 or self.batch_size < 0:
            raise ConfigError("eval_every and batch_size must be >= 0")
        if self.kmeans_restarts < 1 or self.kmeans_max_iters < 1:
            raise ConfigError("kmeans_restarts and kmeans_max_iters must be >= 1")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        return replace(self, **overrides).validate()


def _coerce(name: str, default: Any, value: Any) -> Any:
    """Check a JSON value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} expects a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"config key {name!r} expects a list of integers, got {value!r}")
        return tuple(value)
    return value


def train_config_from_dict(raw: Dict[str, Any]) -> TrainConfig:
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {name: _coerce(name, defaults[name], value) for name, value in raw.items()}
    return TrainConfig(**values).validate()


def load_train_config(path: str) -> TrainConfig:
    """
    Parse a JSON config file whose keys mirror TrainConfig.

    Missing keys keep their defaults; unknown keys and mistyped values
    raise ConfigError naming the key.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return train_config_from_dict(raw)
