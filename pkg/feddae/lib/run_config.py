"""
Run configuration for FedDAE training and evaluation.

Resolution order: dataclass defaults < config file (YAML or JSON mapping)
< explicit CLI flags. Keys accept hyphens or underscores. Every run echoes
the resolved config as config.resolved.json next to its outputs.
"""

import json
import logging
import types
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Literal, Union, get_args, get_origin, get_type_hints

import yaml
from errors import ConfigurationError
from workspace import get_runs_dir

logger = logging.getLogger(f"feddae.{__name__}")

RESOLVED_CONFIG_NAME = "config.resolved.json"


@dataclass
class RunConfig:
    """Everything that determines a run's results."""

    # Data
    dataset: str = "ml-100k"
    dataset_format: Literal["movielens-tab", "generic-csv"] = "movielens-tab"
    delimiter: str | None = None
    min_interactions: int = 10
    negatives_per_positive: int = 4

    # Model
    latent_dim: int = 256
    hidden_dim: int = 200
    n_layers: int = 3
    dropout_rate: float = 0.5
    fixed_weight: float | None = None  # global-encoder weight; None = learned gate

    # Training
    mode: Literal["federated", "central"] = "federated"
    update_rule: Literal["adam", "plain-sgd"] = "adam"
    lr: float = 1e-3
    rounds: int = 100
    local_epochs: int = 10
    clients_per_round: int | None = None  # None = all clients
    exclusive_rounds: bool = False
    batch_size: int = 2048  # central mode only
    beta_cap: float = 1.0
    anneal_steps: int | None = None  # None = 40% of all optimizer steps
    noise_variance: float = 0.0
    loss_mode: Literal["full", "masked"] = "full"
    resample_negatives: bool = False
    client_weighting: Literal["uniform", "interactions"] = "uniform"

    # Execution
    seed: int = 0
    workers: int = 1
    client_store: Literal["memory", "sqlite"] = "memory"

    # Evaluation and outputs
    top_k: int = 20
    eval_interval: int = 1
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    output_dir: str | None = None

    def validate(self) -> "RunConfig":
        for key in ("min_interactions", "latent_dim", "hidden_dim", "n_layers", "local_epochs", "batch_size"):
            _require(key, getattr(self, key) >= 1, "must be >= 1")
        for key in ("workers", "top_k", "eval_interval"):
            _require(key, getattr(self, key) >= 1, "must be >= 1")
        _require("rounds", self.rounds >= 0, "must be >= 0")
        _require("checkpoint_interval", self.checkpoint_interval >= 0, "must be >= 0")
        _require("negatives_per_positive", self.negatives_per_positive >= 0, "must be >= 0")
        if self.clients_per_round is not None:
            _require("clients_per_round", self.clients_per_round >= 1, "must be >= 1")
        _require("lr", self.lr >= 0.0, "must be >= 0")
        _require("noise_variance", self.noise_variance >= 0.0, "must be >= 0")
        _require("dropout_rate", 0.0 <= self.dropout_rate < 1.0, "must lie in [0, 1)")
        _require("beta_cap", 0.0 <= self.beta_cap <= 1.0, "must lie in [0, 1]")
        if self.anneal_steps is not None:
            _require("anneal_steps", self.anneal_steps >= 0, "must be >= 0")
        if self.fixed_weight is not None:
            _require("fixed_weight", 0.0 <= self.fixed_weight <= 1.0, "must lie in [0, 1]")
        if self.loss_mode == "masked":
            _require("negatives_per_positive", self.negatives_per_positive >= 1, "masked loss needs negatives")
        return self

    def participants_per_round(self, n_clients: int) -> int:
        """n_s for a dataset of n_clients users, checked against the participation rule."""
        n_s = n_clients if self.clients_per_round is None else self.clients_per_round
        if n_s > n_clients:
            raise ConfigurationError("clients_per_round", f"{n_s} exceeds the {n_clients} available clients")
        if self.exclusive_rounds and 2 * n_s > n_clients:
            raise ConfigurationError(
                "exclusive_rounds",
                f"no client may join consecutive rounds, which needs 2 * n_s <= n (n_s={n_s}, n={n_clients}); "
                "lower clients_per_round or disable exclusive_rounds",
            )
        return n_s

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return get_runs_dir() / f"{self.mode}-seed{self.seed}"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write_resolved(self, output_dir: Path) -> Path:
        path = output_dir / RESOLVED_CONFIG_NAME
        output_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        return cls(**_normalize(values)).validate()


def _require(key: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigurationError(key, message)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = get_origin(hint)
    if origin in (Union, types.UnionType):
        if value is None:
            return None
        (inner,) = [a for a in get_args(hint) if a is not type(None)]
        return _coerce(key, value, inner)
    if origin is Literal:
        if value not in get_args(hint):
            raise ConfigurationError(key, f"{value!r} is not one of {list(get_args(hint))}")
        return value
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigurationError(key, f"expected a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigurationError(key, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(key, f"expected an integer, got {value!r}") from e
    if hint is float:
        if isinstance(value, bool):
            raise ConfigurationError(key, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(key, f"expected a number, got {value!r}") from e
    if hint is str:
        return str(value)
    return value


def _normalize(values: dict[str, Any]) -> dict[str, Any]:
    """Map hyphenated keys to field names and coerce values; unknown keys are errors."""
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    normalized = {}
    for raw_key, value in values.items():
        key = str(raw_key).replace("-", "_")
        if key not in known:
            raise ConfigurationError(key, "unknown configuration key")
        normalized[key] = _coerce(key, value, hints[key])
    return normalized


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a YAML or JSON mapping; an empty file is an empty mapping."""
    if not path.exists():
        raise ConfigurationError("config", f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (yaml.YAMLError, OSError) as e:
        raise ConfigurationError("config", f"cannot parse {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError("config", f"{path} must hold a mapping of keys to values")
    return data


def resolve_run_config(config_path: Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values: dict[str, Any] = {}
    if config_path is not None:
        values.update(_normalize(load_config_file(config_path)))
        logger.debug("Loaded %d keys from %s", len(values), config_path)
    if overrides:
        values.update(_normalize(overrides))
    return RunConfig(**values).validate()
