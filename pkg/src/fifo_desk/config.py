"""Configuration management for fifo-desk.

Provides YAML-based run configuration with environment variable and
command-line overrides.
Config file location: ~/.config/fifo-desk/config.yaml (or --config PATH)
"""

import logging
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from fifo_desk.errors import ConfigError
from fifo_desk.fifo_types import DomainPair, FogParams, FsmDirection, FsmRepresentation
from fifo_desk.optim import OPTIMIZER_REGISTRY

logger = logging.getLogger(__name__)

ENV_PREFIX = "FIFO_DESK_"
KNOWN_TAPS = ("C1", "R1", "R2", "R3")

# Default config file template with comments
DEFAULT_CONFIG_TEMPLATE = """\
# fifo-desk run configuration
# Location: ~/.config/fifo-desk/config.yaml (or pass --config PATH)
#
# Flat "key: value" pairs. Precedence: command-line flag > environment
# variable (prefix FIFO_DESK_, e.g. FIFO_DESK_LAMBDA_FSM) > this file > defaults.
# Run 'fifo-desk init' to regenerate defaults.

# All randomness derives from this seed
master_seed: 0

# Dataset generation
dataset_root: data
image_size: 64
num_classes: 8
train_cw: 400          # each CW image also gets a paired SF counterpart
train_rf: 400
eval_cw: 100
eval_rf: 100
beta: 0.005            # attenuation coefficient of the synthetic fog, 1/m
airlight: [0.9, 0.9, 0.92]
rf_beta_range: [0.5, 2.0]
rf_airlight_jitter: 0.1
rf_noise_sigma: 0.01
gen_workers: 1

# Segmentation network and fog-pass filters
width_base: 16
leaky_slope: 0.01
tap_layers: [C1, R1]   # any of C1, R1, R2, R3
factor_dim: 64

# Losses
margin: 0.1
lambda_fsm: 5.0e-8
lambda_con: 1.0e-4
fsm_direction: bidirectional     # bidirectional, fog_to_clear, clear_to_fog
fsm_representation: fog_factor   # fog_factor or gram
domain_pairs: [CW-SF, CW-RF, SF-RF]
subbatch_reduction: mean         # mean or sum within each domain-pair slice

# Schedule
batch_per_domain: 4
hflip: true
pretrain_iters: 2000   # CW-only supervised pretraining
warmup_iters: 500      # filter-only iterations (counted within total_iters)
total_iters: 6000
init_checkpoint: null  # start from a checkpoint and skip pretraining
checkpoint_interval: 1000
log_every: 50

# Optimizers
seg_optimizer: SGD
lr_encoder: 6.0e-4
lr_decoder: 6.0e-3
momentum: 0.9
poly_power: 0.5
filter_optimizer: Adamax
filter_lr: {C1: 5.0e-4, R1: 1.0e-3, R2: 1.0e-3, R3: 1.0e-3}
adamax_beta1: 0.9
adamax_beta2: 0.999
adamax_eps: 1.0e-8

# Analysis
content_filter_iters: 300
content_filter_lr: 1.0e-3
independence_k: 200
kmeans_max_iters: 300

# Logging
log_level: INFO       # DEBUG, INFO, WARNING, ERROR
log_file: null        # Optional log file path
"""


@dataclass
class RunConfig:
    """Complete, serializable description of a data-generation, training or analysis run."""

    master_seed: int = 0

    dataset_root: str = "data"
    image_size: int = 64
    num_classes: int = 8
    train_cw: int = 400
    train_rf: int = 400
    eval_cw: int = 100
    eval_rf: int = 100
    beta: float = 0.005
    airlight: list[float] = field(default_factory=lambda: [0.9, 0.9, 0.92])
    rf_beta_range: list[float] = field(default_factory=lambda: [0.5, 2.0])
    rf_airlight_jitter: float = 0.1
    rf_noise_sigma: float = 0.01
    gen_workers: int = 1

    width_base: int = 16
    leaky_slope: float = 0.01
    tap_layers: list[str] = field(default_factory=lambda: ["C1", "R1"])
    factor_dim: int = 64

    margin: float = 0.1
    lambda_fsm: float = 5e-8
    lambda_con: float = 1e-4
    fsm_direction: str = "bidirectional"
    fsm_representation: str = "fog_factor"
    domain_pairs: list[str] = field(default_factory=lambda: ["CW-SF", "CW-RF", "SF-RF"])
    subbatch_reduction: str = "mean"

    batch_per_domain: int = 4
    hflip: bool = True
    pretrain_iters: int = 2000
    warmup_iters: int = 500
    total_iters: int = 6000
    init_checkpoint: str | None = None
    checkpoint_interval: int = 1000
    log_every: int = 50

    seg_optimizer: str = "SGD"
    lr_encoder: float = 6e-4
    lr_decoder: float = 6e-3
    momentum: float = 0.9
    poly_power: float = 0.5
    filter_optimizer: str = "Adamax"
    filter_lr: dict[str, float] = field(
        default_factory=lambda: {"C1": 5e-4, "R1": 1e-3, "R2": 1e-3, "R3": 1e-3}
    )
    adamax_beta1: float = 0.9
    adamax_beta2: float = 0.999
    adamax_eps: float = 1e-8

    content_filter_iters: int = 300
    content_filter_lr: float = 1e-3
    independence_k: int = 200
    kmeans_max_iters: int = 300

    log_level: str = "INFO"
    log_file: str | None = None

    @property
    def direction(self) -> FsmDirection:
        return FsmDirection(self.fsm_direction)

    @property
    def representation(self) -> FsmRepresentation:
        return FsmRepresentation(self.fsm_representation)

    @property
    def pairs(self) -> tuple[DomainPair, ...]:
        return tuple(DomainPair.parse(p) for p in self.domain_pairs)

    def fog_params(self) -> FogParams:
        r, g, b = self.airlight
        return FogParams(beta=self.beta, airlight=(r, g, b))

    def filter_lr_for(self, tap: str) -> float:
        if tap not in self.filter_lr:
            msg = f"No filter learning rate configured for tap {tap!r}"
            raise ConfigError(msg)
        return self.filter_lr[tap]

    def validate(self) -> "RunConfig":
        """Check cross-field invariants.

        Returns:
            self, for chaining

        Raises:
            ConfigError: Listing every violated invariant
        """
        problems: list[str] = []
        for name in ("train_cw", "train_rf", "eval_cw", "eval_rf"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        if self.image_size < 16 or self.image_size % 4:
            problems.append("image_size must be a multiple of 4 and at least 16")
        if not 4 <= self.num_classes <= 12:
            problems.append("num_classes must lie in [4, 12]")
        if not 8 <= self.width_base <= 64:
            problems.append("width_base must lie in [8, 64]")
        if self.beta < 0:
            problems.append("beta must be non-negative")
        if len(self.airlight) != 3 or any(not 0 <= a <= 1 for a in self.airlight):
            problems.append("airlight must be three values in [0, 1]")
        if len(self.rf_beta_range) != 2 or not 0 < self.rf_beta_range[0] <= self.rf_beta_range[1]:
            problems.append("rf_beta_range must be [low, high] with 0 < low <= high")
        if not self.tap_layers or any(t not in KNOWN_TAPS for t in self.tap_layers):
            problems.append(f"tap_layers must be a non-empty subset of {list(KNOWN_TAPS)}")
        if len(set(self.tap_layers)) != len(self.tap_layers):
            problems.append("tap_layers must not repeat")
        if self.factor_dim < 1:
            problems.append("factor_dim must be positive")
        if not 0 < self.margin < 2:
            problems.append("margin must lie in (0, 2)")
        if self.lambda_fsm < 0 or self.lambda_con < 0:
            problems.append("loss weights must be non-negative")
        if self.batch_per_domain < 2:
            problems.append("batch_per_domain must be at least 2")
        if self.pretrain_iters < 0 or self.warmup_iters < 0:
            problems.append("iteration counts must be non-negative")
        if self.total_iters < 1 or self.warmup_iters > self.total_iters:
            problems.append("total_iters must be positive and not below warmup_iters")
        rates = [self.lr_encoder, self.lr_decoder, self.content_filter_lr]
        rates += [self.filter_lr.get(t, 0.0) for t in self.tap_layers]
        if any(r <= 0 for r in rates):
            problems.append("all learning rates must be positive (filter_lr needs every tap)")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if self.poly_power <= 0:
            problems.append("poly_power must be positive")
        for role in ("seg_optimizer", "filter_optimizer"):
            if getattr(self, role) not in OPTIMIZER_REGISTRY:
                problems.append(f"{role} must be one of {list(OPTIMIZER_REGISTRY)}")
        if self.subbatch_reduction not in ("mean", "sum"):
            problems.append("subbatch_reduction must be 'mean' or 'sum'")
        if self.checkpoint_interval < 1 or self.log_every < 1:
            problems.append("checkpoint_interval and log_every must be positive")
        if self.independence_k < 1 or self.kmeans_max_iters < 1:
            problems.append("independence_k and kmeans_max_iters must be positive")
        for value, enum_type in (
            (self.fsm_direction, FsmDirection),
            (self.fsm_representation, FsmRepresentation),
        ):
            try:
                enum_type(value)
            except ValueError:
                problems.append(f"invalid {enum_type.__name__} value {value!r}")
        try:
            pairs = self.pairs
            if not pairs or len(set(pairs)) != len(pairs):
                problems.append("domain_pairs must be a non-empty list without repeats")
        except ConfigError as e:
            problems.append(str(e))

        if problems:
            msg = "Invalid configuration: " + "; ".join(problems)
            raise ConfigError(msg)
        return self


# Global config path override (set via --config flag)
_config_path_override: Path | None = None


def set_config_path(path: Path | None) -> None:
    """Set a custom config file path.

    Args:
        path: Custom config file path, or None to use default
    """
    global _config_path_override
    _config_path_override = path


def get_config_path() -> Path:
    """Get the config file path.

    Returns the custom path if set via set_config_path() or FIFO_DESK_CONFIG
    environment variable, otherwise uses XDG_CONFIG_HOME or ~/.config.

    Returns:
        Path to the config file
    """
    if _config_path_override is not None:
        return _config_path_override

    if config_env := os.environ.get(f"{ENV_PREFIX}CONFIG"):
        return Path(config_env)

    xdg_config = os.environ.get("XDG_CONFIG_HOME")
    base = Path(xdg_config) if xdg_config else Path.home() / ".config"
    return base / "fifo-desk" / "config.yaml"


def _field_types() -> dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def _coerce(key: str, value: Any, target: Any) -> Any:
    """Convert a file, environment or flag value to the field's declared type.

    Strings are parsed (comma-separated lists, "key:value" maps); native
    YAML values are checked and normalized.
    """
    origin = typing.get_origin(target)
    args = typing.get_args(target)

    if origin in (types.UnionType, typing.Union):
        if value is None or (isinstance(value, str) and value.lower() in ("", "null", "none")):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(key, value, inner)

    try:
        if target is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if target is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if target is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if target is str:
            if not isinstance(value, str | int | float):
                raise ValueError(value)
            return str(value)
        if origin is list:
            items = value
            if isinstance(value, str):
                items = [s.strip() for s in value.split(",") if s.strip()]
            if not isinstance(items, list | tuple):
                raise ValueError(value)
            return [_coerce(key, item, args[0]) for item in items]
        if origin is dict:
            if isinstance(value, str):
                pairs = [s.split(":", 1) for s in value.split(",") if s.strip()]
                value = {k.strip(): v.strip() for k, v in pairs}
            if not isinstance(value, dict):
                raise ValueError(value)
            return {str(k): _coerce(key, v, args[1]) for k, v in value.items()}
    except (TypeError, ValueError) as e:
        msg = f"Invalid value for {key}: {value!r}"
        raise ConfigError(msg) from e

    msg = f"Unsupported config field type for {key}: {target}"
    raise ConfigError(msg)


def _merge_dict_into_dataclass(dc: RunConfig, data: dict[str, Any], source: str) -> None:
    """Merge dictionary values into a RunConfig.

    Args:
        dc: Configuration to update
        data: Values to merge
        source: Where the values come from, for error messages

    Raises:
        ConfigError: On unknown keys or values of the wrong type
    """
    hints = _field_types()
    for key, value in data.items():
        if key not in hints:
            msg = f"Unknown config key {key!r} in {source}"
            raise ConfigError(msg)
        setattr(dc, key, _coerce(key, value, hints[key]))


def _load_config_from_file(config_path: Path) -> dict[str, Any]:
    """Load configuration from YAML file.

    Args:
        config_path: Path to the config file

    Returns:
        Dictionary with configuration data, empty dict if file doesn't exist

    Raises:
        ConfigError: If the file is not valid YAML or not a mapping
    """
    if not config_path.exists():
        return {}

    try:
        with open(config_path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        msg = f"Invalid YAML in config file {config_path}: {e}"
        raise ConfigError(msg) from e
    except OSError as e:
        msg = f"Error reading config file {config_path}: {e}"
        raise ConfigError(msg) from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        msg = f"Config file {config_path} must hold a mapping of key: value pairs"
        raise ConfigError(msg)
    return data


def _apply_env_overrides(config: RunConfig) -> RunConfig:
    """Apply environment variable overrides to configuration.

    Every field can be overridden by FIFO_DESK_<FIELD NAME IN UPPER CASE>.

    Args:
        config: Configuration to update

    Returns:
        Updated configuration
    """
    env_values: dict[str, Any] = {}
    for f in fields(RunConfig):
        if (value := os.environ.get(f"{ENV_PREFIX}{f.name.upper()}")) is not None:
            env_values[f.name] = value
    if env_values:
        _merge_dict_into_dataclass(config, env_values, "environment")
    return config


def load_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    validate: bool = True,
) -> RunConfig:
    """Load configuration from file, environment and explicit overrides.

    Priority: overrides (command-line flags) > environment variables >
    config file > defaults

    Args:
        path: Config file; defaults to get_config_path()
        overrides: Values from command-line flags; None entries are skipped
        validate: Run RunConfig.validate() on the result

    Returns:
        Complete configuration
    """
    config = RunConfig()

    config_path = path or get_config_path()
    file_data = _load_config_from_file(config_path)
    if file_data:
        logger.debug("Loaded config from %s", config_path)
        _merge_dict_into_dataclass(config, file_data, str(config_path))

    config = _apply_env_overrides(config)

    if overrides:
        present = {k: v for k, v in overrides.items() if v is not None}
        _merge_dict_into_dataclass(config, present, "command line")

    return config.validate() if validate else config


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    return asdict(config)


def save_config(config: RunConfig, path: Path | None = None) -> None:
    """Save configuration to file.

    Args:
        config: Configuration to save
        path: Path to save to (defaults to standard config path)
    """
    path = path or get_config_path()
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w") as f:
        yaml.dump(
            config_to_dict(config),
            f,
            default_flow_style=False,
            sort_keys=False,
            allow_unicode=True,
        )


def save_default_config(path: Path | None = None) -> None:
    """Save the default config template with comments.

    Args:
        path: Path to save to (defaults to standard config path)
    """
    path = path or get_config_path()
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "w") as f:
        f.write(DEFAULT_CONFIG_TEMPLATE)


def init_config(force: bool = False, path: Path | None = None) -> Path:
    """Initialize config file with defaults.

    Args:
        force: Overwrite existing config if True
        path: Where to write; defaults to get_config_path()

    Returns:
        Path to created config file

    Raises:
        FileExistsError: If config exists and force=False
    """
    config_path = path or get_config_path()

    if config_path.exists() and not force:
        raise FileExistsError(f"Config already exists: {config_path}")

    save_default_config(config_path)

    return config_path


# Global config instance (loaded lazily)
_config: RunConfig | None = None


def get_config() -> RunConfig:
    """Get the global configuration instance.

    Loads configuration on first access.

    Returns:
        Global configuration instance
    """
    global _config
    if _config is None:
        _config = load_config()
    return _config


def set_config(config: RunConfig) -> None:
    """Install a configuration as the global instance (used by the CLI)."""
    global _config
    _config = config


def reset_config() -> None:
    """Reset the global configuration instance.

    Forces reload on next get_config() call.
    Useful for testing.
    """
    global _config
    _config = None
