"""Configuration management for EA-GCL experiments."""
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml
from dotenv import load_dotenv


class ConfigError(ValueError):
    """Raised for unknown keys or malformed overrides."""


@dataclass
class SynthConfig:
    """Synthetic dataset generator configuration."""

    num_users: int = 200  # p
    num_items_a: int = 300  # m
    num_items_b: int = 150  # n
    mean_len_b: float = 3.0
    density_ratio: float = 5.0  # rho: A interactions per B interaction
    mean_len_a: Optional[float] = None  # defaults to density_ratio * mean_len_b
    latent_dim: int = 8
    sequences_per_user: int = 3
    popularity_scale: float = 1.0
    num_clusters: int = 8  # taste groups; items and users each belong to one
    cluster_strength: float = 4.0  # logit bonus of items in the session cluster
    domain_correlation: float = 0.8  # chance the B cluster follows the A cluster
    noise_rate: float = 0.2  # share of events drawn from popularity alone
    seed: int = 1

    def __post_init__(self) -> None:
        """Validate generator configuration."""
        for name in ("num_users", "num_items_a", "num_items_b", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sequences_per_user < 1:
            raise ValueError("sequences_per_user must be at least 1")
        if self.density_ratio < 1:
            raise ValueError(f"density_ratio must be >= 1, got {self.density_ratio}")
        if self.mean_len_b < 1:
            raise ValueError("mean_len_b must be at least 1")
        if self.popularity_scale < 0:
            raise ValueError("popularity_scale must be non-negative")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be at least 1")
        if self.cluster_strength < 0:
            raise ValueError("cluster_strength must be non-negative")
        for name in ("domain_correlation", "noise_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.mean_len_a is not None:
            ratio = self.mean_len_a / self.mean_len_b
            if abs(ratio - self.density_ratio) > 0.1 * self.density_ratio:
                raise ValueError(
                    f"mean_len_a / mean_len_b = {ratio:.2f} disagrees with "
                    f"density_ratio {self.density_ratio}"
                )

    @property
    def resolved_mean_len_a(self) -> float:
        if self.mean_len_a is not None:
            return self.mean_len_a
        return self.density_ratio * self.mean_len_b


@dataclass
class DataConfig:
    """Dataset source and split configuration."""

    path: str = ""  # empty: synthesize
    train_fraction: float = 0.8
    split_seed: int = 7
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self) -> None:
        """Validate data configuration."""
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class TrainConfig:
    """Training hyper-parameters."""

    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.005
    dropout: float = 0.1
    embedding_size: int = 16
    layers: int = 2
    alpha: float = 0.3
    beta: float = 0.3
    tau: float = 0.2
    ssl_reg: float = 1e-3
    l2_reg: float = 1e-2  # L2 on the batch embedding rows and head weights
    augmentation: str = "ID"  # ID, SR or none
    use_ea: bool = True
    attention_mode: str = "softmax"  # softmax or paper-sqrt
    activation: str = "leaky_relu"  # leaky_relu or identity
    leaky_slope: float = 0.2
    graph_norm: str = "symmetric"  # symmetric or row
    seed: int = 2024
    patience: int = 5
    valid_fraction: float = 0.1  # share of train held out for early stopping; 0 disables
    dump_graphs: bool = False

    def __post_init__(self) -> None:
        """Validate training configuration."""
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.embedding_size < 1 or self.layers < 1:
            raise ValueError("embedding_size and layers must be positive")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.ssl_reg < 0:
            raise ValueError("ssl_reg must be non-negative")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ValueError(f"valid_fraction must be in [0, 1), got {self.valid_fraction}")

        choices = {
            "augmentation": ["ID", "SR", "none"],
            "attention_mode": ["softmax", "paper-sqrt"],
            "activation": ["leaky_relu", "identity"],
            "graph_norm": ["symmetric", "row"],
        }
        for name, valid in choices.items():
            if getattr(self, name) not in valid:
                raise ValueError(f"{name} must be one of {valid}, got: {getattr(self, name)}")


@dataclass
class EvaluationConfig:
    """Evaluation configuration."""

    k: int = 10
    workers: int = 1

    def __post_init__(self) -> None:
        """Validate evaluation configuration."""
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class ExperimentConfig:
    """Multi-run experiment configuration (ablation, timing, sweeps)."""

    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    timing_fractions: List[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    timing_repeats: int = 1
    sweep_values: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])

    def __post_init__(self) -> None:
        """Validate experiment configuration."""
        if not self.seeds:
            raise ValueError("At least one seed is required")
        valid_fractions = {0.2, 0.4, 0.6, 0.8, 1.0}
        for fraction in self.timing_fractions:
            if round(fraction, 6) not in valid_fractions:
                raise ValueError(
                    f"timing_fractions must come from {sorted(valid_fractions)}, got {fraction}"
                )
        if self.timing_repeats < 1:
            raise ValueError("timing_repeats must be at least 1")


@dataclass
class OutputConfig:
    """Where runs write their artifacts."""

    dir: str = "runs/default"

    def __post_init__(self) -> None:
        """Validate output configuration."""
        if not self.dir:
            raise ValueError("Output directory is required")


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "INFO"
    format: str = "text"  # json or text

    def __post_init__(self) -> None:
        """Validate logging configuration."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if self.level.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        self.level = self.level.upper()

        valid_formats = ["json", "text"]
        if self.format.lower() not in valid_formats:
            raise ValueError(f"Log format must be one of: {valid_formats}")
        self.format = self.format.lower()


@dataclass
class MetricsConfig:
    """Prometheus metrics export configuration."""

    enabled: bool = False
    textfile: str = "metrics.prom"  # relative to the output directory

    def __post_init__(self) -> None:
        """Validate metrics configuration."""
        if self.enabled and not self.textfile:
            raise ValueError("Metrics textfile is required when metrics are enabled")


@dataclass
class Config:
    """Main configuration class."""

    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _valid_keys(cls: type) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _build(cls: type, values: Dict[str, Any], section: str) -> Any:
    """Instantiate a config dataclass, rejecting unknown keys."""
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{section}' must be a mapping")
    valid = _valid_keys(cls)
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigError(
            f"Unknown configuration key(s) {', '.join(f'{section}.{k}' for k in unknown)}; "
            f"valid keys: {', '.join(valid)}"
        )
    kwargs = dict(values)
    for f in dataclasses.fields(cls):
        if f.name not in kwargs:
            continue
        if dataclasses.is_dataclass(f.type):
            kwargs[f.name] = _build(f.type, kwargs[f.name] or {}, f"{section}.{f.name}")
        else:
            kwargs[f.name] = _coerce(kwargs[f.name], f.type, f"{section}.{f.name}")
    return cls(**kwargs)


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    """Coerce YAML scalars to the annotated field type (YAML reads ``1e-3`` as a string)."""
    if value is None:
        return None
    args = getattr(annotation, "__args__", ())
    if getattr(annotation, "__origin__", None) is Union and type(None) in args:
        annotation = next(a for a in args if a is not type(None))
    try:
        if annotation is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            return bool(value)
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return str(value)
        if getattr(annotation, "__origin__", None) in (list, List) and args:
            items = value if isinstance(value, list) else [value]
            return [_coerce(v, args[0], key) for v in items]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key}: {value!r}") from e
    return value


class ConfigLoader:
    """Load configuration from YAML file, environment variables and overrides."""

    SECTIONS = {
        "data": DataConfig,
        "train": TrainConfig,
        "evaluation": EvaluationConfig,
        "experiment": ExperimentConfig,
        "output": OutputConfig,
        "logging": LoggingConfig,
        "metrics": MetricsConfig,
    }

    @staticmethod
    def _expand_env_vars(value: Any) -> Any:
        """
        Recursively expand environment variables in configuration values.

        Args:
            value: Configuration value to expand

        Returns:
            Value with environment variables expanded
        """
        if isinstance(value, str):
            # Replace ${VAR_NAME} with environment variable value
            pattern = r"\$\{([^}]+)\}"
            matches = re.findall(pattern, value)
            for match in matches:
                env_value = os.getenv(match, "")
                value = value.replace(f"${{{match}}}", env_value)
            return value
        if isinstance(value, dict):
            return {k: ConfigLoader._expand_env_vars(v) for k, v in value.items()}
        if isinstance(value, list):
            return [ConfigLoader._expand_env_vars(item) for item in value]
        return value

    @staticmethod
    def apply_override(config_dict: Dict[str, Any], override: str) -> None:
        """
        Apply one ``section.key=value`` override in place.

        The value is parsed as a YAML scalar, so ``1e-3``, ``true`` and
        ``[1, 2]`` keep their types.

        Raises:
            ConfigError: If the override is malformed or names an unknown key
        """
        path, sep, raw_value = override.partition("=")
        if not sep or not path.strip():
            raise ConfigError(f"Override must look like section.key=value, got: {override!r}")
        keys = path.strip().split(".")
        if keys[0] not in ConfigLoader.SECTIONS:
            raise ConfigError(
                f"Unknown configuration section '{keys[0]}'; valid sections: "
                f"{', '.join(ConfigLoader.SECTIONS)}"
            )
        if len(keys) < 2:
            raise ConfigError(f"Override must name a key inside '{keys[0]}'")

        target = config_dict
        for key in keys[:-1]:
            node = target.get(key)
            if node is None:
                node = {}
                target[key] = node
            if not isinstance(node, dict):
                raise ConfigError(f"Cannot override inside non-mapping key '{key}'")
            target = node
        target[keys[-1]] = yaml.safe_load(raw_value) if raw_value.strip() else ""

    @staticmethod
    def from_dict(config_dict: Dict[str, Any]) -> Config:
        """Build a Config from a parsed mapping, rejecting unknown sections and keys."""
        unknown = sorted(set(config_dict) - set(ConfigLoader.SECTIONS))
        if unknown:
            raise ConfigError(
                f"Unknown configuration section(s) {', '.join(unknown)}; "
                f"valid sections: {', '.join(ConfigLoader.SECTIONS)}"
            )
        sections = {
            name: _build(cls, config_dict.get(name) or {}, name)
            for name, cls in ConfigLoader.SECTIONS.items()
        }
        return Config(**sections)

    @staticmethod
    def load(config_path: Optional[str] = None, overrides: Sequence[str] = ()) -> Config:
        """
        Load configuration from YAML file and environment variables.

        Environment variables take precedence over file configuration;
        overrides are applied last.

        Args:
            config_path: Path to YAML configuration file; defaults are used when None
            overrides: ``section.key=value`` strings

        Returns:
            Config object

        Raises:
            FileNotFoundError: If config file doesn't exist
            ValueError: If configuration is invalid
        """
        # Load .env file if present
        load_dotenv()

        config_dict: Dict[str, Any] = {}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise FileNotFoundError(f"Configuration file not found: {config_path}")

            with open(path, "r", encoding="utf-8") as f:
                config_dict = yaml.safe_load(f) or {}
            if not isinstance(config_dict, dict):
                raise ConfigError("Configuration file must contain a mapping of sections")

            # Expand environment variables in config
            config_dict = ConfigLoader._expand_env_vars(config_dict)

        env_overrides = {
            "EAGCL_LOG_LEVEL": "logging.level",
            "EAGCL_LOG_FORMAT": "logging.format",
            "EAGCL_OUTPUT_DIR": "output.dir",
            "EAGCL_SEED": "train.seed",
        }
        for env_name, key in env_overrides.items():
            env_value = os.getenv(env_name)
            if env_value:
                ConfigLoader.apply_override(config_dict, f"{key}={env_value}")

        for override in overrides:
            ConfigLoader.apply_override(config_dict, override)

        return ConfigLoader.from_dict(config_dict)
