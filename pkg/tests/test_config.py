"""Tests for configuration module."""
import os
import tempfile
from pathlib import Path
from typing import Dict

import pytest

from src.config import (
    Config,
    ConfigError,
    ConfigLoader,
    DataConfig,
    EvaluationConfig,
    ExperimentConfig,
    LoggingConfig,
    MetricsConfig,
    SynthConfig,
    TrainConfig,
)


class TestSynthConfig:
    """Test SynthConfig dataclass."""

    def test_default_config(self) -> None:
        """Test defaults describe the 200-user synthetic dataset."""
        config = SynthConfig()
        assert config.num_users == 200
        assert config.num_items_a == 300
        assert config.num_items_b == 150
        assert config.density_ratio == 5.0

    def test_resolved_mean_len_a_from_ratio(self) -> None:
        """Test A length defaults to density_ratio times B length."""
        config = SynthConfig(mean_len_b=2.0, density_ratio=4.0)
        assert config.resolved_mean_len_a == 8.0

    def test_explicit_mean_len_a(self) -> None:
        """Test an explicit A length consistent with the ratio is kept."""
        config = SynthConfig(mean_len_b=2.0, density_ratio=4.0, mean_len_a=8.4)
        assert config.resolved_mean_len_a == 8.4

    def test_inconsistent_mean_len_a(self) -> None:
        """Test error when lengths disagree with the density ratio."""
        with pytest.raises(ValueError, match="disagrees with density_ratio"):
            SynthConfig(mean_len_b=2.0, density_ratio=4.0, mean_len_a=2.0)

    def test_density_ratio_below_one(self) -> None:
        """Test error when density ratio is below 1."""
        with pytest.raises(ValueError, match="density_ratio"):
            SynthConfig(density_ratio=0.5)

    def test_non_positive_sizes(self) -> None:
        """Test error for empty id spaces."""
        with pytest.raises(ValueError, match="num_items_b must be positive"):
            SynthConfig(num_items_b=0)

    def test_cluster_defaults(self) -> None:
        """Test the default generator is clustered, correlated and noisy."""
        config = SynthConfig()
        assert config.num_clusters == 8
        assert config.cluster_strength == 4.0
        assert config.domain_correlation == 0.8
        assert config.noise_rate == 0.2

    @pytest.mark.parametrize(
        "overrides, message",
        [
            ({"num_clusters": 0}, "num_clusters must be at least 1"),
            ({"cluster_strength": -1.0}, "cluster_strength must be non-negative"),
            ({"domain_correlation": 1.5}, "domain_correlation must be in"),
            ({"noise_rate": -0.1}, "noise_rate must be in"),
        ],
    )
    def test_invalid_cluster_settings(self, overrides: Dict[str, float], message: str) -> None:
        """Test error for out-of-range cluster and noise settings."""
        with pytest.raises(ValueError, match=message):
            SynthConfig(**overrides)


class TestDataConfig:
    """Test DataConfig dataclass."""

    def test_default_synthesizes(self) -> None:
        """Test an empty path means synthetic data."""
        config = DataConfig()
        assert config.path == ""
        assert isinstance(config.synth, SynthConfig)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_invalid_train_fraction(self, fraction: float) -> None:
        """Test error for train fractions outside (0, 1)."""
        with pytest.raises(ValueError, match="train_fraction"):
            DataConfig(train_fraction=fraction)


class TestTrainConfig:
    """Test TrainConfig dataclass."""

    def test_default_config(self) -> None:
        """Test defaults."""
        config = TrainConfig()
        assert config.batch_size == 256
        assert config.lr == 0.005
        assert config.dropout == 0.1
        assert config.embedding_size == 16
        assert config.layers == 2
        assert config.tau == 0.2
        assert config.ssl_reg == 1e-3
        assert config.augmentation == "ID"
        assert config.patience == 5
        assert config.l2_reg == 1e-2
        assert config.valid_fraction == 0.1

    def test_negative_l2_reg(self) -> None:
        """Test error when the L2 weight is negative."""
        with pytest.raises(ValueError, match="l2_reg must be non-negative"):
            TrainConfig(l2_reg=-1e-3)

    def test_non_positive_lr(self) -> None:
        """Test error when learning rate is not positive."""
        with pytest.raises(ValueError, match="lr must be positive"):
            TrainConfig(lr=0.0)

    @pytest.mark.parametrize("name", ["alpha", "beta"])
    def test_alpha_beta_range(self, name: str) -> None:
        """Test alpha and beta must lie in [0, 1]."""
        with pytest.raises(ValueError, match=f"{name} must be in"):
            TrainConfig(**{name: 1.2})

    def test_invalid_augmentation(self) -> None:
        """Test error for unknown augmentation."""
        with pytest.raises(ValueError, match="augmentation must be one of"):
            TrainConfig(augmentation="XX")

    def test_invalid_attention_mode(self) -> None:
        """Test error for unknown attention mode."""
        with pytest.raises(ValueError, match="attention_mode"):
            TrainConfig(attention_mode="linear")

    def test_dropout_upper_bound(self) -> None:
        """Test dropout of 1 is rejected."""
        with pytest.raises(ValueError, match="dropout"):
            TrainConfig(dropout=1.0)


class TestEvaluationAndExperimentConfig:
    """Test EvaluationConfig and ExperimentConfig dataclasses."""

    def test_evaluation_defaults(self) -> None:
        """Test default cutoff is 10 with one worker."""
        config = EvaluationConfig()
        assert config.k == 10
        assert config.workers == 1

    def test_invalid_k(self) -> None:
        """Test error when k is below 1."""
        with pytest.raises(ValueError, match="k must be at least 1"):
            EvaluationConfig(k=0)

    def test_timing_fraction_outside_grid(self) -> None:
        """Test timing fractions must come from the 0.2 grid."""
        with pytest.raises(ValueError, match="timing_fractions"):
            ExperimentConfig(timing_fractions=[0.3])

    def test_empty_seeds(self) -> None:
        """Test at least one seed is required."""
        with pytest.raises(ValueError, match="At least one seed"):
            ExperimentConfig(seeds=[])


class TestLoggingConfig:
    """Test LoggingConfig dataclass."""

    def test_default_config(self) -> None:
        """Test default logging configuration."""
        config = LoggingConfig()
        assert config.level == "INFO"
        assert config.format == "text"

    def test_normalizes_level_case(self) -> None:
        """Test that log level is normalized to uppercase."""
        config = LoggingConfig(level="debug")
        assert config.level == "DEBUG"

    def test_normalizes_format_case(self) -> None:
        """Test that log format is normalized to lowercase."""
        config = LoggingConfig(format="JSON")
        assert config.format == "json"

    def test_invalid_level(self) -> None:
        """Test error with invalid log level."""
        with pytest.raises(ValueError, match="Log level must be one of"):
            LoggingConfig(level="INVALID")

    def test_invalid_format(self) -> None:
        """Test error with invalid log format."""
        with pytest.raises(ValueError, match="Log format must be one of"):
            LoggingConfig(format="xml")


class TestMetricsConfig:
    """Test MetricsConfig dataclass."""

    def test_default_config(self) -> None:
        """Test default metrics configuration."""
        config = MetricsConfig()
        assert config.enabled is False
        assert config.textfile == "metrics.prom"

    def test_enabled_without_textfile(self) -> None:
        """Test error when metrics are enabled without an output file."""
        with pytest.raises(ValueError, match="textfile is required"):
            MetricsConfig(enabled=True, textfile="")


class TestConfig:
    """Test Config dataclass."""

    def test_default_sections(self) -> None:
        """Test every section has a default."""
        config = Config()
        assert isinstance(config.train, TrainConfig)
        assert isinstance(config.data.synth, SynthConfig)
        assert config.output.dir == "runs/default"

    def test_to_dict(self) -> None:
        """Test snapshot contains nested sections."""
        snapshot = Config().to_dict()
        assert snapshot["train"]["batch_size"] == 256
        assert snapshot["data"]["synth"]["num_users"] == 200


class TestConfigLoader:
    """Test ConfigLoader class."""

    def test_load_defaults_without_file(self) -> None:
        """Test loading with no file yields defaults."""
        config = ConfigLoader.load(None)
        assert config.train.batch_size == 256

    def test_load_from_yaml(self) -> None:
        """Test loading configuration from YAML file."""
        yaml_content = """
data:
  train_fraction: 0.7
  synth:
    num_users: 50
    density_ratio: 3

train:
  epochs: 4
  lr: 1e-3
  augmentation: SR
  use_ea: false

logging:
  level: DEBUG
  format: text
"""

        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write(yaml_content)
            config_path = f.name

        try:
            config = ConfigLoader.load(config_path)
            assert config.data.train_fraction == 0.7
            assert config.data.synth.num_users == 50
            assert config.data.synth.density_ratio == 3.0
            assert config.train.epochs == 4
            assert config.train.lr == pytest.approx(1e-3)
            assert config.train.augmentation == "SR"
            assert config.train.use_ea is False
            assert config.logging.level == "DEBUG"
        finally:
            Path(config_path).unlink()

    def test_expand_env_vars(self) -> None:
        """Test environment variable expansion."""
        os.environ["TEST_EAGCL_DATA"] = "/data/hybrid.tsv"

        yaml_content = """
data:
  path: ${TEST_EAGCL_DATA}
"""

        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write(yaml_content)
            config_path = f.name

        try:
            config = ConfigLoader.load(config_path)
            assert config.data.path == "/data/hybrid.tsv"
        finally:
            Path(config_path).unlink()
            del os.environ["TEST_EAGCL_DATA"]

    def test_env_vars_override_yaml(self) -> None:
        """Test that environment variables override YAML config."""
        os.environ["EAGCL_SEED"] = "99"
        os.environ["EAGCL_LOG_FORMAT"] = "json"

        yaml_content = """
train:
  seed: 1
logging:
  format: text
"""

        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write(yaml_content)
            config_path = f.name

        try:
            config = ConfigLoader.load(config_path)
            assert config.train.seed == 99
            assert config.logging.format == "json"
        finally:
            Path(config_path).unlink()
            del os.environ["EAGCL_SEED"]
            del os.environ["EAGCL_LOG_FORMAT"]

    def test_overrides_applied_last(self) -> None:
        """Test --set overrides win over the file, last write wins."""
        yaml_content = """
train:
  beta: 0.3
"""

        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write(yaml_content)
            config_path = f.name

        try:
            config = ConfigLoader.load(
                config_path, ["train.beta=0.5", "train.beta=0.0", "experiment.seeds=[4, 5]"]
            )
            assert config.train.beta == 0.0
            assert config.experiment.seeds == [4, 5]
        finally:
            Path(config_path).unlink()

    def test_nested_override(self) -> None:
        """Test overrides reach nested sections."""
        config = ConfigLoader.load(None, ["data.synth.num_items_b=40"])
        assert config.data.synth.num_items_b == 40

    def test_unknown_key_lists_valid_keys(self) -> None:
        """Test unknown keys are rejected with the valid key list."""
        with pytest.raises(ConfigError, match="valid keys: epochs, batch_size"):
            ConfigLoader.load(None, ["train.epoch=3"])

    def test_unknown_section(self) -> None:
        """Test unknown sections are rejected."""
        with pytest.raises(ConfigError, match="Unknown configuration section 'model'"):
            ConfigLoader.load(None, ["model.width=4"])

    def test_malformed_override(self) -> None:
        """Test overrides without '=' are rejected."""
        with pytest.raises(ConfigError, match="section.key=value"):
            ConfigLoader.load(None, ["train.epochs"])

    def test_invalid_value_type(self) -> None:
        """Test non-numeric values for numeric keys are rejected."""
        with pytest.raises(ConfigError, match="Invalid value for train.epochs"):
            ConfigLoader.load(None, ["train.epochs=many"])

    def test_config_error_is_value_error(self) -> None:
        """Test ConfigError can be caught as ValueError."""
        assert issubclass(ConfigError, ValueError)

    def test_missing_config_file(self) -> None:
        """Test error when config file doesn't exist."""
        with pytest.raises(FileNotFoundError):
            ConfigLoader.load("/nonexistent/config.yaml")

    def test_invalid_yaml(self) -> None:
        """Test error with invalid YAML."""
        with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
            f.write("invalid: yaml: content: [")
            config_path = f.name

        try:
            with pytest.raises(Exception):  # yaml.YAMLError
                ConfigLoader.load(config_path)
        finally:
            Path(config_path).unlink()
