"""
Unit tests for harness configuration loading.
"""

from pathlib import Path

import pytest

from fedbatch_bo.config import OUTPUT_ENV_VAR, HarnessConfig
from fedbatch_bo.errors import ConfigError
from fedbatch_bo.tasking import TESTING_DISTRIBUTIONS

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


class TestDefaults:
    """Test cases for the built-in defaults."""

    def test_profit_coefficients(self):
        """Test the default profit coefficients."""
        profit = HarnessConfig().profit
        assert (profit.revenue, profit.time_cost, profit.feed_cost) == (2.5e-2, 168.0, 8.5e-4)

    def test_default_file_matches_defaults(self):
        """Test that configs/default.yaml spells out exactly the built-in defaults."""
        assert HarnessConfig.load(CONFIG_DIR / "default.yaml") == HarnessConfig()

    def test_smoke_file_loads(self):
        """Test that the smoke configuration is valid."""
        config = HarnessConfig.load(CONFIG_DIR / "smoke.yaml")
        assert config.episodes.n_grid == 30
        assert config.sanodep_config().episodes == config.episodes

    def test_off_task_file_covers_testing_distributions(self):
        """Test that the off-task benchmark config runs every testing distribution."""
        config = HarnessConfig.load(CONFIG_DIR / "off_task.yaml")
        assert set(config.benchmark.distributions) == set(TESTING_DISTRIBUTIONS)
        assert config.benchmark.strategies == HarnessConfig().benchmark.strategies
        assert config.mse_sweep == HarnessConfig().mse_sweep

    def test_empty_file_gives_defaults(self, tmp_path):
        """Test that an empty YAML file falls back to the defaults."""
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert HarnessConfig.load(path) == HarnessConfig()


class TestLoading:
    """Test cases for parsing and validation."""

    def test_round_trip(self, tmp_path):
        """Test that dump followed by load gives an equal config."""
        config = HarnessConfig.from_dict({"solver": {"step": 0.1}, "seeds": [3, 4]})
        path = config.dump(tmp_path / "config.yaml")
        assert HarnessConfig.load(path) == config

    def test_override_and_int_to_float(self):
        """Test that integers are accepted for float settings."""
        config = HarnessConfig.from_dict({"profit": {"time_cost": 100}})
        assert config.profit.time_cost == 100.0
        assert isinstance(config.profit.time_cost, float)

    def test_unknown_key_reports_path(self):
        """Test that a misspelt key is named with its dotted path."""
        with pytest.raises(ConfigError, match="solver.stpe"):
            HarnessConfig.from_dict({"solver": {"stpe": 0.1}})

    def test_unknown_top_level_key(self):
        """Test that an unknown top-level key is rejected."""
        with pytest.raises(ConfigError, match="'colour'"):
            HarnessConfig.from_dict({"colour": "blue"})

    def test_schema_version(self):
        """Test that an unsupported schema version is rejected."""
        with pytest.raises(ConfigError, match="schema_version"):
            HarnessConfig.from_dict({"schema_version": 2})

    def test_invalid_value(self):
        """Test that a value failing validation becomes a ConfigError."""
        with pytest.raises(ConfigError):
            HarnessConfig.from_dict({"solver": {"step": -1.0}})

    def test_unknown_distribution(self):
        """Test that referencing an undefined distribution fails."""
        with pytest.raises(ConfigError, match="nowhere"):
            HarnessConfig.from_dict({"benchmark": {"distributions": ["nowhere"]}})

    def test_unknown_strategy(self):
        """Test that an unknown strategy name fails."""
        with pytest.raises(ConfigError, match="gp-fancy"):
            HarnessConfig.from_dict({"benchmark": {"strategies": ["gp-fancy"]}})

    def test_distribution_window_default(self):
        """Test that a distribution without a window gets the default window."""
        config = HarnessConfig.from_dict({
            "distributions": {"on-task-train": {"offset": 0.0}, "on-task": {"offset": 0.0}},
            "mse_sweep": {"distributions": ["on-task"]},
        })
        assert config.distributions["on-task"].window == 0.05

    def test_missing_file(self, tmp_path):
        """Test that an unreadable file raises ConfigError."""
        with pytest.raises(ConfigError):
            HarnessConfig.load(tmp_path / "absent.yaml")


class TestOutputDir:
    """Test cases for output directory precedence."""

    def test_cli_beats_environment(self, monkeypatch):
        """Test that --out wins over the environment variable."""
        monkeypatch.setenv(OUTPUT_ENV_VAR, "/tmp/from-env")
        assert HarnessConfig().resolve_output_dir("cli-out") == Path("cli-out")

    def test_environment_beats_file(self, monkeypatch):
        """Test that the environment variable wins over the file."""
        monkeypatch.setenv(OUTPUT_ENV_VAR, "/tmp/from-env")
        assert HarnessConfig().resolve_output_dir() == Path("/tmp/from-env")

    def test_file_default(self, monkeypatch):
        """Test that the file value is used when nothing overrides it."""
        monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
        assert HarnessConfig(output_dir="somewhere").resolve_output_dir() == Path("somewhere")
