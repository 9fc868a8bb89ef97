"""
Tests for run configuration loading, overrides and validation.
"""

import pytest

from streamground.config import RunConfig, describe_fields, load_config, parse_value
from streamground.errors import ConfigError


class TestDefaults:
    """Test default values."""

    def test_published_settings(self):
        """Test the defaults carry the reference training setup."""
        config = RunConfig()
        assert config.train.learning_rate == 2e-3
        assert (config.train.future_a, config.train.future_b) == (-4, 4)
        assert config.eval.recall_n == [1, 5]
        assert config.ablation.memory == "event"

    def test_list_defaults_not_shared(self):
        """Test list defaults are fresh per instance."""
        a, b = RunConfig(), RunConfig()
        a.eval.recall_n.append(10)
        assert b.eval.recall_n == [1, 5]

    def test_describe_fields(self):
        """Test every field is documented with its origin."""
        described = {key: (default, help_text, origin) for key, default, help_text, origin in describe_fields()}
        assert described["train.learning_rate"][0] == 2e-3
        assert described["train.learning_rate"][2] == "published setting"
        assert all(help_text for _, help_text, _ in described.values())
        assert len(described) == sum(len(v) for v in RunConfig().to_dict().values())


class TestOverrides:
    """Test dotted-key overrides."""

    @pytest.mark.parametrize(
        "text, expected",
        [("3", 3), ("0.5", 0.5), ("true", True), ("[1, 2]", [1, 2]), ('"x"', "x"), ("frame_fifo", "frame_fifo")],
    )
    def test_parse_value(self, text, expected):
        """Test TOML literals with a bare-word fallback."""
        assert parse_value(text) == expected

    def test_apply(self):
        """Test overrides replace values and leave the original untouched."""
        base = RunConfig()
        config = base.with_overrides(["train.learning_rate=1", "ablation.memory=frame_fifo", "eval.recall_m=[0.5]"])
        assert config.train.learning_rate == 1.0
        assert isinstance(config.train.learning_rate, float)
        assert config.ablation.memory == "frame_fifo"
        assert config.get_value("eval.recall_m") == [0.5]
        assert base.train.learning_rate == 2e-3

    @pytest.mark.parametrize(
        "override",
        [
            "train.nope=1",
            "nope.learning_rate=1",
            "learning_rate=1",
            "train.learning_rate",
            'model.dim="wide"',
            "model.dim=1.5",
            "ablation.dynamic_size=1",
            "data.noise=-1",
            "engine.mode=G",
            "eval.sweep_points=[[4, -4]]",
        ],
    )
    def test_rejected(self, override):
        """Test unknown keys, wrong types and invalid values raise ConfigError."""
        with pytest.raises(ConfigError):
            RunConfig().with_overrides([override])


class TestFiles:
    """Test TOML files."""

    def test_round_trip(self, workdir):
        """Test a saved configuration loads back equal."""
        config = RunConfig().with_overrides(["model.dim=16", "eval.recall_n=[1, 10]"])
        path = config.save(workdir / "nested" / "config.toml")
        assert load_config(path) == config

    def test_precedence(self, workdir):
        """Test overrides win over the file, which wins over defaults."""
        path = workdir / "config.toml"
        path.write_text("[model]\ndim = 16\nhidden = 24\n")
        config = load_config(path, ["model.dim=8"])
        assert config.model.dim == 8
        assert config.model.hidden == 24
        assert config.model.window == RunConfig().model.window

    def test_unknown_section(self, workdir):
        """Test unknown sections and keys in a file raise ConfigError."""
        path = workdir / "config.toml"
        path.write_text("[extra]\nx = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)
        path.write_text("[model]\nwidth = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_and_invalid(self, workdir):
        """Test a missing or unparsable file raises ConfigError."""
        with pytest.raises(ConfigError):
            load_config(workdir / "absent.toml")
        path = workdir / "bad.toml"
        path.write_text("[model\n")
        with pytest.raises(ConfigError):
            load_config(path)
