"""Tests for configuration resolution."""

import json

import pytest

from edge_deid.config import (
    RunConfig,
    builtin_defaults,
    env_defaults,
    get_config,
    load_config_file,
    parse_int_list,
    parse_theta_grid,
    resolve,
    validate,
)
from edge_deid.errors import UsageError


# =============================================================================
# ENVIRONMENT
# =============================================================================


class TestGetConfig:
    """Tests for environment lookups."""

    def test_default(self, clean_env):
        """Test the default is returned when the variable is unset."""
        assert get_config("seed", default=3) == 3

    def test_env_overrides(self, clean_env, monkeypatch):
        """Test EDGE_DEID_* variables override defaults with casting."""
        monkeypatch.setenv("EDGE_DEID_SEED", "42")
        assert get_config("seed", default=0, type_cast=int) == 42

    def test_env_defaults(self, clean_env, monkeypatch):
        """Test every registered setting is resolved from the current environment."""
        monkeypatch.setenv("EDGE_DEID_GAMMA_TGT", "3.5")
        monkeypatch.setenv("EDGE_DEID_SURROGATES", "2, 3")
        values = env_defaults()
        assert values["gamma_tgt"] == 3.5
        assert values["surrogates"] == (2, 3)
        assert builtin_defaults()["gamma_tgt"] == 2.0

    def test_env_bad_theta_grid(self, clean_env, monkeypatch):
        """Test a malformed grid in the environment is a usage error naming the variable."""
        monkeypatch.setenv("EDGE_DEID_THETA_GRID", "9:1:1")
        with pytest.raises(UsageError, match="EDGE_DEID_THETA_GRID"):
            env_defaults()


class TestParsers:
    """Tests for list and grid parsing."""

    def test_int_list(self):
        """Test comma lists and sequences."""
        assert parse_int_list("1, 2,3") == (1, 2, 3)
        assert parse_int_list([4, "5"]) == (4, 5)

    def test_theta_grid_default(self):
        """Test "default" selects the built-in grid."""
        assert parse_theta_grid("default") is None
        assert parse_theta_grid(None) is None

    def test_theta_grid_range(self):
        """Test start:stop:step includes the stop value."""
        assert parse_theta_grid("0.5:2.5:1") == (0.5, 1.5, 2.5)

    def test_theta_grid_list(self):
        """Test explicit comma lists."""
        assert parse_theta_grid("1,2.5") == (1.0, 2.5)

    def test_theta_grid_bad_step(self):
        """Test a non-positive step is rejected."""
        with pytest.raises(UsageError, match="step"):
            parse_theta_grid("0:5:0")

    def test_theta_grid_reversed_range(self):
        """Test a range whose stop lies below its start is rejected."""
        with pytest.raises(UsageError, match="stop must be >= start"):
            parse_theta_grid("5:1:1")

    @pytest.mark.parametrize("value", ["-1,2", "-2:3:1", [-0.5, 1.0]])
    def test_theta_grid_negative(self, value):
        """Test negative thresholds are rejected."""
        with pytest.raises(UsageError, match=">= 0"):
            parse_theta_grid(value)

    def test_theta_grid_empty_list(self):
        """Test an explicit empty list is rejected."""
        with pytest.raises(UsageError, match="empty"):
            parse_theta_grid([])

    def test_theta_grid_single_point(self):
        """Test a range with stop equal to start holds one value."""
        assert parse_theta_grid("3:3:1") == (3.0,)


# =============================================================================
# CONFIG FILES
# =============================================================================


class TestConfigFile:
    """Tests for --config files."""

    def test_key_value(self, tmp_path):
        """Test key = value lines with comments, dashes and aliases."""
        path = tmp_path / "run.cfg"
        path.write_text("# settings\ngamma-src = 1.0\nsteps = 10  # fewer\nsrc_identity = 2\n")
        assert load_config_file(path) == {"gamma_src": 1.0, "edit_steps": 10, "source_identity": 2}

    def test_json(self, tmp_path):
        """Test JSON objects."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 9, "surrogates": [2, 3], "output": "out"}))
        assert load_config_file(path) == {"seed": 9, "surrogates": (2, 3), "output_dir": "out"}

    def test_unknown_key(self, tmp_path):
        """Test unknown keys are usage errors."""
        path = tmp_path / "run.cfg"
        path.write_text("colour = red\n")
        with pytest.raises(UsageError, match="unknown key 'colour'"):
            load_config_file(path)

    def test_bad_value(self, tmp_path):
        """Test values that fail to cast are usage errors."""
        path = tmp_path / "run.cfg"
        path.write_text("seed = many\n")
        with pytest.raises(UsageError, match="bad value"):
            load_config_file(path)

    def test_bad_line(self, tmp_path):
        """Test lines without '=' are usage errors."""
        path = tmp_path / "run.cfg"
        path.write_text("seed\n")
        with pytest.raises(UsageError, match=":1:"):
            load_config_file(path)

    def test_missing_file(self, tmp_path):
        """Test a missing config file."""
        with pytest.raises(FileNotFoundError):
            load_config_file(tmp_path / "absent.cfg")


# =============================================================================
# RESOLUTION AND VALIDATION
# =============================================================================


class TestResolve:
    """Tests for merging sources into a RunConfig."""

    def test_defaults(self, clean_env):
        """Test no overrides gives the built-in defaults."""
        config = resolve("pipeline", {})
        assert config.seed == 0
        assert config.gamma_src == 1.5
        assert config.theta_grid is None

    def test_priority(self, clean_env, monkeypatch, tmp_path):
        """Test flags beat the config file, which beats the environment."""
        monkeypatch.setenv("EDGE_DEID_SEED", "5")
        monkeypatch.setenv("EDGE_DEID_ROUNDS", "2")
        path = tmp_path / "run.cfg"
        path.write_text("seed = 6\ngamma_tgt = 4.0\n")
        config = resolve("pipeline", {"gamma_tgt": 1.0, "hidden": None}, str(path))
        assert config.seed == 6
        assert config.rounds == 2
        assert config.gamma_tgt == 1.0
        assert config.hidden == 256
        assert config.config_file == str(path)

    def test_flags_beat_env(self, clean_env, monkeypatch):
        """Test explicit flags override the environment."""
        monkeypatch.setenv("EDGE_DEID_SEED", "5")
        assert resolve("pipeline", {"seed": 7}).seed == 7

    def test_to_dict(self, clean_env):
        """Test lists and the default grid serialize plainly."""
        data = resolve("sweep", {}).to_dict()
        assert data["surrogates"] == [1, 2, 3]
        assert data["theta_grid"] == "default"


class TestValidate:
    """Tests for range checks naming the offending flag."""

    @pytest.mark.parametrize(
        "overrides, message",
        [
            ({"gamma_src": -1.0}, "--gamma-src must be >= 0"),
            ({"edit_steps": 0}, "--steps must be >= 1"),
            ({"s_max": 1.5}, "--s-max must be in"),
            ({"image_size": 2}, "--image-size must be >= 4"),
            ({"twin_mode": "magic"}, "--twin-mode must be one of"),
            ({"surrogate_identity": 4}, "--tgt-identity must be <"),
            ({"backend": "trained"}, "requires --model"),
        ],
    )
    def test_rejects(self, overrides, message):
        """Test out-of-range settings raise UsageError."""
        with pytest.raises(UsageError, match=message):
            validate(RunConfig(command="pipeline", **overrides))

    def test_trained_backend_for_training(self):
        """Test train-flow does not need an existing model."""
        validate(RunConfig(command="train-flow", backend="trained"))

    def test_accepts_defaults(self):
        """Test the defaults are valid."""
        assert validate(RunConfig(command="pipeline")).command == "pipeline"

    def test_fed_lr_unset_or_positive(self):
        """Test the local step size may be left unset but never be non-positive."""
        assert validate(RunConfig(command="fedsim")).fed_lr is None
        assert validate(RunConfig(command="fedsim", fed_lr=0.25)).fed_lr == 0.25
        with pytest.raises(UsageError, match="--lr must be > 0"):
            validate(RunConfig(command="fedsim", fed_lr=0.0))

    def test_theta_grid_in_config_file(self, tmp_path):
        """Test a reversed grid in a config file is a usage error."""
        path = tmp_path / "run.cfg"
        path.write_text("theta_grid = 10:0:1\n")
        with pytest.raises(UsageError, match="theta grid"):
            load_config_file(path)
