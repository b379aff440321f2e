"""Tests for configuration management."""

import tempfile
from pathlib import Path

import pytest

from junctionflow.config import Config, load_run_config, validate
from junctionflow.errors import (
    ConfigError,
    ConservationViolated,
    ExpressionError,
    MatchingViolated,
    MOrderTooSmall,
    SupportViolation,
    WrongSign,
)


def _edited(config_file: Path, **values: str):
    config = Config(config_file)
    for key, value in values.items():
        config.set(key.replace("__", "."), value)
    return validate(Config(config_file))


def test_config_set_and_get():
    """Test setting and getting config values."""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = Config(Path(temp_dir) / "config.ini")

        config.set("network.eps", "0.2")
        assert config.get("network.eps") == "0.2"
        assert config.config_dir == Path(temp_dir)


def test_config_get_default():
    """Test getting config with default value."""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = Config(Path(temp_dir) / "config.ini")

        assert config.get("network.missing", "default") == "default"
        assert config.lookup("run.mode") == "expand"
        with pytest.raises(ConfigError):
            config.lookup("network.missing")


def test_config_delete():
    """Test deleting config values."""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = Config(Path(temp_dir) / "config.ini")

        config.set("run.seed", "7")
        config.delete("run.seed")
        assert config.get("run.seed") is None


def test_config_persistence():
    """Test config persistence across instances."""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = Path(temp_dir) / "nested" / "config.ini"

        Config(path).set("data.q1", "step(t, 0, 0.25)")
        assert Config(path).get("data.q1") == "step(t, 0, 0.25)"
        assert Config(path).as_dict() == {"data": {"q1": "step(t, 0, 0.25)"}}


def test_keys_need_a_section():
    """Keys without a section are refused."""
    with tempfile.TemporaryDirectory() as temp_dir:
        config = Config(Path(temp_dir) / "config.ini")
        with pytest.raises(ConfigError):
            config.get("eps")


def test_default_config_is_valid(config_file):
    """The written default scenario validates into run settings."""
    run = load_run_config(config_file)
    assert run.mode == "expand"
    assert run.M == 2
    assert run.network.eps == 0.1
    assert run.network.h == (0.2, 0.2, 0.2)
    assert run.velocity.node_speeds == (-2.0, 1.0, 1.0)
    assert run.numerics.delta is None
    assert run.numerics.base_delta(run.network) == pytest.approx(0.1)
    assert run.numerics.node_solver == "direct"
    assert run.numerics.truncation_tol == 1e-4
    assert run.numerics.truncation_check == "warn"
    assert run.verification.eps_list == (0.3, 0.2, 0.15)
    assert run.verification.self_check is False
    assert run.output.monitor_points[1] == (0.0, 0.5, 0.0)
    assert run.source["run"]["M"] == "2"


def test_missing_config_file():
    """A missing file is a configuration error."""
    with tempfile.TemporaryDirectory() as temp_dir:
        with pytest.raises(ConfigError):
            load_run_config(Path(temp_dir) / "absent.ini")


@pytest.mark.parametrize(
    "values, error",
    [
        ({"run__schema_version": "2"}, ConfigError),
        ({"run__mode": "explore"}, ConfigError),
        ({"run__M": "1"}, MOrderTooSmall),
        ({"network__ell0": "0.5"}, ConfigError),
        ({"velocity__v1": "1"}, WrongSign),
        ({"velocity__v2": "2"}, ConservationViolated),
        ({"velocity__v1": "-2 + x"}, SupportViolation),
        ({"data__q1": "t"}, MatchingViolated),
        ({"data__q1": "foo(t)"}, ExpressionError),
        ({"data__phi1": "step(t, 0, 0.5)"}, SupportViolation),
        ({"numerics__node_solver": "cg"}, ConfigError),
        ({"numerics__truncation_check": "ignore"}, ConfigError),
        ({"verification__M_list": "0"}, MOrderTooSmall),
        ({"output__monitor_points": "0.5, 0"}, ConfigError),
    ],
)
def test_invalid_configurations(config_file, values, error):
    """Each violated assumption raises its named error."""
    with pytest.raises(error):
        _edited(config_file, **values)


def test_error_exit_codes(config_file):
    """Configuration errors map to exit code 2."""
    with pytest.raises(ConfigError) as info:
        _edited(config_file, run__M="1")
    assert info.value.exit_code == 2


def test_with_overrides(config_file):
    """Command-line overrides replace single settings and keep the rest."""
    run = load_run_config(config_file)
    changed = run.with_overrides(mode="verify", out_dir=Path("elsewhere"), eps=0.05, seed=3)
    assert changed.mode == "verify"
    assert changed.output.out_dir == Path("elsewhere")
    assert changed.network.eps == 0.05
    assert changed.velocity.spec.eps == 0.05
    assert changed.seed == 3
    assert changed.threads == run.threads
    assert run.network.eps == 0.1
    with pytest.raises(ConfigError):
        run.with_overrides(eps=-0.1)
