"""Tests for the main CLI module."""

import json
import tempfile
from pathlib import Path

import pandas as pd
import pytest

from junctionflow.config import Config
from junctionflow.main import app

SMALL_GRIDS = {
    "numerics.edge_nx": "40",
    "numerics.edge_nt": "41",
    "numerics.n_quad": "8",
    "numerics.disk_nr": "8",
    "numerics.disk_ntheta": "16",
    "numerics.node_spacing": "0.1",
    "numerics.trunc_len": "2.0",
    "numerics.node_samples": "6",
    "numerics.node_solver": "direct",
    "numerics.truncation_tol": "0.2",
}


def _set(path: Path, values: dict) -> None:
    config = Config(path)
    for key, value in values.items():
        config.set(key, value)


def test_version_command(runner):
    """Test the version command."""
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert "junctionflow version: 0.1.0" in result.stdout


def test_help(runner):
    """Test the help command."""
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    for command in ("run", "validate", "init-config", "evaluate"):
        assert command in result.stdout


def test_init_config(runner):
    """init-config writes the default scenario and refuses to overwrite without --force."""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = Path(temp_dir) / "scenario.ini"
        result = runner.invoke(app, ["init-config", str(path)])
        assert result.exit_code == 0
        assert "✅ Wrote default configuration" in result.stdout
        assert Config(path).get("run.mode") == "expand"

        result = runner.invoke(app, ["init-config", str(path)])
        assert result.exit_code == 2
        assert "--force" in result.stdout

        result = runner.invoke(app, ["init-config", str(path), "--force"])
        assert result.exit_code == 0


def test_validate_default(runner, config_file):
    """The default scenario validates."""
    result = runner.invoke(app, ["validate", str(config_file)])
    assert result.exit_code == 0
    assert "✅ Configuration is valid" in result.stdout


def test_validate_reports_named_error(runner, config_file):
    """A violated assumption is named and exits with code 2."""
    _set(config_file, {"run.M": "1"})
    result = runner.invoke(app, ["validate", str(config_file)])
    assert result.exit_code == 2
    assert "MOrderTooSmall" in result.stdout


def test_validate_missing_file(runner):
    """A missing configuration file exits with code 2."""
    with tempfile.TemporaryDirectory() as temp_dir:
        result = runner.invoke(app, ["validate", str(Path(temp_dir) / "absent.ini")])
    assert result.exit_code == 2
    assert "ConfigError" in result.stdout


def test_run_rejects_unknown_mode(runner, config_file):
    """An unknown --mode is a usage error."""
    result = runner.invoke(app, ["run", "-c", str(config_file), "-m", "explore"])
    assert result.exit_code == 2


def test_run_reports_config_errors(runner, config_file):
    """Configuration errors stop a run with exit code 2."""
    _set(config_file, {"velocity.v2": "2"})
    result = runner.invoke(app, ["run", "-c", str(config_file)])
    assert result.exit_code == 2
    assert "❌ Error" in result.stdout


@pytest.mark.slow
def test_run_reference(runner, config_file):
    """Reference mode writes the ledger, snapshot and point series with a manifest."""
    _set(config_file, {"numerics.ref_dt": "0.25", "numerics.ref_limiter": "false"})
    with tempfile.TemporaryDirectory() as temp_dir:
        out = Path(temp_dir) / "out"
        result = runner.invoke(
            app, ["run", "-c", str(config_file), "-m", "reference", "-o", str(out), "--eps-override", "0.5"]
        )
        assert result.exit_code == 0
        ledger = pd.read_csv(out / "ledger.csv")
        assert len(ledger) == 4
        assert ledger["relative_defect"].max() < 1e-9
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["mode"] == "reference"
        files = {entry["file"] for entry in manifest["files"]}
        assert files == {"ledger.csv", "snapshot_final.csv", "point_series.csv", "mesh.csv"}


def test_run_expand(runner, config_file):
    """Expand mode writes coefficient tables, node-layer tables, voxel dumps and the dependency audit."""
    _set(config_file, SMALL_GRIDS)
    with tempfile.TemporaryDirectory() as temp_dir:
        out = Path(temp_dir) / "out"
        result = runner.invoke(app, ["run", "-c", str(config_file), "-o", str(out), "--seed", "3"])
        assert result.exit_code == 0
        assert (out / "node_layer.csv").exists()
        assert (out / "dependencies.csv").exists()
        assert (out / "coefficients" / "d_alpha.csv").exists()
        potential = pd.read_csv(out / "voxels" / "node_potential.csv")
        assert list(potential.columns) == ["i", "j", "k", "x", "y", "z", "volume", "p"]
        assert abs(potential["p"].mean()) < 1e-8
        assert (out / "voxels" / "node_mesh.csv").exists()
        assert (out / "voxels" / "N_alpha_slice.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3


@pytest.mark.slow
def test_evaluate_command(runner, config_file):
    """evaluate writes one value per input point."""
    _set(config_file, SMALL_GRIDS)
    with tempfile.TemporaryDirectory() as temp_dir:
        points = Path(temp_dir) / "points.csv"
        pd.DataFrame({"x": [0.5, 0.0], "y": [0.0, 0.5], "z": [0.0, 0.0], "t": [0.8, 0.8]}).to_csv(points, index=False)
        output = Path(temp_dir) / "values.csv"
        result = runner.invoke(app, ["evaluate", "-c", str(config_file), str(points), "-o", str(output)])
        assert result.exit_code == 0
        values = pd.read_csv(output)
        assert len(values) == 2
        assert values["zone"].tolist() == ["cyl_far_1", "cyl_far_2"]
