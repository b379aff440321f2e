"""Tests for utility functions."""

import hashlib
import json
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from junctionflow.utils import console, file_checksum, format_output, write_csv, write_manifest


def test_write_csv_is_reproducible():
    """Writing the same table twice gives identical bytes."""
    frame = pd.DataFrame({"eps": [0.3, 0.2], "value": [np.pi, 1.0 / 3.0]})
    with tempfile.TemporaryDirectory() as temp_dir:
        first = write_csv(frame, Path(temp_dir) / "a" / "table.csv")
        second = write_csv(frame, Path(temp_dir) / "b" / "table.csv")
        assert first.read_bytes() == second.read_bytes()
        assert "3.141592653590e+00" in first.read_text()
        assert file_checksum(first) == file_checksum(second)


def test_file_checksum():
    """Checksums are the sha256 of the file content."""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = Path(temp_dir) / "data.txt"
        path.write_bytes(b"junction")
        assert file_checksum(path) == hashlib.sha256(b"junction").hexdigest()


def test_write_manifest():
    """The manifest lists files relative to the output directory with their checksums."""
    with tempfile.TemporaryDirectory() as temp_dir:
        out = Path(temp_dir)
        table = write_csv(pd.DataFrame({"x": [1.0]}), out / "tables" / "x.csv")
        config = {"run": {"seed": "4"}}
        path = write_manifest(out, [table, table], config, seed=4, mode="expand")
        manifest = json.loads(path.read_text())
        assert path.name == "manifest.json"
        assert manifest["mode"] == "expand"
        assert manifest["seed"] == 4
        assert manifest["config"] == config
        assert manifest["files"] == [{"file": "tables/x.csv", "sha256": file_checksum(table)}]
        expected = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
        assert manifest["config_sha256"] == expected


def test_format_output_table_and_json():
    """Tables and JSON render frames and dicts."""
    frame = pd.DataFrame({"zone": ["blend"], "residual": [0.012345]})
    with console.capture() as capture:
        format_output(frame, "table", title="Residuals")
        format_output({"sup": 0.5}, "table")
        format_output(frame, "json")
    text = capture.get()
    assert "Residuals" in text
    assert "0.01235" in text
    assert '"zone": "blend"' in text
