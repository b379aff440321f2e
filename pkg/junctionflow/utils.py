"""CLI utilities and helper functions."""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

console = Console()


def show_spinner() -> Progress:
    """Create a spinner context manager."""
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
    )


def make_progress(disable: bool = False) -> Progress:
    """Progress bar for long loops."""
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        TimeElapsedColumn(),
        console=console,
        disable=disable,
    )


def format_output(data: Any, format_type: str = "table", title: Optional[str] = None) -> None:
    """Format and display output in various formats."""
    if format_type == "json":
        if isinstance(data, pd.DataFrame):
            data = data.to_dict(orient="records")
        console.print_json(json.dumps(data, indent=2, default=float))
    elif format_type == "table" and isinstance(data, pd.DataFrame):
        table = Table(title=title)
        for column in data.columns:
            table.add_column(str(column))
        for row in data.itertuples(index=False):
            table.add_row(*(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row))
        console.print(table)
    elif format_type == "table" and isinstance(data, dict):
        table = Table(title=title)
        table.add_column("key")
        table.add_column("value")
        for key, value in data.items():
            table.add_row(str(key), f"{value:.4g}" if isinstance(value, float) else str(value))
        console.print(table)
    else:
        console.print(data)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    """Write a table with a fixed float format so identical runs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.12e")
    return path


def file_checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir: Path, files: Iterable[Path], config: Dict[str, Dict[str, str]], seed: int, mode: str
) -> Path:
    """List every produced file with its checksum, plus the config hash and seed."""
    out_dir = Path(out_dir)
    config_text = json.dumps(config, sort_keys=True)
    entries: List[Dict[str, str]] = []
    for path in sorted({Path(p) for p in files}):
        entries.append({"file": str(path.relative_to(out_dir)), "sha256": file_checksum(path)})
    manifest = {
        "mode": mode,
        "seed": seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "config": config,
        "files": entries,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path
