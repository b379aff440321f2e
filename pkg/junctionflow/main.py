import warnings
from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import typer

from junctionflow import __version__
from junctionflow.config import RunConfig, load_run_config, write_default_config
from junctionflow.errors import AcceptanceFailure, JunctionFlowError
from junctionflow.expansion import (
    build_expansion,
    coefficient_frames,
    dependency_edges,
    evaluate_csv,
    node_summary,
    voxel_frames,
)
from junctionflow.geometry import analytic_volume
from junctionflow.reference import solve_reference_from_config
from junctionflow.utils import console, format_output, show_spinner, write_csv, write_manifest
from junctionflow.verification import acceptance_failures, repair_defects, sweep

app = typer.Typer(help="Asymptotic expansions and reference solutions for transport through a thin three-arm junction.")


class Mode(str, Enum):
    expand = "expand"
    reference = "reference"
    verify = "verify"
    sweep = "sweep"


def _load(
    config: Path,
    mode: Optional[Mode],
    out: Optional[Path],
    eps_override: Optional[float],
    seed: Optional[int],
    threads: Optional[int],
) -> RunConfig:
    run_config = load_run_config(config)
    return run_config.with_overrides(
        mode=mode.value if mode is not None else None,
        out_dir=out,
        eps=eps_override,
        seed=seed,
        threads=threads,
    )


def _run_expand(run: RunConfig, out_dir: Path) -> List[Path]:
    spec = run.network
    console.print(f"🚀 Building the order-{run.M} expansion (alpha = {spec.alpha}, gamma = {spec.gamma})")
    setM = build_expansion(
        spec, run.data, run.velocity, run.M, run.numerics, seed=run.seed, threads=run.threads, verbose=True
    )
    files = []
    for name, frame in coefficient_frames(setM).items():
        files.append(write_csv(frame, out_dir / "coefficients" / f"{name}.csv"))
    summary = node_summary(setM)
    files.append(write_csv(summary, out_dir / "node_layer.csv"))
    edges = pd.DataFrame(dependency_edges(setM), columns=["source", "target"])
    files.append(write_csv(edges, out_dir / "dependencies.csv"))
    for name, frame in voxel_frames(setM).items():
        files.append(write_csv(frame, out_dir / "voxels" / f"{name}.csv"))
    defects = repair_defects(setM, seed=run.seed)
    format_output(summary, "table", title="Node layer")
    format_output(defects, "table", title="Boundary and initial repair")
    return files


def _run_reference(run: RunConfig, out_dir: Path) -> List[Path]:
    spec = run.network
    numerics = run.numerics
    console.print(f"🚀 Reference solve at eps = {spec.eps:g} ({numerics.ref_scheme}, dt = {numerics.ref_dt:g})")
    ref = solve_reference_from_config(
        spec,
        run.data,
        run.velocity,
        cells_per_radius=numerics.ref_cells_per_radius,
        dt=numerics.ref_dt,
        scheme=numerics.ref_scheme,
        limiter=numerics.ref_limiter,
        verbose=True,
    )
    files = [
        write_csv(ref.ledger, out_dir / "ledger.csv"),
        write_csv(ref.snapshot_frame(len(ref.times) - 1), out_dir / "snapshot_final.csv"),
        write_csv(ref.point_series(np.array(run.output.monitor_points)), out_dir / "point_series.csv"),
        write_csv(ref.mesh.to_frame(), out_dir / "mesh.csv"),
    ]
    summary = {
        "cells": ref.mesh.n_cells,
        "volume": ref.mesh.total_volume(),
        "analytic_volume": analytic_volume(ref.mesh),
        "surface_area_defect": ref.surface_area_defect,
        "max_ledger_defect": ref.max_ledger_defect,
        "min_value": ref.min_value,
        "temporal_error_estimate": ref.temporal_error_estimate,
    }
    format_output(summary, "table", title="Reference solution")
    return files


def _run_sweep(run: RunConfig, out_dir: Path, accept: bool) -> List[Path]:
    verification = run.verification
    eps_text = ", ".join(f"{e:g}" for e in verification.eps_list) or "(none)"
    console.print(f"🚀 Sweep over eps = {eps_text}, M = {', '.join(map(str, verification.M_list))}")
    result = sweep(run, out_dir, with_errors=True, verbose=True)
    slopes = result.slope_frame()
    if len(slopes):
        format_output(slopes, "table", title="Fitted slopes")
    if accept:
        problems = acceptance_failures(result, slope_tol=verification.slope_tol)
        if problems:
            for problem in problems:
                console.print(f"❌ {problem}")
            raise AcceptanceFailure(f"{len(problems)} verification threshold(s) missed")
        console.print("✅ All verification thresholds met")
    return result.files


@app.command()
def run(
    config: Path = typer.Option(..., "--config", "-c", help="Configuration file"),
    mode: Optional[Mode] = typer.Option(None, "--mode", "-m", help="Override the configured run mode"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    eps_override: Optional[float] = typer.Option(None, "--eps-override", help="Replace the configured eps"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Random seed for sampling"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads"),
):
    """Run the configured pipeline and write a manifest of every produced file."""
    try:
        run_config = _load(config, mode, out, eps_override, seed, threads)
        out_dir = Path(run_config.output.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        console.print(f"📁 Output directory: {out_dir}")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if run_config.mode == Mode.expand.value:
                files = _run_expand(run_config, out_dir)
            elif run_config.mode == Mode.reference.value:
                files = _run_reference(run_config, out_dir)
            else:
                files = _run_sweep(run_config, out_dir, accept=run_config.mode == Mode.verify.value)
        for warning in caught:
            console.print(f"⚠️ {warning.message}")
        manifest = write_manifest(out_dir, files, run_config.source, run_config.seed, run_config.mode)
        console.print(f"💾 Wrote {len(files)} files, manifest: {manifest}")
    except JunctionFlowError as e:
        console.print(f"❌ Error: {e}")
        raise typer.Exit(e.exit_code)


@app.command()
def validate(config: Path = typer.Argument(..., help="Configuration file")):
    """Parse a configuration and check every model assumption."""
    try:
        with show_spinner() as progress:
            progress.add_task("🔍 Checking configuration...", total=None)
            run_config = load_run_config(config)
    except JunctionFlowError as e:
        console.print(f"❌ {type(e).__name__}: {e}")
        raise typer.Exit(e.exit_code)
    spec = run_config.network
    format_output(
        {
            "mode": run_config.mode,
            "eps": spec.eps,
            "alpha": spec.alpha,
            "gamma": spec.gamma,
            "M": run_config.M,
            "T": spec.T,
        },
        "table",
        title="Validated configuration",
    )
    console.print("✅ Configuration is valid")


@app.command("init-config")
def init_config(
    path: Path = typer.Argument(Path("junctionflow.ini"), help="Where to write the default scenario"),
    force: bool = typer.Option(False, "--force", help="Overwrite an existing file"),
):
    """Write the default scenario to a configuration file."""
    if path.exists() and not force:
        console.print(f"❌ Error: {path} exists (use --force to overwrite)")
        raise typer.Exit(2)
    write_default_config(path)
    console.print(f"✅ Wrote default configuration to {path}")


@app.command("evaluate")
def evaluate_points(
    config: Path = typer.Option(..., "--config", "-c", help="Configuration file"),
    points: Path = typer.Argument(..., help="CSV with columns x, y, z, t"),
    output: Path = typer.Option(Path("values.csv"), "--output", "-o", help="Output CSV"),
    eps_override: Optional[float] = typer.Option(None, "--eps-override", help="Replace the configured eps"),
):
    """Evaluate the configured partial sum at the points of a CSV file."""
    try:
        run_config = _load(config, None, None, eps_override, None, None)
        setM = build_expansion(
            run_config.network,
            run_config.data,
            run_config.velocity,
            run_config.M,
            run_config.numerics,
            seed=run_config.seed,
        )
        evaluate_csv(setM, points, output)
        console.print(f"💾 Saved values to {output}")
    except JunctionFlowError as e:
        console.print(f"❌ Error: {e}")
        raise typer.Exit(e.exit_code)


@app.command()
def version():
    """Show version information."""
    console.print(f"junctionflow version: {__version__}")


if __name__ == "__main__":
    app()
