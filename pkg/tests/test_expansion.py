"""Tests for the assembly and evaluation of partial sums."""

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from junctionflow.config import load_run_config, write_default_config
from junctionflow.errors import InsufficientMatching, OutOfDomain
from junctionflow.expansion import (
    build_expansion,
    check_matching,
    classify_zone,
    coefficient_frames,
    dependency_edges,
    evaluate,
    evaluate_csv,
    evaluate_frame,
    node_summary,
)
from junctionflow.expressions import Expression
from junctionflow.orders import BASE_FRACTIONAL, BASE_INTEGER, FIRST_INTERACTION
from junctionflow.verification import repair_defects

POINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.1, 0.0, 0.0],
        [0.5, 0.005, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, 0.95],
    ]
)


@pytest.fixture(scope="module")
def default_set():
    """Order-2 expansion of the default scenario on coarse grids."""
    with tempfile.TemporaryDirectory() as temp_dir:
        run = load_run_config(write_default_config(Path(temp_dir) / "junctionflow.ini"))
    numerics = replace(
        run.numerics,
        edge_nx=40,
        edge_nt=41,
        n_quad=8,
        disk_nr=8,
        disk_ntheta=16,
        node_spacing=0.1,
        trunc_len=2.0,
        node_samples=6,
        node_solver="direct",
        truncation_tol=0.2,
    )
    return build_expansion(run.network, run.data, run.velocity, run.M, numerics)


def test_classify_zone(spec):
    """Points fall into the node, blend, far-cylinder and base-layer zones."""
    points = np.array(
        [
            [0.01, 0.0, 0.0],
            [0.05, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [0.0, 0.9, 0.0],
        ]
    )
    zone, edge = classify_zone(spec, points, delta=0.1)
    assert zone.tolist() == ["node_region", "node_region", "blend", "cyl_far", "base_layer"]
    assert edge.tolist() == [0, 1, 1, 1, 2]


def test_classify_zone_outside(spec):
    """Points outside the thin junction are refused."""
    with pytest.raises(OutOfDomain):
        classify_zone(spec, np.array([[0.5, 0.5, 0.0]]), delta=0.1)


def test_check_matching(spec, default_data, zero_data):
    """Smooth steps vanish to every order at t = 0; a linear ramp does not."""
    check_matching(default_data, spec, 3)
    check_matching(zero_data, spec, 3)
    ramp = replace(zero_data, q=(Expression("t**2", ("t",)),) + zero_data.q[1:], phi_hat={})
    with pytest.raises(InsufficientMatching):
        check_matching(ramp, spec, 3)


def test_zero_data_give_zero_expansion(spec, velocity, zero_data, small_numerics):
    """Homogeneous data produce the zero partial sum."""
    setM = build_expansion(spec, zero_data, velocity, 2, small_numerics)
    assert set(setM.w) == set(setM.orders)
    values = evaluate(setM, POINTS, 0.7)
    assert not np.any(values)
    assert all(field.is_zero for field in setM.node.values())


def test_inventory(spec, velocity, zero_data, small_numerics):
    """The inventory names the terms of every order; base orders have no corrector."""
    setM = build_expansion(spec, zero_data, velocity, 2, small_numerics)
    names = setM.inventory()
    assert "w[alpha-1]" in names
    assert "u[alpha-1]" not in names
    assert "u[alpha]" in names
    assert "N[1]" in names
    assert setM.principal_part == [BASE_FRACTIONAL]
    assert setM.exponents == pytest.approx([-0.5, 0.0, 0.5, 1.0, 1.5])


def test_build_rejects_small_m(spec, velocity, zero_data, small_numerics):
    """M must be at least 1."""
    with pytest.raises(ValueError):
        build_expansion(spec, zero_data, velocity, 0, small_numerics)


def test_default_expansion_vanishes_at_start(default_set):
    """Zero initial data give a zero partial sum at t = 0."""
    assert not np.any(evaluate(default_set, POINTS, 0.0))


def test_default_expansion_values(default_set):
    """The partial sum is finite everywhere and driven by the data later on."""
    values = evaluate(default_set, POINTS, 0.8)
    assert np.all(np.isfinite(values))
    assert np.any(values != 0.0)
    parts = evaluate(default_set, POINTS, 0.8, breakdown=True)
    assert parts.shape == (len(default_set.orders), len(POINTS))
    assert parts.sum(axis=0) == pytest.approx(values)


def test_shorter_partial_sum(default_set):
    """M = 1 drops the highest order of each chain."""
    full = evaluate(default_set, POINTS, 0.8, breakdown=True)
    first = evaluate(default_set, POINTS, 0.8, M=1, breakdown=True)
    assert first.shape[0] == full.shape[0] - 2


def test_coefficients_do_not_depend_on_eps(default_set):
    """with_eps keeps the coefficients and only rescales the evaluation."""
    thinner = default_set.with_eps(0.05)
    assert thinner.w is default_set.w
    assert thinner.spec.eps == 0.05
    x = np.array([[0.5, 0.0, 0.0]])
    assert evaluate(thinner, x, 0.8) != pytest.approx(evaluate(default_set, x, 0.8))


def test_solvability_and_kirchhoff(default_set):
    """Every node-layer order is solvable and the gluing constants vanish at t = 0."""
    for field in default_set.node.values():
        assert field.solvability_defect < 1e-6
    for order, gluing in default_set.gluing.items():
        assert abs(gluing.values[0]) < 1e-10
    assert default_set.gluing[FIRST_INTERACTION].components["node_interaction"].any()


def test_dependency_audit(default_set):
    """The audit graph records which data feed which coefficient."""
    edges = dependency_edges(default_set)
    assert ("q", "w[0]") in edges
    assert ("phi_hat", "w[alpha-1]") in edges
    assert ("phi0", "d[alpha]") in edges
    assert ("w[alpha-1]", "w[alpha]") in edges


def test_tables(default_set):
    """Coefficient and node-layer tables cover every order."""
    frames = coefficient_frames(default_set, stride=4)
    assert "w_alpha-1_edge1" in frames
    assert "d_alpha" in frames
    assert "Pi_0_edge2" in frames
    summary = node_summary(default_set)
    assert len(summary) == len(default_set.orders)
    assert {"order", "solvability_defect", "cap_ratio"} <= set(summary.columns)


def test_evaluate_csv(default_set):
    """Batch evaluation reads x, y, z, t and writes values with zones and parts."""
    frame = pd.DataFrame({"x": POINTS[:, 0], "y": POINTS[:, 1], "z": POINTS[:, 2], "t": 0.8})
    direct = evaluate_frame(default_set, frame)
    assert direct["zone"].tolist()[:3] == ["node_region", "blend_1", "cyl_far_1"]
    with tempfile.TemporaryDirectory() as temp_dir:
        source = Path(temp_dir) / "points.csv"
        frame.to_csv(source, index=False)
        out = evaluate_csv(default_set, source, Path(temp_dir) / "values.csv")
        result = pd.read_csv(out)
    assert result["value"].to_numpy() == pytest.approx(direct["value"].to_numpy())
    assert "eps^-0.5" in result.columns
    assert BASE_INTEGER in default_set.layers


def test_default_gluing_starts_flat(default_set):
    """Every gluing signal starts at zero with zero slope, so the default build passes its matching checks."""
    for gluing in default_set.gluing.values():
        signal = gluing.signal
        assert signal(np.array([0.0]))[0] == 0.0
        assert abs(signal(np.array([0.0]), 1)[0]) < 1e-12


def test_default_base_repair_is_exact(default_set):
    """The default partial sum meets q on the bases between grid times and vanishes at t = 0."""
    defects = repair_defects(default_set, n_samples=60, seed=4)
    assert defects["base"] < 1e-10
    assert defects["initial"] < 1e-12
