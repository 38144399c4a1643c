from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import polars as pl
import pytest
from scipy import linalg
from vvspec.flows import catalog_flow
from vvspec.galerkin import GalerkinOperator, assemble, assemble_sparse
from vvspec.lattice import (
    SpectralField,
    ZeroWavevectorError,
    build_mode_set,
    evaluate_on_grid,
    field_norm,
    grid_points,
    leray_fiber_projector,
    project_div_free,
    random_field,
    to_fiber,
    to_full,
)
from vvspec.semigroup import (
    AliasingError,
    PacketResidual,
    PropagatorOverflowError,
    WavePacket,
    apply_H,
    apply_pdo,
    asymptotic_residual,
    clear_transport_cache,
    decomposition_sweep,
    essential_radius_diagnostic,
    fit_decomposition,
    propagate_field,
    propagator,
    transport_symbol_bound,
    write_nsweep_csv,
    write_packet_csv,
)
from vvspec.spectra import match_eigenvalues

slow = pytest.mark.skipif(
    os.getenv("VVS_SKIP_SLOW", "").lower() == "true",
    reason="ray-traced transport on fine grids skipped",
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(11)


@pytest.fixture(autouse=True)
def fresh_transport_cache() -> None:
    clear_transport_cache()


# ---------------------------------------------------------------------------
# Propagators
# ---------------------------------------------------------------------------


def test_propagator_identity_and_heat() -> None:
    ms = build_mode_set(2, 3)
    op = assemble(catalog_flow("zero"), ms, 0.1)
    assert np.array_equal(propagator(op, 0.0).G, np.eye(ms.dimension))

    G = propagator(op, 0.5).G
    assert np.allclose(G, np.diag(np.exp(-0.05 * ms.column_wavenumber_sq)), atol=1e-13)
    with pytest.raises(ValueError):
        propagator(op, -1.0)


def test_semigroup_property() -> None:
    op = assemble(catalog_flow("shear", {"m": 1}), build_mode_set(2, 4), 0.01)
    a = propagator(op, 0.3).G
    b = propagator(op, 0.5).G
    ab = propagator(op, 0.8).G
    assert np.linalg.norm(a @ b - ab) <= 1e-8 * np.linalg.norm(ab)


def test_spectral_mapping() -> None:
    op = assemble(catalog_flow("shear", {"m": 1}), build_mode_set(2, 4), 0.05)
    t = 0.7
    mu = np.linalg.eigvals(propagator(op, t).G)
    lam = np.linalg.eigvals(op.matrix)
    worst, _, _ = match_eigenvalues(mu, np.exp(t * lam))
    assert worst < 1e-6


def test_propagator_overflow() -> None:
    ms = build_mode_set(2, 1)
    op = GalerkinOperator(ms, 0.0, 800.0 * np.eye(ms.dimension, dtype=complex), "synthetic")
    with pytest.raises(PropagatorOverflowError) as exc:
        propagator(op, 1.0)
    assert exc.value.required_splits == 2
    assert exc.value.growth_exponent == pytest.approx(800.0)


def test_propagate_field_matches_dense(rng: np.random.Generator) -> None:
    flow = catalog_flow("shear", {"m": 1})
    ms = build_mode_set(2, 4)
    op = assemble(flow, ms, 0.02)
    f = random_field(ms, rng)
    dense = propagator(op, 0.6).apply(f).coefficients
    assert np.allclose(propagate_field(op, 0.6, f).coefficients, dense, atol=1e-10)
    sparse_result = propagate_field(assemble_sparse(flow, ms, 0.02), 0.6, f).coefficients
    assert np.allclose(sparse_result, dense, atol=1e-10)
    assert np.array_equal(propagate_field(op, 0.0, f).coefficients, f.coefficients)


# ---------------------------------------------------------------------------
# Pseudodifferential operators
# ---------------------------------------------------------------------------


def test_pdo_identity_and_multiplier(rng: np.random.Generator) -> None:
    ms = build_mode_set(2, 4)
    f = random_field(ms, rng, layout="full")

    same = apply_pdo(lambda x, k: np.eye(2), f, 16)
    assert np.allclose(same.coefficients, f.coefficients, atol=1e-12)

    laplace = apply_pdo(lambda x, k: -float(k @ k) * np.eye(2), f, 16)
    expected = -ms.wavenumber_sq[:, None] * f.coefficients
    assert np.allclose(laplace.coefficients, expected, atol=1e-10)


def test_pdo_leray_symbol(rng: np.random.Generator) -> None:
    ms = build_mode_set(3, 2)
    f = random_field(ms, rng, layout="full")
    out = apply_pdo(lambda x, k: leray_fiber_projector(k), f, 8)
    assert np.allclose(out.coefficients, project_div_free(f).coefficients, atol=1e-12)


def test_pdo_multiplication_by_function(rng: np.random.Generator) -> None:
    # sigma(x, k) = cos(x1) I: a real-space product, checked on the grid.
    # Modes with |k1| < 2 and k2 != 0 keep the product inside the ModeSet.
    ms = build_mode_set(2, 2)
    keep = (np.abs(ms.modes[:, 0]) < 2) & (ms.modes[:, 1] != 0)
    f = random_field(ms, rng, layout="full")
    f = SpectralField(ms, np.where(keep[:, None], f.coefficients, 0.0), "full")
    G = 8

    def symbol(x: np.ndarray, k: np.ndarray) -> np.ndarray:
        return np.cos(x[:, 0])[:, None, None] * np.eye(2)

    out = apply_pdo(symbol, f, G)
    values = evaluate_on_grid(f, G).reshape(2, -1)
    x = grid_points(2, G)
    expected = values * np.cos(x[:, 0])[None, :]
    assert np.allclose(evaluate_on_grid(out, G).reshape(2, -1), expected, atol=1e-12)


def test_pdo_grid_checks(rng: np.random.Generator) -> None:
    ms = build_mode_set(2, 4)
    f = random_field(ms, rng, layout="full")
    with pytest.raises(ValueError):
        apply_pdo(lambda x, k: np.eye(2), f, 12)

    def wild(x: np.ndarray, k: np.ndarray) -> np.ndarray:
        return np.exp(7j * x[:, 0])[:, None, None] * np.eye(2)

    with pytest.raises(AliasingError) as exc:
        apply_pdo(wild, f, 16)
    assert exc.value.tail_fraction > 1e-6


# ---------------------------------------------------------------------------
# Transport operator H
# ---------------------------------------------------------------------------


def test_apply_H_zero_flow(rng: np.random.Generator) -> None:
    ms = build_mode_set(2, 4)
    flow = catalog_flow("zero")
    f = random_field(ms, rng)
    assert np.allclose(apply_H(flow, 0.0, 1.0, f, 16).coefficients, f.coefficients, atol=1e-12)

    heat = propagator(assemble(flow, ms, 0.05), 1.0).apply(f).coefficients
    assert np.allclose(apply_H(flow, 0.05, 1.0, f, 16).coefficients, heat, atol=1e-12)


def test_apply_H_at_time_zero_is_projection(rng: np.random.Generator) -> None:
    ms = build_mode_set(2, 3)
    f = random_field(ms, rng, layout="full")
    out = apply_H(catalog_flow("shear"), 0.3, 0.0, f, 12)
    assert np.allclose(out.coefficients, to_fiber(f).coefficients, atol=1e-12)


def test_apply_H_input_checks(rng: np.random.Generator) -> None:
    f = random_field(build_mode_set(2, 2), rng)
    with pytest.raises(ValueError):
        apply_H(catalog_flow("shear"), -0.1, 1.0, f, 8)
    with pytest.raises(ValueError):
        apply_H(catalog_flow("shear"), 0.0, 1.0, f, 4)
    with pytest.raises(ValueError):
        apply_H(catalog_flow("shear"), 0.0, 1.0, f, 8, tol=1e-6)


@slow
def test_apply_H_is_bounded_by_its_symbol(rng: np.random.Generator) -> None:
    flow = catalog_flow("shear", {"m": 1, "A": 0.5})
    ms = build_mode_set(2, 4)
    t, eps, G = 0.5, 0.01, 32
    bound = transport_symbol_bound(flow, eps, t, ms, G)
    assert 0.0 < bound < 10.0
    for _ in range(3):
        f = random_field(ms, rng)
        out = apply_H(flow, eps, t, f, G)
        assert field_norm(out) <= 2.0 * bound * field_norm(f)


# ---------------------------------------------------------------------------
# Wave packets
# ---------------------------------------------------------------------------


def test_wave_packet_validation() -> None:
    with pytest.raises(ValueError):
        WavePacket((1, 0), 0.3)
    with pytest.raises(ValueError):
        WavePacket((1, 0), 1.0)
    with pytest.raises(ZeroWavevectorError):
        WavePacket((0, 0), 0.25)

    packet = WavePacket((1, 0), 0.25)
    assert packet.scale == 4
    assert list(packet.wavevector) == [4, 0]
    assert packet.required_cutoff == 8
    assert list(WavePacket((2, 2), 0.5).envelope_direction) == [1, 1]


def test_wave_packet_realization_matches_values() -> None:
    packet = WavePacket((1, 1), 0.5)
    ms = build_mode_set(2, packet.required_cutoff)
    f = packet.realize(ms)
    G = 4 * ms.cutoff
    on_grid = evaluate_on_grid(f, G).reshape(2, -1).T
    assert np.allclose(on_grid, packet.values(grid_points(2, G)), atol=1e-12)
    # divergence-free by construction: the full layout survives projection
    full = to_full(f)
    assert np.allclose(project_div_free(full).coefficients, full.coefficients, atol=1e-14)

    with pytest.raises(ValueError):
        packet.realize(build_mode_set(2, 2))


def test_zero_flow_residuals_vanish() -> None:
    flow = catalog_flow("zero")
    record = asymptotic_residual(flow, 1.0, WavePacket((1, 0), 0.5), 1e-2)
    assert record.r_asym < 1e-12
    assert record.r_decomp < 1e-12
    assert record.cutoff == 4
    assert record.grid == 16

    records = decomposition_sweep(flow, 1.0, [0.5, 0.25], [1e-2, 1e-3], (1, 0))
    assert [(r.delta, r.eps) for r in records] == [
        (0.5, 1e-2),
        (0.5, 1e-3),
        (0.25, 1e-2),
        (0.25, 1e-3),
    ]
    assert max(r.r_decomp for r in records) < 1e-12
    assert records[2].grid == 32

    wide = decomposition_sweep(flow, 1.0, [0.5], [1e-2], (1, 0), grid_factor=6)
    assert wide[0].grid == 24
    with pytest.raises(ValueError):
        decomposition_sweep(flow, 1.0, [0.5], [1e-2], (1, 0), grid_factor=3)


@slow
def test_shear_asymptotic_residual_shrinks_with_scale() -> None:
    flow = catalog_flow("shear", {"m": 1, "A": 0.5})
    coarse = asymptotic_residual(flow, 1.0, WavePacket((1, 0), 0.25), 0.0)
    fine = asymptotic_residual(flow, 1.0, WavePacket((1, 0), 0.125), 0.0)
    assert 0.0 < fine.r_asym <= 0.8 * coarse.r_asym
    assert fine.r_decomp < 0.5
    assert math.isfinite(coarse.r_decomp)


def test_fit_decomposition_recovers_coefficients() -> None:
    records = [
        PacketResidual(d, e, 1.0, 0.0, 2.0 * d + 3.0 * math.sqrt(e), 8, 32)
        for d in (0.25, 0.125, 0.0625)
        for e in (1e-2, 1e-3, 1e-4)
    ]
    fit = fit_decomposition(records)
    assert fit.c_delta == pytest.approx(2.0)
    assert fit.c_sqrt_eps == pytest.approx(3.0)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.points == 9
    with pytest.raises(ValueError):
        fit_decomposition(records[:1])


def test_packet_table(tmp_path: Path) -> None:
    records = [PacketResidual(0.25, 1e-2, 1.0, 0.1, 0.2, 8, 32)]
    frame = pl.read_csv(write_packet_csv(records, tmp_path / "packet_sweep.csv", "h"))
    assert frame["r_decomp"].to_list() == [0.2]
    assert frame["config_hash"].to_list() == ["h"]


# ---------------------------------------------------------------------------
# Essential-spectrum diagnostic
# ---------------------------------------------------------------------------


def test_essential_diagnostic_on_zero_flow(tmp_path: Path) -> None:
    rows = essential_radius_diagnostic(catalog_flow("zero"), 1.0, [2, 3], mu_hat=0.0, delta=0.1)
    assert [r["N"] for r in rows] == [2, 3]
    assert [r["dimension"] for r in rows] == [24, 48]
    for row in rows:
        assert row["unstable_count"] == 0
        assert row["near_axis_count"] == row["dimension"]
        assert row["growth_surrogate"] == pytest.approx(1.0)
        assert row["max_real"] == 0.0

    frame = pl.read_csv(write_nsweep_csv(rows, tmp_path / "nsweep.csv", "h"))
    assert frame.height == 2

    with pytest.raises(ValueError):
        essential_radius_diagnostic(catalog_flow("zero"), 1.0, [3, 2], mu_hat=0.0)


def test_near_axis_eigenvalues_accumulate() -> None:
    rows = essential_radius_diagnostic(
        catalog_flow("shear", {"m": 1}), 1.0, [4, 6, 8], mu_hat=0.0
    )
    counts = [r["near_axis_count"] for r in rows]
    assert counts[-1] > counts[0]
    assert all(r["growth_surrogate"] > 0.0 for r in rows)


def test_growth_surrogate_compresses_high_modes() -> None:
    flow = catalog_flow("cellular", {"A": 1.0})
    [row] = essential_radius_diagnostic(flow, 0.5, [4], mu_hat=0.0)
    ms = build_mode_set(2, 4)
    # |k| >= 2: everything but the eight modes with |k|^2 in {1, 2}
    high = ms.column_wavenumber_sq >= 4.0
    assert int(high.sum()) == 72
    G = linalg.expm(0.5 * assemble(flow, ms, 0.0).matrix)
    expected = np.max(np.abs(linalg.eigvals(G[np.ix_(high, high)])))
    assert row["growth_surrogate"] == pytest.approx(expected, rel=1e-8)


@pytest.fixture(scope="module")
def shear_sweep() -> list:
    flow = catalog_flow("shear", {"m": 1, "A": 1.0})
    return decomposition_sweep(flow, 1.0, [0.25, 0.125, 0.0625], [1e-2, 1e-3, 1e-4], (1, 0))


@slow
def test_asymptotic_residual_halves_with_delta(shear_sweep: list) -> None:
    r_asym = [r.r_asym for r in shear_sweep if r.eps == 1e-2]
    assert len(r_asym) == 3
    for coarse, fine in zip(r_asym, r_asym[1:]):
        assert 0.0 < fine <= 0.8 * coarse


@slow
def test_decomposition_fit_on_shear_sweep(shear_sweep: list) -> None:
    fit = fit_decomposition(shear_sweep)
    assert fit.points == 9
    assert fit.r_squared >= 0.9
