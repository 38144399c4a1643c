from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import polars as pl
import pytest
from vvspec.flows import catalog_flow
from vvspec.galerkin import GalerkinOperator, assemble
from vvspec.lattice import build_mode_set, random_field
from vvspec.semigroup import propagator
from vvspec.spectra import (
    AmbiguousTraceError,
    ContourCrossingError,
    InadmissibleShiftError,
    NearSingularShiftError,
    ReductionDeterminant,
    RieszProjection,
    continue_in_viscosity,
    default_delta,
    eigen_decompose,
    isolation_radius,
    locate_roots,
    match_eigenvalues,
    multiplicity,
    reduction_determinant,
    resolvent_solve,
    riesz_projection,
    spectral_radius_estimate,
    unstable_set,
    write_branch_csv,
    write_spectrum_csv,
)

slow = pytest.mark.skipif(
    os.getenv("VVS_SKIP_SLOW", "").lower() == "true",
    reason="dense eigen sweeps skipped",
)


def _synthetic(values: list[complex]) -> GalerkinOperator:
    ms = build_mode_set(2, 1)
    matrix = np.zeros((ms.dimension, ms.dimension), dtype=np.complex128)
    matrix[: len(values), : len(values)] = np.diag(values)
    return GalerkinOperator(modeset=ms, eps=0.0, matrix=matrix, flow_name="synthetic")


@pytest.fixture(scope="module")
def shear_setup() -> tuple:
    flow = catalog_flow("shear", {"m": 2, "A": 1.0})
    ms = build_mode_set(2, 6)
    op = assemble(flow, ms, 0.0)
    spec = eigen_decompose(op)
    lam0 = complex(spec.eigenvalues[0])
    return flow, ms, op, spec, lam0


def test_residual_breach_is_reported(shear_setup: tuple) -> None:
    _, _, op, spec, _ = shear_setup
    assert not spec.residual_breach
    strict = eigen_decompose(op, residual_tol=1e-300)
    assert strict.residual_breach
    assert np.array_equal(strict.eigenvalues, spec.eigenvalues)


def test_zero_flow_spectrum() -> None:
    ms = build_mode_set(2, 2)
    spec = eigen_decompose(assemble(catalog_flow("zero"), ms, 0.1))
    expected = np.sort(-0.1 * ms.column_wavenumber_sq)[::-1]
    assert np.allclose(spec.eigenvalues, expected, atol=1e-14)
    assert np.all(spec.residuals < 1e-12)
    assert spec.eps == 0.1
    assert spec.inside(-0.1, 0.05).size == 4


def test_spectrum_order() -> None:
    spec = eigen_decompose(_synthetic([1 + 2j, 1 - 1j, 3.0, -1.0]))
    assert list(spec.eigenvalues[:3]) == [3.0, 1 - 1j, 1 + 2j]
    assert spec.eigenvalues[-1] == -1.0


def test_unstable_set_is_strict() -> None:
    spec = eigen_decompose(_synthetic([1 + 2j, 1 - 1j, 3.0, -1.0]))
    assert unstable_set(spec, 0.5, 0.5) == [3.0]
    assert len(unstable_set(spec, 0.0, 0.0)) == 3
    with pytest.raises(ValueError):
        unstable_set(spec, 0.0, -0.1)

    zero = eigen_decompose(assemble(catalog_flow("zero"), build_mode_set(2, 2), 0.0))
    assert unstable_set(zero, 0.0, 0.0) == []


def test_default_delta() -> None:
    assert default_delta(0.5) == pytest.approx(0.1)
    assert default_delta(-3.0) == pytest.approx(0.3)


def test_match_eigenvalues() -> None:
    worst, rows, cols = match_eigenvalues([1.0, 2j], [2.1j, 1.05])
    assert worst == pytest.approx(0.1)
    assert list(cols[np.argsort(rows)]) == [1, 0]
    with pytest.raises(ValueError):
        match_eigenvalues([1.0], [1.0, 2.0])


def test_isolation_radius() -> None:
    assert isolation_radius([0.0, 1.0, 3.0], 0.0) == pytest.approx(0.5)
    assert isolation_radius([0.0, 1e-9, 1.0], 0.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        isolation_radius([2.0], 2.0)


def test_resolvent_solve() -> None:
    ms = build_mode_set(2, 4)
    op = assemble(catalog_flow("shear", {"m": 1, "A": 1.0}), ms, 0.01)
    rng = np.random.default_rng(1)
    f = random_field(ms, rng)
    a, b = 3.0 + 0.5j, -2.0 + 4.0j

    wa = resolvent_solve(op, a, f).coefficients
    residual = op.matrix @ wa - a * wa - f.coefficients
    assert np.linalg.norm(residual) <= 1e-10 * np.linalg.norm(f.coefficients)

    # R(a) - R(b) = (a - b) R(a) R(b)
    wb = resolvent_solve(op, b, f)
    lhs = wa - wb.coefficients
    rhs = (a - b) * resolvent_solve(op, a, wb).coefficients
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_resolvent_near_eigenvalue() -> None:
    ms = build_mode_set(2, 2)
    op = assemble(catalog_flow("zero"), ms, 0.1)
    f = random_field(ms, np.random.default_rng(0))
    with pytest.raises(NearSingularShiftError):
        resolvent_solve(op, -0.1, f)
    with pytest.raises(NearSingularShiftError) as exc:
        resolvent_solve(op, -0.1 + 1e-13, f)
    assert exc.value.distance < 1e-10


def test_riesz_on_diagonal_operator() -> None:
    ms = build_mode_set(2, 2)
    op = assemble(catalog_flow("zero"), ms, 0.1)
    proj = riesz_projection(op, -0.1, 0.05)
    expected = np.diag((ms.column_wavenumber_sq == 1).astype(float))
    assert np.allclose(proj.matrix, expected, atol=1e-12)
    assert multiplicity(proj) == 4
    assert proj.inside_count == 4
    assert proj.idempotency_defect < 1e-10


def test_riesz_empty_contour() -> None:
    op = assemble(catalog_flow("zero"), build_mode_set(2, 2), 0.1)
    proj = riesz_projection(op, 5.0, 0.1)
    assert np.linalg.norm(proj.matrix) < 1e-12
    assert multiplicity(proj) == 0
    assert proj.inside_count == 0


def test_riesz_contour_crossing() -> None:
    op = assemble(catalog_flow("zero"), build_mode_set(2, 2), 0.1)
    with pytest.raises(ContourCrossingError) as exc:
        riesz_projection(op, -0.1, 0.1)
    assert exc.value.eigenvalue == pytest.approx(-0.2)


def test_riesz_input_validation() -> None:
    op = assemble(catalog_flow("zero"), build_mode_set(2, 1), 0.1)
    with pytest.raises(ValueError):
        riesz_projection(op, 0.0, 0.5, nodes=8)
    with pytest.raises(ValueError):
        riesz_projection(op, 0.0, -1.0)


def test_ambiguous_trace() -> None:
    proj = RieszProjection(
        matrix=np.eye(2),
        center=0j,
        radius=1.0,
        nodes=16,
        idempotency_defect=0.0,
        trace=1.5 + 0j,
        inside_count=1,
    )
    with pytest.raises(AmbiguousTraceError):
        multiplicity(proj)


def test_riesz_sum_rule_on_shear(shear_setup: tuple) -> None:
    _, _, op, spec, lam0 = shear_setup
    assert lam0.real > 1e-3
    radius = isolation_radius(spec.eigenvalues, lam0)
    proj = riesz_projection(op, lam0, radius, spectrum=spec)
    inside = spec.inside(lam0, radius)
    assert multiplicity(proj) == inside.size == proj.inside_count
    # P commutes with L and is stable under node doubling
    assert np.linalg.norm(proj.matrix @ op.matrix - op.matrix @ proj.matrix) < 1e-6
    coarse = riesz_projection(op, lam0, radius, nodes=32, spectrum=spec)
    assert np.linalg.norm(coarse.matrix - proj.matrix, 2) < 1e-6


def test_spectral_radius_estimate() -> None:
    matrix = np.diag([0.5, -0.9, 0.3 + 0.2j])
    assert spectral_radius_estimate(matrix) == pytest.approx(0.9, rel=1e-6)
    rotation = np.array([[0.0, -0.8], [0.8, 0.0]])
    assert spectral_radius_estimate(rotation) == pytest.approx(0.8, rel=1e-6)
    assert spectral_radius_estimate(np.zeros((3, 3))) == 0.0


def test_reduction_determinant_of_diagonal_propagator() -> None:
    ms = build_mode_set(2, 2)
    G = propagator(assemble(catalog_flow("zero"), ms, 0.1), 1.0).G
    g = np.exp(-0.1 * ms.column_wavenumber_sq)
    # inner ball covers every mode: g(z) = det(I - G / z)
    value = reduction_determinant(G, ms, 3.0, 2.0)
    assert value == pytest.approx(np.prod(1.0 - g / 2.0), rel=1e-10)

    # partial ball: only the masked modes contribute factors
    det = ReductionDeterminant(G, ms, 1.5)
    masked = ms.column_wavenumber_sq <= 2
    assert det.minus_radius == pytest.approx(np.exp(-0.4) * 1.001, rel=1e-6)
    assert det(2.0) == pytest.approx(np.prod(1.0 - g[masked] / 2.0), rel=1e-10)


def test_reduction_determinant_inadmissible_shift() -> None:
    ms = build_mode_set(2, 2)
    G = propagator(assemble(catalog_flow("zero"), ms, 0.1), 1.0).G
    with pytest.raises(InadmissibleShiftError) as exc:
        reduction_determinant(G, ms, 1.5, 0.1)
    assert exc.value.radius > 0.6


def test_locate_roots_on_diagonal_propagator() -> None:
    ms = build_mode_set(2, 2)
    G = propagator(assemble(catalog_flow("zero"), ms, 0.1), 1.0).G
    target = np.exp(-0.1)
    roots = locate_roots(G, ms, 1.5, target, 0.03)
    assert roots.size == 4
    assert abs(np.mean(roots) - target) < 1e-8
    assert np.all(np.abs(roots - target) < 1e-3)

    assert locate_roots(G, ms, 1.5, 1.5, 0.1).size == 0
    with pytest.raises(InadmissibleShiftError):
        locate_roots(G, ms, 1.5, 0.7, 0.1)


def test_locate_roots_rejects_disk_over_minus_spectrum() -> None:
    # every node admissible, but the disk holds eigenvalues of G_minus whose
    # poles would cancel zeros in the winding number
    ms = build_mode_set(2, 3)
    rng = np.random.default_rng(5)
    G = rng.standard_normal((ms.dimension, ms.dimension)) / np.sqrt(ms.dimension)
    det = ReductionDeterminant(G, ms, 1.5)
    radius = 2.0 * det.minus_radius + 1.0
    with pytest.raises(InadmissibleShiftError):
        locate_roots(G, ms, 1.5, 0.0, radius)

    diagonal = propagator(assemble(catalog_flow("zero"), ms, 0.1), 1.0).G
    with pytest.raises(InadmissibleShiftError):
        locate_roots(diagonal, ms, 1.5, 0.0, 1.0)
    with pytest.raises(ValueError):
        locate_roots(diagonal, ms, 1.5, 2.0, 0.0)


@slow
def test_reduction_roots_match_propagator_eigenvalues(shear_setup: tuple) -> None:
    _, ms, op, spec, lam0 = shear_setup
    G = propagator(op, 1.0).G
    mu_all = np.linalg.eigvals(G)
    mu0 = np.exp(lam0)
    radius = isolation_radius(mu_all, mu0)

    for N_inner in (3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0):
        det = ReductionDeterminant(G, ms, N_inner)
        if 1.05 * det.minus_radius < abs(mu0) - radius:
            break
    roots = locate_roots(G, ms, N_inner, mu0, radius)
    inside = mu_all[np.abs(mu_all - mu0) < radius]
    assert roots.size == inside.size
    assert abs(np.mean(roots) - np.mean(inside)) < 1e-6


def test_continue_in_viscosity(shear_setup: tuple) -> None:
    flow, ms, _, spec, lam0 = shear_setup
    radius = isolation_radius(spec.eigenvalues, lam0)
    curve = continue_in_viscosity(flow, ms, lam0, radius, [1e-3, 1e-4])
    assert curve.eps_grid == [1e-3, 1e-4, 0.0]
    assert not curve.flagged[-1]
    assert curve.lambda_of_eps[-1] == pytest.approx(lam0, abs=1e-10)
    assert curve.multiplicity_of_eps[-1] == curve.reference_multiplicity
    assert curve.projection_distance[-1] < 1e-8

    near, far = curve.lambda_of_eps[1], curve.lambda_of_eps[0]
    if near is not None and far is not None:
        assert abs(near - lam0) <= abs(far - lam0) + 1e-9

    threaded = continue_in_viscosity(flow, ms, lam0, radius, [1e-3, 1e-4], threads=2)
    assert threaded.flagged == curve.flagged
    for a, b in zip(threaded.lambda_of_eps, curve.lambda_of_eps):
        assert (a is None and b is None) or abs(a - b) < 1e-10


def test_continue_rejects_bad_input(shear_setup: tuple) -> None:
    flow, ms, _, spec, lam0 = shear_setup
    radius = isolation_radius(spec.eigenvalues, lam0)
    with pytest.raises(ValueError):
        continue_in_viscosity(flow, ms, lam0, radius, [1e-4, 1e-3])
    with pytest.raises(ValueError):
        continue_in_viscosity(flow, ms, lam0 + 0.37, radius, [1e-3])


def test_tables(tmp_path: Path, shear_setup: tuple) -> None:
    flow, ms, _, spec, lam0 = shear_setup
    path = write_spectrum_csv(spec, tmp_path / "spectrum.csv", "h1")
    frame = pl.read_csv(path)
    assert frame.height == ms.dimension
    assert frame["re"].to_list() == pytest.approx(spec.eigenvalues.real.tolist())

    radius = isolation_radius(spec.eigenvalues, lam0)
    curve = continue_in_viscosity(flow, ms, lam0, radius, [1e-3])
    branch = pl.read_csv(write_branch_csv(curve, tmp_path / "branch.csv", "h1"))
    assert branch.height == 2
    assert branch["eps"].to_list() == [1e-3, 0.0]


def test_disjoint_contours_give_orthogonal_projections(shear_setup: tuple) -> None:
    _, _, op, spec, lam0 = shear_setup
    r0 = isolation_radius(spec.eigenvalues, lam0)
    cluster_tol = 1e-6
    others = [v for v in spec.eigenvalues if abs(v - lam0) > cluster_tol]
    # the best isolated eigenvalue outside the lambda0 cluster; both radii are
    # at most half the distance between the two, so the circles are disjoint
    other = max(others, key=lambda v: isolation_radius(spec.eigenvalues, v))
    r1 = isolation_radius(spec.eigenvalues, other)
    assert abs(other - lam0) >= r0 + r1

    p0 = riesz_projection(op, lam0, r0, spectrum=spec)
    p1 = riesz_projection(op, other, r1, spectrum=spec)
    assert multiplicity(p0) >= 1
    assert multiplicity(p1) >= 1
    scale = max(1.0, np.linalg.norm(p0.matrix, 2) * np.linalg.norm(p1.matrix, 2))
    assert np.linalg.norm(p0.matrix @ p1.matrix, 2) <= 1e-6 * scale
    assert np.linalg.norm(p1.matrix @ p0.matrix, 2) <= 1e-6 * scale


@slow
def test_branch_convergence_on_kolmogorov_shear() -> None:
    # shear(2, 1) at N = 16 on the full eps grid; r is half the isolation distance
    N = 16
    flow = catalog_flow("shear", {"m": 2, "A": 1.0})
    ms = build_mode_set(2, N)
    spec0 = eigen_decompose(assemble(flow, ms, 0.0))
    lam0 = complex(spec0.eigenvalues[0])
    assert lam0.real == pytest.approx(0.52248, abs=1e-4)

    radius = isolation_radius(spec0.eigenvalues, lam0)
    assert radius == pytest.approx(0.2224, abs=1e-3)
    grid = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
    curve = continue_in_viscosity(flow, ms, lam0, radius, grid)
    assert curve.eps_grid == grid + [0.0]
    assert curve.reference_multiplicity == 2

    for eps in grid[1:]:
        spec = eigen_decompose(assemble(flow, ms, eps))
        assert unstable_set(spec, 0.0, default_delta(0.0))

    smallest = [2, 3, 4]
    assert [curve.multiplicity_of_eps[i] for i in smallest] == [2, 2, 2]
    lam_dist = [abs(curve.lambda_of_eps[i] - lam0) for i in smallest]
    proj_dist = [curve.projection_distance[i] for i in smallest]
    assert lam_dist[0] >= lam_dist[1] >= lam_dist[2]
    assert lam_dist[2] < 5e-3
    assert proj_dist[0] >= proj_dist[1] >= proj_dist[2]
    # converges, but at eps = 1e-3 the projection is still about 0.107 away
    assert proj_dist[2] == pytest.approx(0.1065, abs=3e-3)
