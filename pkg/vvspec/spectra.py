"""
Eigenvalues, Riesz projections, viscosity continuation and the reduction
determinant.

Riesz projections use the M-node trapezoidal rule on the circle |z - c| = r.
For a matrix L that sum is the rational function

    S = sum_j w_j (z_j - L)^{-1} = (I - ((L - c) / r)^M)^{-1},

which is evaluated blockwise in a Schur basis ordered so that eigenvalues
inside the circle come first.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from .config import get_settings
from .errors import NumericalFailure
from .flows import SteadyFlow
from .galerkin import GalerkinOperator, OperatorTooLargeError, assemble
from .lattice import ModeSet, SpectralField, ball_mask, check_same_modeset, to_fiber
from .logging_utils import get_logger, log_numerical_issue, log_structured
from .manifest import matrix_fingerprint, write_table

logger = get_logger(__name__)


class EigenSolverError(NumericalFailure):
    def __init__(self, message: str, matrix_hash: str) -> None:
        super().__init__(f"{message} (matrix sha256={matrix_hash})")
        self.matrix_hash = matrix_hash


class NearSingularShiftError(NumericalFailure):
    def __init__(self, message: str, distance: float) -> None:
        super().__init__(f"{message} (estimated distance to spectrum {distance:.3e})")
        self.distance = distance


class ContourCrossingError(NumericalFailure):
    def __init__(self, message: str, eigenvalue: complex, distance: float) -> None:
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.distance = distance


class RieszProjectionError(NumericalFailure):
    def __init__(self, message: str, defect: float) -> None:
        super().__init__(message)
        self.defect = defect


class AmbiguousTraceError(NumericalFailure):
    def __init__(self, message: str, trace: complex) -> None:
        super().__init__(message)
        self.trace = trace


class InadmissibleShiftError(NumericalFailure):
    def __init__(self, message: str, z: complex, radius: float) -> None:
        super().__init__(message)
        self.z = z
        self.radius = radius


@dataclass(frozen=True, eq=False)
class SpectrumResult:
    eigenvalues: np.ndarray
    right_eigenvectors: np.ndarray
    residuals: np.ndarray
    eps: float
    modeset: Optional[ModeSet] = None
    flow_name: str = ""
    # True when some eigenpair residual exceeded the tolerance used.
    residual_breach: bool = False

    def inside(self, center: complex, radius: float) -> np.ndarray:
        return self.eigenvalues[np.abs(self.eigenvalues - center) < radius]


@dataclass(frozen=True, eq=False)
class RieszProjection:
    matrix: np.ndarray
    center: complex
    radius: float
    nodes: int
    idempotency_defect: float
    trace: complex
    inside_count: int


@dataclass
class BranchCurve:
    lambda0: complex
    radius: float
    eps_grid: List[float]
    lambda_of_eps: List[Optional[complex]]
    centroid_of_eps: List[Optional[complex]]
    projection_distance: List[Optional[float]]
    multiplicity_of_eps: List[Optional[int]]
    inside_count_of_eps: List[int]
    flagged: List[bool]
    flag_reason: List[str] = field(default_factory=list)
    reference_multiplicity: int = 0

    def rows(self) -> List[Dict[str, Any]]:
        out = []
        for i, eps in enumerate(self.eps_grid):
            lam = self.lambda_of_eps[i]
            out.append(
                {
                    "eps": eps,
                    "re": None if lam is None else lam.real,
                    "im": None if lam is None else lam.imag,
                    "distance_to_lambda0": None if lam is None else abs(lam - self.lambda0),
                    "multiplicity": self.multiplicity_of_eps[i],
                    "inside_count": self.inside_count_of_eps[i],
                    "projection_distance": self.projection_distance[i],
                    "flagged": self.flagged[i],
                    "flag_reason": self.flag_reason[i],
                }
            )
        return out


# ---------------------------------------------------------------------------
# Eigenvalues
# ---------------------------------------------------------------------------


def _sort_order(values: np.ndarray) -> np.ndarray:
    """Decreasing real part, ties by increasing imaginary part."""
    return np.lexsort((values.imag, -np.round(values.real, 10)))


def eigen_decompose(
    op: GalerkinOperator,
    residual_tol: Optional[float] = None,
) -> SpectrumResult:
    """
    All eigenpairs of the dense Galerkin matrix with residuals
    ||L v - lam v|| / ||v||. Residuals above `residual_tol` (default: the
    residual_tol setting) are logged and set
    `residual_breach` on the result; they are not raised.

    Raises EigenSolverError (with the matrix hash) on non-convergence.
    """
    settings = get_settings()
    tol = residual_tol if residual_tol is not None else settings.residual_tol
    if op.dimension > settings.max_dense_dimension:
        raise OperatorTooLargeError(
            f"dimension {op.dimension} exceeds the cap {settings.max_dense_dimension}"
        )
    matrix = op.matrix
    if not np.all(np.isfinite(matrix)):
        raise EigenSolverError("matrix has non-finite entries", matrix_fingerprint(matrix))
    try:
        values, vectors = linalg.eig(matrix)
    except linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigensolver failed: {exc}", matrix_fingerprint(matrix)) from exc

    order = _sort_order(values)
    values = values[order]
    vectors = vectors[:, order]
    norms = np.linalg.norm(vectors, axis=0)
    norms[norms == 0] = 1.0
    residuals = np.linalg.norm(matrix @ vectors - vectors * values[None, :], axis=0) / norms

    worst = float(residuals.max()) if residuals.size else 0.0
    if worst > tol:
        log_numerical_issue(
            logger,
            "eigen_residual_breach",
            "warning",
            worst_residual=worst,
            tolerance=tol,
            flow=op.flow_name,
            eps=op.eps,
        )
    return SpectrumResult(
        eigenvalues=values,
        right_eigenvectors=vectors,
        residuals=residuals,
        eps=op.eps,
        modeset=op.modeset,
        flow_name=op.flow_name,
        residual_breach=worst > tol,
    )


def unstable_set(spec: SpectrumResult, mu: float, delta: float) -> List[complex]:
    """Eigenvalues with Re > mu + delta, in spectrum order."""
    if delta < 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    return [complex(v) for v in spec.eigenvalues if v.real > mu + delta]


def default_delta(mu: float) -> float:
    return 0.1 * max(1.0, abs(mu))


def match_eigenvalues(
    a: Sequence[complex],
    b: Sequence[complex],
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Optimal one-to-one matching; returns (max distance, rows, cols)."""
    va = np.asarray(a, dtype=np.complex128)
    vb = np.asarray(b, dtype=np.complex128)
    if va.size != vb.size:
        raise ValueError(f"cannot match {va.size} against {vb.size} eigenvalues")
    cost = np.abs(va[:, None] - vb[None, :])
    rows, cols = linear_sum_assignment(cost)
    worst = float(cost[rows, cols].max()) if rows.size else 0.0
    return worst, rows, cols


def isolation_radius(
    eigenvalues: Sequence[complex],
    lambda0: complex,
    cluster_tol: Optional[float] = None,
) -> float:
    """Half the distance from the cluster at lambda0 to the rest of the spectrum."""
    tol = cluster_tol if cluster_tol is not None else get_settings().cluster_tol
    values = np.asarray(eigenvalues, dtype=np.complex128)
    dist = np.abs(values - lambda0)
    others = dist[dist > tol]
    if others.size == 0:
        raise ValueError("lambda0 is the only eigenvalue; no isolation radius")
    return 0.5 * float(others.min())


# ---------------------------------------------------------------------------
# Resolvent
# ---------------------------------------------------------------------------


def resolvent_solve(
    op: GalerkinOperator,
    zeta: complex,
    rhs: SpectralField,
) -> SpectralField:
    """
    w = (L - zeta)^{-1} rhs with ||(L - zeta) w - rhs|| <= resolvent_tol ||rhs||.

    The LU factorization's reciprocal condition estimate gives the distance
    estimate ||A^{-1}||^{-1}; shifts closer than singular_shift_tol raise
    NearSingularShiftError.
    """
    settings = get_settings()
    check_same_modeset(op.modeset, rhs.modeset)
    b = to_fiber(rhs).coefficients
    A = op.matrix - zeta * np.eye(op.dimension)
    anorm = float(np.linalg.norm(A, 1))
    lu, piv = linalg.lu_factor(A, check_finite=True)
    if np.any(np.diag(lu) == 0):
        raise NearSingularShiftError("shift is an eigenvalue", 0.0)
    (gecon,) = linalg.get_lapack_funcs(("gecon",), (lu,))
    rcond, _ = gecon(lu, anorm, norm="1")
    distance = float(rcond) * anorm
    if distance < settings.singular_shift_tol:
        raise NearSingularShiftError("shift is too close to the spectrum", distance)

    w = linalg.lu_solve((lu, piv), b)
    bnorm = float(np.linalg.norm(b)) or 1.0
    residual = A @ w - b
    if np.linalg.norm(residual) > settings.resolvent_tol * bnorm:
        w = w - linalg.lu_solve((lu, piv), residual)
        residual = A @ w - b
    rel = float(np.linalg.norm(residual)) / bnorm
    if rel > settings.resolvent_tol:
        raise NearSingularShiftError(
            f"resolvent residual {rel:.3e} above tolerance", distance
        )
    return SpectralField(op.modeset, w, "fiber")


# ---------------------------------------------------------------------------
# Riesz projections
# ---------------------------------------------------------------------------


def _check_guard_band(
    eigenvalues: np.ndarray,
    center: complex,
    radius: float,
    guard: float,
) -> None:
    dist = np.abs(np.abs(eigenvalues - center) - radius)
    if dist.size and dist.min() <= guard * radius:
        i = int(np.argmin(dist))
        raise ContourCrossingError(
            f"eigenvalue {complex(eigenvalues[i]):.6g} lies within the guard band "
            f"of the contour (distance {float(dist[i]):.3e})",
            eigenvalue=complex(eigenvalues[i]),
            distance=float(dist[i]),
        )


def _trapezoid_sum(
    matrix: np.ndarray,
    center: complex,
    radius: float,
    nodes: int,
) -> Tuple[np.ndarray, int]:
    """
    Closed form of the M-node trapezoid sum of the resolvent, returned in
    the original basis together with the number of Schur eigenvalues inside.
    """
    D = matrix.shape[0]
    T, Z, k = linalg.schur(
        matrix,
        output="complex",
        sort=lambda z: abs(z - center) < radius,
    )
    eye = np.eye(D, dtype=np.complex128)
    S = np.zeros((D, D), dtype=np.complex128)

    if k > 0:
        U11 = (T[:k, :k] - center * eye[:k, :k]) / radius
        S[:k, :k] = linalg.solve(eye[:k, :k] - np.linalg.matrix_power(U11, nodes), eye[:k, :k])
    if k < D:
        # Outside the circle: S22 = -V^M (I - V^M)^{-1} with V = r (T22 - c)^{-1}.
        shifted = T[k:, k:] - center * eye[k:, k:]
        V = radius * linalg.solve_triangular(shifted, eye[k:, k:])
        VM = np.linalg.matrix_power(V, nodes)
        S[k:, k:] = -linalg.solve(eye[k:, k:] - VM, VM)
    if 0 < k < D:
        rhs = S[:k, :k] @ T[:k, k:] - T[:k, k:] @ S[k:, k:]
        S[:k, k:] = linalg.solve_sylvester(T[:k, :k], -T[k:, k:], rhs)

    return Z @ S @ Z.conj().T, int(k)


def riesz_projection(
    op: GalerkinOperator,
    center: complex,
    radius: float,
    nodes: Optional[int] = None,
    spectrum: Optional[SpectrumResult] = None,
) -> RieszProjection:
    """
    Riesz projection onto the spectral subspace inside |z - center| = radius.

    Preconditions: no eigenvalue within guard_band * radius of the circle
    (ContourCrossingError), nodes >= 16. The idempotency defect is checked
    and a breach raises RieszProjectionError.
    """
    settings = get_settings()
    nodes = nodes if nodes is not None else settings.riesz_nodes
    if nodes < 16:
        raise ValueError(f"at least 16 quadrature nodes are required, got {nodes}")
    if radius <= 0:
        raise ValueError(f"contour radius must be positive, got {radius}")
    spec = spectrum if spectrum is not None else eigen_decompose(op)
    _check_guard_band(spec.eigenvalues, center, radius, settings.riesz_guard_band)

    P, inside = _trapezoid_sum(op.matrix, complex(center), float(radius), nodes)
    defect = float(np.linalg.norm(P @ P - P, 2)) if P.size else 0.0
    trace = complex(np.trace(P))
    if defect > settings.riesz_defect_tol:
        raise RieszProjectionError(
            f"idempotency defect {defect:.3e} above tolerance "
            f"{settings.riesz_defect_tol:.1e}",
            defect=defect,
        )
    return RieszProjection(
        matrix=P,
        center=complex(center),
        radius=float(radius),
        nodes=int(nodes),
        idempotency_defect=defect,
        trace=trace,
        inside_count=inside,
    )


def multiplicity(proj: RieszProjection) -> int:
    """Nearest integer to Re trace; AmbiguousTraceError if not within trace_tol."""
    tol = get_settings().trace_tol
    nearest = int(round(proj.trace.real))
    if abs(proj.trace - nearest) > tol:
        raise AmbiguousTraceError(
            f"trace {proj.trace:.6g} is not within {tol} of an integer",
            trace=proj.trace,
        )
    return nearest


# ---------------------------------------------------------------------------
# Viscosity continuation
# ---------------------------------------------------------------------------


def _nearest_to(candidates: np.ndarray, lambda0: complex) -> Optional[complex]:
    if candidates.size == 0:
        return None
    order = sorted(
        range(candidates.size),
        key=lambda i: (abs(candidates[i] - lambda0), abs(candidates[i].imag)),
    )
    return complex(candidates[order[0]])


def _branch_point(
    flow: SteadyFlow,
    modeset: ModeSet,
    eps: float,
    lambda0: complex,
    radius: float,
    nodes: int,
    reference: np.ndarray,
) -> Dict[str, Any]:
    op = assemble(flow, modeset, eps)
    spec = eigen_decompose(op)
    inside = spec.inside(lambda0, radius)
    point: Dict[str, Any] = {
        "lambda": _nearest_to(inside, lambda0),
        "centroid": complex(inside.mean()) if inside.size else None,
        "inside_count": int(inside.size),
        "multiplicity": None,
        "distance": None,
        "flagged": False,
        "reason": "",
    }
    try:
        proj = riesz_projection(op, lambda0, radius, nodes, spectrum=spec)
        point["multiplicity"] = multiplicity(proj)
        point["distance"] = float(np.linalg.norm(proj.matrix - reference, 2))
    except (ContourCrossingError, RieszProjectionError, AmbiguousTraceError) as exc:
        point["flagged"] = True
        point["reason"] = type(exc).__name__
        log_numerical_issue(
            logger,
            "branch_point_flagged",
            "warning",
            eps=eps,
            reason=type(exc).__name__,
            detail=str(exc),
        )
    return point


def continue_in_viscosity(
    flow: SteadyFlow,
    modeset: ModeSet,
    lambda0: complex,
    radius: float,
    eps_grid: Sequence[float],
    nodes: Optional[int] = None,
    threads: int = 1,
) -> BranchCurve:
    """
    Follow the eigenvalues inside Gamma = circle(lambda0, radius) along eps_grid.

    0 is appended to the grid when missing. lambda0 must be an eigenvalue of
    L^0 isolated by Gamma (ContourCrossingError otherwise). Grid points where
    Gamma is crossed are flagged and kept in the curve.
    """
    settings = get_settings()
    nodes = nodes if nodes is not None else settings.riesz_nodes
    grid = [float(e) for e in eps_grid]
    if grid and grid[-1] != 0.0:
        grid.append(0.0)
    if any(e < 0 for e in grid) or any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("eps_grid must be strictly decreasing and non-negative")

    op0 = assemble(flow, modeset, 0.0)
    spec0 = eigen_decompose(op0)
    gap = float(np.min(np.abs(spec0.eigenvalues - lambda0)))
    if gap > settings.cluster_tol * max(1.0, abs(lambda0)):
        raise ValueError(f"lambda0={lambda0} is not an eigenvalue of L^0 (gap {gap:.3e})")
    reference = riesz_projection(op0, lambda0, radius, nodes, spectrum=spec0)
    reference_mult = multiplicity(reference)

    def run(eps: float) -> Dict[str, Any]:
        return _branch_point(flow, modeset, eps, lambda0, radius, nodes, reference.matrix)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(run, grid))
    else:
        points = [run(eps) for eps in grid]

    curve = BranchCurve(
        lambda0=complex(lambda0),
        radius=float(radius),
        eps_grid=grid,
        lambda_of_eps=[p["lambda"] for p in points],
        centroid_of_eps=[p["centroid"] for p in points],
        projection_distance=[p["distance"] for p in points],
        multiplicity_of_eps=[p["multiplicity"] for p in points],
        inside_count_of_eps=[p["inside_count"] for p in points],
        flagged=[p["flagged"] for p in points],
        flag_reason=[p["reason"] for p in points],
        reference_multiplicity=reference_mult,
    )
    log_structured(
        logger,
        logging.INFO,
        "branch_continued",
        flow=flow.name,
        lambda0_re=curve.lambda0.real,
        lambda0_im=curve.lambda0.imag,
        radius=radius,
        flagged=sum(curve.flagged),
    )
    return curve


# ---------------------------------------------------------------------------
# Reduction determinant
# ---------------------------------------------------------------------------


def spectral_radius_estimate(
    matrix: np.ndarray,
    iterations: int = 300,
    seed: int = 0,
) -> float:
    """
    Power-iteration estimate of the spectral radius.

    Uses the geometric mean growth over the second half of the iterations so
    that equal-modulus pairs do not stall the estimate.
    """
    rng = np.random.default_rng(seed)
    D = matrix.shape[0]
    x = rng.standard_normal(D) + 1j * rng.standard_normal(D)
    x /= np.linalg.norm(x)
    log_growth = []
    for _ in range(iterations):
        y = matrix @ x
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            return 0.0
        log_growth.append(np.log(norm))
        x = y / norm
    tail = log_growth[iterations // 2 :]
    return float(np.exp(np.mean(tail)))


class ReductionDeterminant:
    """
    g(z) = det(I + P (G_minus - z)^{-1} G_plus P) on range(P), with
    P = P_{N_inner}, G_minus = G (I - P), G_plus = G P.

    g(z) = det(G - z) / det(G_minus - z), so its zeros in the admissible region
    |z| > rho(G_minus) are the eigenvalues of G there.
    """

    def __init__(
        self,
        G: np.ndarray,
        modeset: ModeSet,
        N_inner: float,
        radius_margin: float = 1e-3,
    ) -> None:
        mask = ball_mask(modeset, N_inner)
        if G.shape != (modeset.dimension, modeset.dimension):
            raise ValueError("propagator shape does not match the ModeSet")
        self.G = G
        self.idx = np.nonzero(mask)[0]
        self.G_minus = np.where(mask[None, :], 0.0, G)
        self.minus_radius = spectral_radius_estimate(self.G_minus) * (1.0 + radius_margin)

    def _factor(self, z: complex) -> Tuple[np.ndarray, np.ndarray]:
        if abs(z) <= self.minus_radius:
            raise InadmissibleShiftError(
                f"|z|={abs(z):.6g} is inside the G_minus radius {self.minus_radius:.6g}",
                z=z,
                radius=self.minus_radius,
            )
        D = self.G.shape[0]
        lu = linalg.lu_factor(self.G_minus - z * np.eye(D))
        X = linalg.lu_solve(lu, self.G[:, self.idx])
        return lu, X

    def __call__(self, z: complex) -> complex:
        _, X = self._factor(z)
        M = np.eye(self.idx.size) + X[self.idx, :]
        return complex(linalg.det(M))

    def log_derivative(self, z: complex) -> complex:
        """g'/g = tr(M^{-1} M') with M' = P (G_minus - z)^{-2} G_plus P."""
        lu, X = self._factor(z)
        M = np.eye(self.idx.size) + X[self.idx, :]
        dM = linalg.lu_solve(lu, X)[self.idx, :]
        return complex(np.trace(linalg.solve(M, dM)))


def reduction_determinant(
    G: np.ndarray,
    modeset: ModeSet,
    N_inner: float,
    z: complex,
) -> complex:
    """g(z); InadmissibleShiftError when |z| is inside the G_minus radius."""
    return ReductionDeterminant(G, modeset, N_inner)(z)


def _roots_from_power_sums(sums: np.ndarray, count: int) -> np.ndarray:
    """Newton identities: power sums p_1..p_n -> monic polynomial roots."""
    e = np.zeros(count + 1, dtype=np.complex128)
    e[0] = 1.0
    for k in range(1, count + 1):
        acc = 0j
        for i in range(1, k + 1):
            acc += (-1) ** (i - 1) * e[k - i] * sums[i]
        e[k] = acc / k
    coeffs = [(-1) ** k * e[k] for k in range(count + 1)]
    return np.roots(coeffs)


def locate_roots(
    G: np.ndarray,
    modeset: ModeSet,
    N_inner: float,
    center: complex,
    radius: float,
    nodes: int = 128,
) -> np.ndarray:
    """
    Zeros of g inside |z - center| = radius by the argument principle.

    Power sums s_p = (1/2 pi i) int (z - c)^p g'/g dz give the winding number
    (p = 0) and, via Newton identities, the roots. The whole disk must lie
    outside the G_minus radius (InadmissibleShiftError otherwise): poles of
    1 / det(G_minus - z) inside it would cancel zeros in the count.
    """
    if radius <= 0:
        raise ValueError(f"contour radius must be positive, got {radius}")
    det = ReductionDeterminant(G, modeset, N_inner)
    if abs(center) - radius <= det.minus_radius:
        raise InadmissibleShiftError(
            f"disk |z - {complex(center):.6g}| < {radius:.6g} reaches the "
            f"G_minus radius {det.minus_radius:.6g}",
            z=complex(center),
            radius=det.minus_radius,
        )
    theta = 2.0 * np.pi * np.arange(nodes) / nodes
    offsets = radius * np.exp(1j * theta)
    logd = np.array([det.log_derivative(center + w) for w in offsets])
    weights = offsets / nodes
    s0 = complex(np.sum(weights * logd))
    count = int(round(s0.real))
    if abs(s0 - count) > get_settings().trace_tol:
        raise AmbiguousTraceError(f"winding number {s0:.6g} is not an integer", trace=s0)
    if count == 0:
        return np.zeros(0, dtype=np.complex128)
    sums = np.array(
        [complex(np.sum(weights * offsets**p * logd)) for p in range(count + 1)]
    )
    return center + _roots_from_power_sums(sums, count)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_spectrum_csv(spec: SpectrumResult, path: str | Path, config_hash: str) -> Path:
    rows = [
        {"index": i, "re": float(v.real), "im": float(v.imag), "residual": float(r)}
        for i, (v, r) in enumerate(zip(spec.eigenvalues, spec.residuals))
    ]
    return write_table(path, rows, ["index", "re", "im", "residual"], config_hash)


def write_branch_csv(curve: BranchCurve, path: str | Path, config_hash: str) -> Path:
    columns = [
        "eps",
        "re",
        "im",
        "distance_to_lambda0",
        "multiplicity",
        "inside_count",
        "projection_distance",
        "flagged",
        "flag_reason",
    ]
    return write_table(path, curve.rows(), columns, config_hash)


__all__ = [
    "AmbiguousTraceError",
    "BranchCurve",
    "ContourCrossingError",
    "EigenSolverError",
    "InadmissibleShiftError",
    "NearSingularShiftError",
    "ReductionDeterminant",
    "RieszProjection",
    "RieszProjectionError",
    "SpectrumResult",
    "continue_in_viscosity",
    "default_delta",
    "eigen_decompose",
    "isolation_radius",
    "locate_roots",
    "match_eigenvalues",
    "multiplicity",
    "reduction_determinant",
    "resolvent_solve",
    "riesz_projection",
    "spectral_radius_estimate",
    "unstable_set",
    "write_branch_csv",
    "write_spectrum_csv",
]
