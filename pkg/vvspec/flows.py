"""
Catalog of steady divergence-free flows on T^n.

Every flow is a finite Fourier sum u(x) = Re sum_k u_hat(k) e^{i k.x}; u, its
gradient and vorticity are evaluated from the same table, so no numerical
differentiation is involved anywhere.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .config import FlowSpec, get_settings
from .errors import NumericalFailure
from .lattice import UnsupportedDimensionError
from .logging_utils import get_logger, log_structured

logger = get_logger(__name__)

_DIVERGENCE_TOL = 1e-12


class DivergenceError(ValueError):
    """Raised when flow coefficients violate k.u_hat(k) = 0."""

    def __init__(self, message: str, mode: Optional[Tuple[int, ...]] = None) -> None:
        super().__init__(message)
        self.mode = mode


class RealitySymmetryError(ValueError):
    """Raised when u_hat(-k) != conj(u_hat(k)) for some mode."""


class FlowIntegrationError(NumericalFailure):
    """The adaptive integrator gave up before reaching the requested time."""

    def __init__(self, message: str, t_reached: float) -> None:
        super().__init__(f"{message} (reached t={t_reached:.6g})")
        self.t_reached = t_reached


@dataclass(frozen=True, eq=False)
class SteadyFlow:
    """
    Steady flow u with its Fourier table.

    modes: (K, n) integer wave vectors; coeffs: (K, n) complex u_hat(k).
    hyperbolic_points: stagnation points with a real saddle of grad u, known
    analytically for catalog flows.
    """

    name: str
    dim: int
    modes: np.ndarray
    coeffs: np.ndarray
    params: Dict[str, float] = field(default_factory=dict)
    hyperbolic_points: Tuple[Tuple[float, ...], ...] = ()

    @property
    def is_zero(self) -> bool:
        return self.modes.shape[0] == 0

    @property
    def fourier_coeffs(self) -> Dict[Tuple[int, ...], np.ndarray]:
        return {
            tuple(int(c) for c in k): self.coeffs[i].copy()
            for i, k in enumerate(self.modes)
        }

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"{self.name}:{self.dim}".encode("utf-8"))
        digest.update(np.ascontiguousarray(self.modes, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.coeffs, dtype=np.complex128).tobytes())
        return digest.hexdigest()

    @property
    def vorticity_coeffs(self) -> np.ndarray:
        """Omega_hat(k) = i (k1 u_hat_2 - k2 u_hat_1), 2D only, shape (K,)."""
        if self.dim != 2:
            raise UnsupportedDimensionError("scalar vorticity is defined in 2D only")
        k = self.modes.astype(np.float64)
        return 1j * (k[:, 0] * self.coeffs[:, 1] - k[:, 1] * self.coeffs[:, 0])

    def _phases(self, x: np.ndarray) -> np.ndarray:
        return np.exp(1j * (x @ self.modes.T.astype(np.float64)))

    def u(self, x: np.ndarray) -> np.ndarray:
        """Velocity at points x of shape (n,) or (P, n)."""
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        values = np.real(self._phases(pts) @ self.coeffs)
        return values[0] if np.ndim(x) == 1 else values

    def grad_u(self, x: np.ndarray) -> np.ndarray:
        """grad_u[..., i, j] = d u_i / d x_j."""
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        weights = 1j * self._phases(pts)
        k = self.modes.astype(np.float64)
        values = np.real(np.einsum("pk,ki,kj->pij", weights, self.coeffs, k))
        return values[0] if np.ndim(x) == 1 else values

    def u_and_grad(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """u and grad u at points (P, n) sharing one table of phases."""
        phases = self._phases(x)
        k = self.modes.astype(np.float64)
        velocity = np.real(phases @ self.coeffs)
        grad = np.real(np.einsum("pk,ki,kj->pij", 1j * phases, self.coeffs, k))
        return velocity, grad

    def vorticity(self, x: np.ndarray) -> np.ndarray:
        grad = self.grad_u(x)
        return grad[..., 1, 0] - grad[..., 0, 1]


@dataclass(frozen=True)
class FlowMapResult:
    """
    x_t is the unwrapped lift of phi_t(x0); `wrapped` reduces it mod 2 pi.
    """

    x_t: np.ndarray
    jacobian: np.ndarray
    inverse_transpose_jacobian: np.ndarray
    t: float

    @property
    def wrapped(self) -> np.ndarray:
        return np.mod(self.x_t, 2.0 * np.pi)


# ---------------------------------------------------------------------------
# Construction and validation
# ---------------------------------------------------------------------------


def _validate_coefficients(modes: np.ndarray, coeffs: np.ndarray) -> None:
    lookup = {tuple(int(c) for c in k): i for i, k in enumerate(modes)}
    for i, k in enumerate(modes):
        key = tuple(int(c) for c in k)
        scale = max(1.0, float(np.linalg.norm(coeffs[i])))
        if abs(complex(k.astype(np.float64) @ coeffs[i])) > _DIVERGENCE_TOL * scale:
            raise DivergenceError(
                f"coefficient at mode {list(key)} is not divergence-free",
                mode=key,
            )
        partner = lookup.get(tuple(-c for c in key))
        if partner is None or not np.allclose(
            coeffs[partner], np.conj(coeffs[i]), atol=1e-14, rtol=1e-12
        ):
            raise RealitySymmetryError(
                f"mode {list(key)} lacks a conjugate partner at {[-c for c in key]}"
            )


def make_flow(
    name: str,
    dim: int,
    table: Mapping[Tuple[int, ...], Sequence[complex]],
    params: Optional[Dict[str, float]] = None,
    hyperbolic_points: Tuple[Tuple[float, ...], ...] = (),
) -> SteadyFlow:
    if dim not in (2, 3):
        raise UnsupportedDimensionError(f"unsupported dimension {dim}")
    keys = sorted(table)
    modes = np.array(keys, dtype=np.int64).reshape(len(keys), dim)
    coeffs = np.array([table[k] for k in keys], dtype=np.complex128).reshape(
        len(keys), dim
    )
    if not np.all(np.isfinite(coeffs)):
        raise ValueError(f"flow '{name}' has non-finite coefficients")
    _validate_coefficients(modes, coeffs)
    modes.setflags(write=False)
    coeffs.setflags(write=False)
    return SteadyFlow(
        name=name,
        dim=dim,
        modes=modes,
        coeffs=coeffs,
        params=dict(params or {}),
        hyperbolic_points=hyperbolic_points,
    )


def _wavenumber(params: Mapping[str, float], default: int = 1) -> int:
    m = params.get("m", default)
    if not float(m).is_integer() or int(m) < 1:
        raise ValueError(f"shear wavenumber m must be a positive integer, got {m}")
    return int(m)


def _amplitude(params: Mapping[str, float]) -> float:
    A = float(params.get("A", 1.0))
    if not np.isfinite(A):
        raise ValueError(f"amplitude must be finite, got {A}")
    return A


def _unit(dim: int, axis: int, value: complex) -> Tuple[complex, ...]:
    out = [0j] * dim
    out[axis] = value
    return tuple(out)


def _shear_table(
    dim: int, m: int, plus: complex, minus: complex
) -> Dict[Tuple[int, ...], Tuple[complex, ...]]:
    up = tuple(m if a == 1 else 0 for a in range(dim))
    down = tuple(-c for c in up)
    return {up: _unit(dim, 0, plus), down: _unit(dim, 0, minus)}


def catalog_flow(
    name: str,
    params: Optional[Mapping[str, float]] = None,
    dim: int = 2,
    coeffs_path: Optional[str | Path] = None,
) -> SteadyFlow:
    """
    Build a catalog flow.

    - zero: u = 0.
    - shear(m, A): u = (A sin(m x2), 0[, 0]).
    - kolmogorov(m, A): u = (A cos(m x2), 0[, 0]), a translate of shear.
    - cellular(A): u = A (sin x1 cos x2, -cos x1 sin x2), 2D only.
    - custom: coefficient table loaded from `coeffs_path`.
    """
    p = dict(params or {})
    if dim not in (2, 3):
        raise UnsupportedDimensionError(f"unsupported dimension {dim}")

    if name == "zero":
        return make_flow("zero", dim, {}, p)

    if name in ("shear", "kolmogorov"):
        m = _wavenumber(p)
        A = _amplitude(p)
        if name == "shear":
            table = _shear_table(dim, m, -0.5j * A, 0.5j * A)
        else:
            table = _shear_table(dim, m, 0.5 * A, 0.5 * A)
        return make_flow(name, dim, table, {"m": float(m), "A": A})

    if name == "cellular":
        if dim != 2:
            raise UnsupportedDimensionError("cellular flow is defined in 2D only")
        A = _amplitude(p)
        table = {
            (a, b): (-0.25j * a * A, 0.25j * b * A)
            for a in (-1, 1)
            for b in (-1, 1)
        }
        # The saddle at the origin is evaluated exactly: every phase equals 1.
        saddles = ((0.0, 0.0),)
        return make_flow("cellular", dim, table, {"A": A}, hyperbolic_points=saddles)

    if name == "custom":
        if coeffs_path is None:
            raise ValueError("custom flow requires coeffs_path")
        return load_custom_flow(coeffs_path, dim=dim)

    raise ValueError(f"unknown flow '{name}'")


def flow_from_spec(spec: FlowSpec, dim: int) -> SteadyFlow:
    return catalog_flow(spec.name, spec.params, dim=dim, coeffs_path=spec.coeffs_path)


def load_custom_flow(path: str | Path, dim: Optional[int] = None) -> SteadyFlow:
    """
    Load a custom flow from a JSON list of {"k": [...], "re": [...], "im": [...]}.

    Raises DivergenceError naming the first offending mode.
    """
    path = Path(path)
    try:
        entries: Any = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read custom flow '{path}': {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"custom flow '{path}' must be a non-empty JSON list")

    table: Dict[Tuple[int, ...], Tuple[complex, ...]] = {}
    for entry in entries:
        k = tuple(int(c) for c in entry["k"])
        re = [float(v) for v in entry["re"]]
        im = [float(v) for v in entry.get("im", [0.0] * len(re))]
        if not len(k) == len(re) == len(im):
            raise ValueError(f"entry for mode {list(k)} has inconsistent lengths")
        table[k] = tuple(complex(a, b) for a, b in zip(re, im))

    n = len(next(iter(table)))
    if dim is not None and dim != n:
        raise UnsupportedDimensionError(
            f"custom flow has dimension {n}, run expects {dim}"
        )
    flow = make_flow("custom", n, table)
    log_structured(
        logger,
        logging.INFO,
        "custom_flow_loaded",
        path=str(path),
        modes=int(flow.modes.shape[0]),
        fingerprint=flow.fingerprint,
    )
    return flow


# ---------------------------------------------------------------------------
# Flow maps
# ---------------------------------------------------------------------------


def check_flow_time(t: float) -> None:
    t_max = get_settings().flow_time_max
    if abs(t) > t_max:
        raise ValueError(f"|t| = {abs(t)} exceeds the configured limit {t_max}")


def flow_map_points(
    flow: SteadyFlow,
    points: np.ndarray,
    t: float,
    tol: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    phi_t and its Jacobian at many points in one adaptive solve.

    Returns (x_t, J) with shapes (P, n) and (P, n, n). Positions stay
    unwrapped; u is periodic so no wrapping is needed for evaluation.
    Raises FlowIntegrationError when the integrator fails.
    """
    tol = tol if tol is not None else get_settings().ode_tol
    if tol <= 0:
        raise ValueError("tol must be positive")
    check_flow_time(t)

    x0 = np.atleast_2d(np.asarray(points, dtype=np.float64))
    P, n = x0.shape
    eye = np.broadcast_to(np.eye(n), (P, n, n)).copy()
    if t == 0.0 or flow.is_zero:
        return x0.copy(), eye

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        x = y[: P * n].reshape(P, n)
        J = y[P * n :].reshape(P, n, n)
        dx, grad = flow.u_and_grad(x)
        dJ = np.einsum("pij,pjk->pik", grad, J)
        return np.concatenate([dx.ravel(), dJ.ravel()])

    y0 = np.concatenate([x0.ravel(), eye.ravel()])
    sol = solve_ivp(rhs, (0.0, t), y0, method="RK45", rtol=tol, atol=tol)
    if sol.status != 0:
        raise FlowIntegrationError(
            f"flow map integration failed: {sol.message}",
            t_reached=float(sol.t[-1]),
        )
    y = sol.y[:, -1]
    return y[: P * n].reshape(P, n), y[P * n :].reshape(P, n, n)


def inverse_transpose(J: np.ndarray) -> np.ndarray:
    """Exact inverse transpose of 2x2 / 3x3 matrices (batched on leading axes)."""
    n = J.shape[-1]
    if n == 2:
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        cof = np.empty_like(J)
        cof[..., 0, 0] = J[..., 1, 1]
        cof[..., 0, 1] = -J[..., 1, 0]
        cof[..., 1, 0] = -J[..., 0, 1]
        cof[..., 1, 1] = J[..., 0, 0]
        return cof / det[..., None, None]
    if n == 3:
        c0 = np.cross(J[..., :, 1], J[..., :, 2])
        c1 = np.cross(J[..., :, 2], J[..., :, 0])
        c2 = np.cross(J[..., :, 0], J[..., :, 1])
        det = np.sum(J[..., :, 0] * c0, axis=-1)
        # Rows of J^{-1} are c_i / det, so the c_i are the columns of J^{-T}.
        cof = np.stack([c0, c1, c2], axis=-1)
        return cof / det[..., None, None]
    raise UnsupportedDimensionError(f"unsupported dimension {n}")


def integrate_flow_map(
    flow: SteadyFlow,
    x0: Sequence[float],
    t: float,
    tol: Optional[float] = None,
) -> FlowMapResult:
    """
    phi_t(x0) and d phi_t(x0) from the joint variational system.

    Preconditions: tol > 0, |t| <= flow_time_max.
    Postconditions: det(jacobian) = 1 up to integrator tolerance.
    """
    x_t, J = flow_map_points(flow, np.asarray(x0, dtype=np.float64)[None, :], t, tol)
    return FlowMapResult(
        x_t=x_t[0],
        jacobian=J[0],
        inverse_transpose_jacobian=inverse_transpose(J[0]),
        t=float(t),
    )


__all__ = [
    "DivergenceError",
    "FlowIntegrationError",
    "FlowMapResult",
    "RealitySymmetryError",
    "SteadyFlow",
    "catalog_flow",
    "check_flow_time",
    "flow_from_spec",
    "flow_map_points",
    "integrate_flow_map",
    "inverse_transpose",
    "load_custom_flow",
    "make_flow",
]
