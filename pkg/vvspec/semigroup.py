"""
Time propagation and the high-frequency transport operator.

- propagator / propagate_field: e^{tL} on the Galerkin space.
- apply_pdo: op[sigma] f = sum_k e^{ik.x} sigma(x, k) f_hat(k), evaluated on a
  uniform grid and transformed back.
- apply_H: H_t f = Pi (op[tau_t] f)(phi_{-t} x) with
  tau_t(x, k) = B_t(x, k) exp(-eps int_0^t |xi|^2).
- Wave packets f(x) = b0(x) e^{i xi0.x / delta} and their residuals against e^{tL}.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import expm_multiply

from .cocycle import fiber_frame, integrate_rays
from .config import get_settings
from .errors import NumericalFailure
from .flows import SteadyFlow, flow_map_points
from .galerkin import (
    DimensionMismatchError,
    GalerkinOperator,
    OperatorTooLargeError,
    assemble,
    assemble_sparse,
)
from .lattice import (
    ModeSet,
    SpectralField,
    ZeroWavevectorError,
    ball_mask,
    build_mode_set,
    check_same_modeset,
    evaluate_at_points,
    evaluate_on_grid,
    field_norm,
    from_grid_spectrum,
    grid_frequencies,
    grid_points,
    grid_values_to_spectrum,
    to_fiber,
    to_full,
)
from .logging_utils import get_logger, log_numerical_issue, log_structured
from .manifest import write_table
from .spectra import default_delta, eigen_decompose

logger = get_logger(__name__)

Symbol = Callable[[np.ndarray, np.ndarray], np.ndarray]

# exp(700) is close to the largest finite double.
_OVERFLOW_EXPONENT = 700.0
_RAY_CHUNK = 32768
_H_MAX_TOL = 1e-8


class PropagatorOverflowError(NumericalFailure):
    def __init__(self, message: str, growth_exponent: float, required_splits: int) -> None:
        super().__init__(message)
        self.growth_exponent = growth_exponent
        self.required_splits = required_splits


class AliasingError(NumericalFailure):
    def __init__(self, message: str, tail_fraction: float) -> None:
        super().__init__(message)
        self.tail_fraction = tail_fraction


@dataclass(frozen=True, eq=False)
class Propagator:
    G: np.ndarray
    t: float
    provenance: Dict[str, Any] = field(default_factory=dict)

    def apply(self, f: SpectralField) -> SpectralField:
        c = to_fiber(f).coefficients
        if c.shape[0] != self.G.shape[0]:
            raise DimensionMismatchError(
                f"field has {c.shape[0]} coefficients, propagator is {self.G.shape[0]}"
            )
        return SpectralField(f.modeset, self.G @ c, "fiber")


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------


def _growth_exponent(matrix: np.ndarray, t: float) -> float:
    """t * max eig((L + L^H) / 2), the log of the bound ||e^{tL}|| <= e^{t omega}."""
    hermitian = 0.5 * (matrix + matrix.conj().T)
    D = hermitian.shape[0]
    top = linalg.eigvalsh(hermitian, subset_by_index=[D - 1, D - 1])
    return float(top[0]) * t


def propagator(op: GalerkinOperator, t: float) -> Propagator:
    """
    Dense e^{tL} by scaling and squaring (scipy.linalg.expm).

    Raises PropagatorOverflowError with the number of time steps the
    interval must be split into when e^{t omega} would overflow.
    """
    if t < 0:
        raise ValueError(f"propagation time must be non-negative, got {t}")
    cap = get_settings().max_dense_dimension
    if op.dimension > cap:
        raise OperatorTooLargeError(f"dimension {op.dimension} exceeds the cap {cap}")

    provenance = {
        "flow": op.flow_name,
        "flow_fingerprint": op.flow_fingerprint,
        "eps": op.eps,
        "cutoff": op.modeset.cutoff,
        "dim": op.modeset.dim,
    }
    if t == 0.0:
        return Propagator(np.eye(op.dimension, dtype=np.complex128), 0.0, provenance)

    exponent = _growth_exponent(op.matrix, t)
    if exponent > _OVERFLOW_EXPONENT:
        splits = int(math.ceil(exponent / _OVERFLOW_EXPONENT))
        raise PropagatorOverflowError(
            f"e^(tL) may overflow (t*omega={exponent:.1f}); split t into {splits} steps",
            growth_exponent=exponent,
            required_splits=splits,
        )
    G = linalg.expm(t * op.matrix)
    if not np.all(np.isfinite(G)):
        raise PropagatorOverflowError(
            "matrix exponential is not finite", growth_exponent=exponent, required_splits=2
        )
    return Propagator(G, float(t), provenance)


def propagate_field(
    op: Union[GalerkinOperator, sparse.spmatrix, np.ndarray],
    t: float,
    f: SpectralField,
) -> SpectralField:
    """e^{tL} f without forming the exponential (scipy expm_multiply)."""
    if t < 0:
        raise ValueError(f"propagation time must be non-negative, got {t}")
    if isinstance(op, GalerkinOperator):
        check_same_modeset(op.modeset, f.modeset)
        matrix: Any = op.matrix
    else:
        matrix = op
    c = to_fiber(f).coefficients
    if matrix.shape != (c.shape[0], c.shape[0]):
        raise DimensionMismatchError(
            f"operator shape {matrix.shape} does not match {c.shape[0]} coefficients"
        )
    if t == 0.0:
        return SpectralField(f.modeset, c.copy(), "fiber")
    w = expm_multiply(t * matrix, c)
    if not np.all(np.isfinite(w)):
        raise PropagatorOverflowError(
            "propagated field is not finite", growth_exponent=float("inf"), required_splits=2
        )
    return SpectralField(f.modeset, np.asarray(w, dtype=np.complex128), "fiber")


# ---------------------------------------------------------------------------
# Pseudodifferential operators
# ---------------------------------------------------------------------------


def _check_grid(modeset: ModeSet, grid: int) -> None:
    if grid < 4 * modeset.cutoff:
        raise ValueError(
            f"grid {grid} is too coarse for cutoff {modeset.cutoff}; "
            f"need at least {4 * modeset.cutoff}"
        )


def _tail_fraction(spectrum: np.ndarray) -> float:
    """Energy share of frequencies with |k|_inf > G / 3."""
    n = spectrum.ndim - 1
    G = spectrum.shape[1]
    freqs = np.abs(grid_frequencies(G))
    mesh = np.meshgrid(*([freqs] * n), indexing="ij")
    top = np.max(np.stack(mesh), axis=0) > G / 3.0
    energy = np.sum(np.abs(spectrum) ** 2, axis=0)
    total = float(energy.sum())
    return 0.0 if total == 0.0 else float(energy[top].sum()) / total


def _check_aliasing(spectrum: np.ndarray, where: str) -> None:
    threshold = get_settings().aliasing_threshold
    fraction = _tail_fraction(spectrum)
    if fraction > threshold:
        log_numerical_issue(
            logger, "aliasing", "error", where=where, tail_fraction=fraction
        )
        raise AliasingError(
            f"{where}: {fraction:.2e} of the energy sits in the top third of the "
            f"grid spectrum (threshold {threshold:.1e}); refine the grid",
            tail_fraction=fraction,
        )


def _synthesize(
    symbol_of_mode: Callable[[int, np.ndarray], np.ndarray],
    coefficients: np.ndarray,
    modeset: ModeSet,
    points: np.ndarray,
    G: int,
) -> np.ndarray:
    """Grid spectrum of sum over active k of e^{ik.x} sigma(x, k) c_k."""
    n = modeset.dim
    acc = np.zeros((points.shape[0], n), dtype=np.complex128)
    active = np.nonzero(np.any(coefficients != 0, axis=1))[0]
    for i in active:
        k = modeset.modes[i]
        sigma = np.asarray(symbol_of_mode(int(i), k), dtype=np.complex128)
        phase = np.exp(1j * (points @ k.astype(np.float64)))
        if sigma.ndim == 2:
            acc += phase[:, None] * (sigma @ coefficients[i])[None, :]
        else:
            acc += phase[:, None] * np.einsum("pij,j->pi", sigma, coefficients[i])
    values = acc.T.reshape((n,) + (G,) * n)
    return grid_values_to_spectrum(values)


def apply_pdo(symbol: Symbol, f: SpectralField, grid: int) -> SpectralField:
    """
    op[sigma] f on a G^n grid, restricted back to f's ModeSet (full layout).

    symbol(x, k) gets the grid points (P, n) and one integer mode k and returns
    either (n, n) (x-independent) or (P, n, n). Requires grid >= 4N; raises
    AliasingError when the result is not resolved.
    """
    ms = f.modeset
    _check_grid(ms, grid)
    points = grid_points(ms.dim, grid)
    coefficients = to_full(f).coefficients
    spectrum = _synthesize(lambda _, k: symbol(points, k), coefficients, ms, points, grid)
    _check_aliasing(spectrum, "apply_pdo")
    return from_grid_spectrum(spectrum, ms)


# ---------------------------------------------------------------------------
# Transport symbol
# ---------------------------------------------------------------------------


def _primitive(k: np.ndarray) -> Tuple[Tuple[int, ...], int]:
    g = reduce(math.gcd, (abs(int(c)) for c in k))
    return tuple(int(c) // g for c in k), g


def _integrate_directions(
    flow: SteadyFlow,
    points: np.ndarray,
    directions: np.ndarray,
    t: float,
    tol: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """B_t(x, p) (nd, P, n, n) and int |xi|^2 (nd, P) for rays from every point."""
    nd = directions.shape[0]
    P, n = points.shape
    if flow.is_zero or t == 0.0:
        B = np.broadcast_to(np.eye(n, dtype=np.complex128), (nd, P, n, n)).copy()
        q = np.repeat(np.sum(directions * directions, axis=1)[:, None] * t, P, axis=1)
        return B, q.astype(np.float64)

    x0s = np.tile(points, (nd, 1))
    xi0s = np.repeat(directions.astype(np.float64), P, axis=0)
    eye = np.broadcast_to(np.eye(n, dtype=np.complex128), (nd * P, n, n))
    B = np.empty((nd * P, n, n), dtype=np.complex128)
    q = np.empty(nd * P, dtype=np.float64)
    for start in range(0, nd * P, _RAY_CHUNK):
        stop = min(start + _RAY_CHUNK, nd * P)
        bundle = integrate_rays(flow, x0s[start:stop], xi0s[start:stop], eye[start:stop], t, tol)
        B[start:stop] = bundle.amplitudes
        q[start:stop] = bundle.q
    return B.reshape(nd, P, n, n), q.reshape(nd, P)


class _TransportCache:
    """
    B_t and int |xi|^2 on grid points per primitive direction.

    Keyed by (flow fingerprint, t, grid, tol); eps only enters the damping.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._tables: Dict[
            Tuple[str, float, int, float],
            Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]],
        ] = {}

    def lookup(
        self,
        flow: SteadyFlow,
        t: float,
        grid: int,
        directions: Sequence[Tuple[int, ...]],
        tol: float,
    ) -> Dict[Tuple[int, ...], Tuple[np.ndarray, np.ndarray]]:
        key = (flow.fingerprint, float(t), int(grid), float(tol))
        with self._lock:
            table = self._tables.setdefault(key, {})
            missing = [d for d in directions if d not in table]
            if missing:
                points = grid_points(flow.dim, grid)
                B, q = _integrate_directions(
                    flow, points, np.array(missing, dtype=np.int64), t, tol
                )
                for j, d in enumerate(missing):
                    table[d] = (B[j], q[j])
                log_structured(
                    logger,
                    logging.DEBUG,
                    "transport_table_extended",
                    flow=flow.name,
                    t=t,
                    grid=grid,
                    directions=len(missing),
                )
            return {d: table[d] for d in directions}

    def clear(self) -> None:
        with self._lock:
            self._tables.clear()


_TRANSPORT = _TransportCache()


def clear_transport_cache() -> None:
    _TRANSPORT.clear()


def _transport_tol(tol: Optional[float]) -> float:
    value = tol if tol is not None else min(get_settings().ode_tol, _H_MAX_TOL)
    if value > _H_MAX_TOL:
        raise ValueError(f"apply_H needs a flow-map tolerance <= {_H_MAX_TOL}, got {value}")
    return value


def _transport_symbol(
    flow: SteadyFlow,
    eps: float,
    t: float,
    modeset: ModeSet,
    modes: np.ndarray,
    grid: int,
    tol: float,
) -> Callable[[int, np.ndarray], np.ndarray]:
    split = {i: _primitive(modeset.modes[i]) for i in modes}
    directions = sorted({p for p, _ in split.values()})
    table = _TRANSPORT.lookup(flow, t, grid, directions, tol)

    def tau(i: int, _: np.ndarray) -> np.ndarray:
        p, g = split[i]
        B, q = table[p]
        if eps == 0.0:
            return B
        return B * np.exp(-eps * g * g * q)[:, None, None]

    return tau


def apply_H(
    flow: SteadyFlow,
    eps: float,
    t: float,
    f: SpectralField,
    grid: int,
    tol: Optional[float] = None,
) -> SpectralField:
    """
    H_t^eps f = Pi (op[tau_t^eps] f) o phi_{-t}, returned in fiber coordinates.

    op[tau] f is synthesized on the grid; the composition evaluates its trig
    interpolant at the flow-mapped grid points.
    """
    if eps < 0 or t < 0:
        raise ValueError("apply_H needs eps >= 0 and t >= 0")
    ms = f.modeset
    if flow.dim != ms.dim:
        raise DimensionMismatchError(f"flow is {flow.dim}D, field is {ms.dim}D")
    _check_grid(ms, grid)
    tol = _transport_tol(tol)

    coefficients = to_full(f).coefficients
    active = np.nonzero(np.any(coefficients != 0, axis=1))[0]
    points = grid_points(ms.dim, grid)
    tau = _transport_symbol(flow, eps, t, ms, active, grid, tol)
    spectrum = _synthesize(tau, coefficients, ms, points, grid)
    _check_aliasing(spectrum, "apply_H")

    if not (flow.is_zero or t == 0.0):
        origins, _ = flow_map_points(flow, points, -t, tol)
        values = evaluate_at_points(spectrum, origins)
        spectrum = grid_values_to_spectrum(values.T.reshape((ms.dim,) + (grid,) * ms.dim))
    return to_fiber(from_grid_spectrum(spectrum, ms))


def transport_symbol_bound(
    flow: SteadyFlow,
    eps: float,
    t: float,
    modeset: ModeSet,
    grid: int,
    tol: Optional[float] = None,
) -> float:
    """sup over grid points and ModeSet modes of ||tau_t^eps(x, k)||_2."""
    tol = _transport_tol(tol)
    tau = _transport_symbol(flow, eps, t, modeset, np.arange(modeset.size), grid, tol)
    best = 0.0
    for i in range(modeset.size):
        norms = np.linalg.norm(tau(i, modeset.modes[i]), ord=2, axis=(-2, -1))
        best = max(best, float(np.max(norms)))
    return best


# ---------------------------------------------------------------------------
# Wave packets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WavePacket:
    """
    f(x) = amplitude (1 + cos(c.x) / 2) e(xi0) e^{i xi0.x / delta}.

    c is the primitive direction of the carrier xi0, so the envelope varies
    along xi0 only and f is exactly divergence-free; e(xi0) spans the fiber.
    """

    carrier: Tuple[int, ...]
    delta: float
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        if not any(self.carrier):
            raise ZeroWavevectorError("packet carrier must be nonzero")
        if self.delta <= 0:
            raise ValueError(f"packet scale must be positive, got {self.delta}")
        inverse = 1.0 / self.delta
        if abs(inverse - round(inverse)) > 1e-9 or round(inverse) < 2:
            raise ValueError(f"packet scale {self.delta} is not 1/integer with integer >= 2")

    @property
    def dim(self) -> int:
        return len(self.carrier)

    @property
    def scale(self) -> int:
        return int(round(1.0 / self.delta))

    @property
    def wavevector(self) -> np.ndarray:
        return np.asarray(self.carrier, dtype=np.int64) * self.scale

    @property
    def envelope_direction(self) -> np.ndarray:
        p, _ = _primitive(np.asarray(self.carrier))
        return np.asarray(p, dtype=np.int64)

    @property
    def polarization(self) -> np.ndarray:
        return fiber_frame(np.asarray(self.carrier, dtype=np.float64))[:, 0]

    @property
    def required_cutoff(self) -> int:
        return 2 * int(np.max(np.abs(self.wavevector)))

    def values(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = self.envelope_direction.astype(np.float64)
        envelope = 1.0 + 0.5 * np.cos(pts @ c)
        carrier = np.exp(1j * (pts @ self.wavevector.astype(np.float64)))
        return self.amplitude * (envelope * carrier)[:, None] * self.polarization[None, :]

    def realize(self, modeset: ModeSet) -> SpectralField:
        """Fiber-layout coefficients on `modeset`; needs cutoff >= required_cutoff."""
        if modeset.dim != self.dim:
            raise DimensionMismatchError(f"packet is {self.dim}D, ModeSet is {modeset.dim}D")
        if modeset.cutoff < self.required_cutoff:
            raise ValueError(
                f"ModeSet cutoff {modeset.cutoff} leaves no headroom for the packet; "
                f"need {self.required_cutoff}"
            )
        K = self.wavevector
        c = self.envelope_direction
        full = np.zeros((modeset.size, modeset.dim), dtype=np.complex128)
        for k, weight in ((K, 1.0), (K + c, 0.25), (K - c, 0.25)):
            idx = modeset.mode_index(k)
            if idx is None:
                raise ValueError(f"packet mode {tuple(int(v) for v in k)} is outside the ModeSet")
            full[idx] = self.amplitude * weight * self.polarization
        return to_fiber(SpectralField(modeset, full, "full"))


@dataclass(frozen=True)
class PacketResidual:
    delta: float
    eps: float
    t: float
    r_asym: float
    r_decomp: float
    cutoff: int
    grid: int

    def as_row(self) -> Dict[str, Any]:
        return {
            "delta": self.delta,
            "eps": self.eps,
            "t": self.t,
            "r_asym": self.r_asym,
            "r_decomp": self.r_decomp,
            "cutoff": self.cutoff,
            "grid": self.grid,
        }


@dataclass(frozen=True)
class DecompositionFit:
    c_delta: float
    c_sqrt_eps: float
    r_squared: float
    points: int


def _packet_setup(
    flow: SteadyFlow,
    packet: WavePacket,
    cutoff: Optional[int],
    grid: Optional[int],
) -> Tuple[ModeSet, int]:
    if packet.dim != flow.dim:
        raise DimensionMismatchError(f"packet is {packet.dim}D, flow is {flow.dim}D")
    N = max(cutoff or 0, packet.required_cutoff)
    ms = build_mode_set(flow.dim, N)
    return ms, grid if grid is not None else 4 * N


def _asym_residual(
    flow: SteadyFlow,
    t: float,
    packet: WavePacket,
    ms: ModeSet,
    grid: int,
    tol: float,
) -> float:
    """||e^{tL0} f - B_t(y, xi0) f(y)|| / ||f|| on the grid, y = phi_{-t}(x)."""
    f = packet.realize(ms)
    propagated = propagate_field(assemble_sparse(flow, ms, 0.0), t, f)
    n = ms.dim
    points = grid_points(n, grid)
    actual = evaluate_on_grid(propagated, grid).reshape(n, -1).T

    origins, _ = flow_map_points(flow, points, -t, tol)
    covectors = np.broadcast_to(np.asarray(packet.carrier, dtype=np.float64), origins.shape)
    eye = np.broadcast_to(np.eye(n, dtype=np.complex128), (origins.shape[0], n, n))
    B = integrate_rays(flow, origins, covectors, eye, t, tol).amplitudes
    predicted = np.einsum("pij,pj->pi", B, packet.values(origins))

    reference = float(np.linalg.norm(packet.values(points)))
    return float(np.linalg.norm(actual - predicted)) / reference


def _decomp_residual(
    flow: SteadyFlow,
    t: float,
    eps: float,
    f: SpectralField,
    grid: int,
    tol: float,
) -> float:
    """||e^{tL} f - H_t f|| / ||f||."""
    propagated = propagate_field(assemble_sparse(flow, f.modeset, eps), t, f)
    transported = apply_H(flow, eps, t, f, grid, tol)
    diff = propagated.coefficients - transported.coefficients
    return float(np.linalg.norm(diff)) / field_norm(f)


def asymptotic_residual(
    flow: SteadyFlow,
    t: float,
    packet: WavePacket,
    eps: float,
    cutoff: Optional[int] = None,
    grid: Optional[int] = None,
    tol: Optional[float] = None,
) -> PacketResidual:
    """
    r_asym: leading-order transport prediction against e^{tL^0} (eps = 0).
    r_decomp: H_t^eps against e^{tL^eps} at the given eps.

    The ModeSet cutoff is at least packet.required_cutoff; the grid defaults
    to 4 * cutoff.
    """
    tol = _transport_tol(tol)
    ms, G = _packet_setup(flow, packet, cutoff, grid)
    f = packet.realize(ms)
    record = PacketResidual(
        delta=packet.delta,
        eps=float(eps),
        t=float(t),
        r_asym=_asym_residual(flow, t, packet, ms, G, tol),
        r_decomp=_decomp_residual(flow, t, eps, f, G, tol),
        cutoff=ms.cutoff,
        grid=G,
    )
    log_structured(logger, logging.INFO, "packet_residual", flow=flow.name, **record.as_row())
    return record


def decomposition_sweep(
    flow: SteadyFlow,
    t: float,
    deltas: Sequence[float],
    eps_list: Sequence[float],
    carrier: Sequence[int],
    tol: Optional[float] = None,
    grid_factor: int = 4,
) -> List[PacketResidual]:
    """(delta, eps) grid of packet residuals; r_asym is computed once per delta."""
    if grid_factor < 4:
        raise ValueError(f"grid_factor must be >= 4, got {grid_factor}")
    tol = _transport_tol(tol)
    records: List[PacketResidual] = []
    for delta in deltas:
        packet = WavePacket(tuple(int(c) for c in carrier), float(delta))
        ms, _ = _packet_setup(flow, packet, None, None)
        G = grid_factor * ms.cutoff
        f = packet.realize(ms)
        r_asym = _asym_residual(flow, t, packet, ms, G, tol)
        for eps in eps_list:
            records.append(
                PacketResidual(
                    delta=float(delta),
                    eps=float(eps),
                    t=float(t),
                    r_asym=r_asym,
                    r_decomp=_decomp_residual(flow, t, float(eps), f, G, tol),
                    cutoff=ms.cutoff,
                    grid=G,
                )
            )
        log_structured(
            logger, logging.INFO, "packet_sweep_row", flow=flow.name, delta=delta, r_asym=r_asym
        )
    return records


def fit_decomposition(records: Sequence[PacketResidual]) -> DecompositionFit:
    """Least squares r_decomp ~ C1 delta + C2 sqrt(eps), with R^2."""
    if len(records) < 2:
        raise ValueError("need at least two records to fit")
    A = np.array([[r.delta, math.sqrt(r.eps)] for r in records])
    y = np.array([r.r_decomp for r in records])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    residual = y - A @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r_squared = 1.0 if ss_res == 0.0 else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return DecompositionFit(float(coef[0]), float(coef[1]), r_squared, len(records))


def write_packet_csv(
    records: Sequence[PacketResidual],
    path: str | Path,
    config_hash: str,
) -> Path:
    columns = ["delta", "eps", "t", "r_asym", "r_decomp", "cutoff", "grid"]
    return write_table(path, [r.as_row() for r in records], columns, config_hash)


# ---------------------------------------------------------------------------
# Essential spectrum diagnostic
# ---------------------------------------------------------------------------


def essential_radius_diagnostic(
    flow: SteadyFlow,
    t: float,
    N_list: Sequence[int],
    mu_hat: float,
    delta: Optional[float] = None,
    near_axis: float = 0.01,
) -> List[Dict[str, Any]]:
    """
    One row per cutoff N in N_list.

    growth_surrogate is the spectral radius of the high-mode compression
    Q e^{tL^0} Q, where Q keeps the Galerkin columns with Euclidean
    |k| >= N/2 (the complement of truncate(., N/2)). Its log over t tracks
    the essential growth bound, which mu_hat bounds from above.
    unstable_count counts eigenvalues of L^0 with Re > mu_hat + delta and
    near_axis_count those with |Re| <= near_axis.
    """
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("N_list must be strictly increasing")
    delta = delta if delta is not None else default_delta(mu_hat)
    rows: List[Dict[str, Any]] = []
    for N in N_list:
        ms = build_mode_set(flow.dim, int(N))
        op = assemble(flow, ms, 0.0)
        spec = eigen_decompose(op)
        high = ~ball_mask(ms, N / 2.0)
        G = propagator(op, t).G
        compressed = G[np.ix_(high, high)]
        growth = float(np.max(np.abs(linalg.eigvals(compressed)))) if compressed.size else 0.0
        real = spec.eigenvalues.real
        row = {
            "N": int(N),
            "dimension": op.dimension,
            "growth_surrogate": growth,
            "unstable_count": int(np.sum(real > mu_hat + delta)),
            "near_axis_count": int(np.sum(np.abs(real) <= near_axis)),
            "max_real": float(real.max()) if real.size else None,
        }
        rows.append(row)
        log_structured(logger, logging.INFO, "nsweep_row", flow=flow.name, **row)
    return rows


def write_nsweep_csv(rows: Sequence[Dict[str, Any]], path: str | Path, config_hash: str) -> Path:
    columns = [
        "N",
        "dimension",
        "growth_surrogate",
        "unstable_count",
        "near_axis_count",
        "max_real",
    ]
    return write_table(path, rows, columns, config_hash)


__all__ = [
    "AliasingError",
    "DecompositionFit",
    "PacketResidual",
    "Propagator",
    "PropagatorOverflowError",
    "WavePacket",
    "apply_H",
    "apply_pdo",
    "asymptotic_residual",
    "clear_transport_cache",
    "decomposition_sweep",
    "essential_radius_diagnostic",
    "fit_decomposition",
    "propagate_field",
    "propagator",
    "transport_symbol_bound",
    "write_nsweep_csv",
    "write_packet_csv",
]
