"""
Bicharacteristic rays, the amplitude cocycle and Lyapunov exponents.

Rays solve
    x' = u(x),  xi' = -grad_u(x)^T xi,  b' = a0(x, xi) b,  q' = |xi|^2
with a0(x, xi) = (2 xi xi^T / |xi|^2 - I) grad_u(x). The quadrature q gives the
viscous damping exp(-eps q) of the transport symbol.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp

from .config import get_settings
from .errors import NumericalFailure
from .flows import FlowIntegrationError, SteadyFlow, check_flow_time
from .lattice import ZeroWavevectorError
from .logging_utils import get_logger, log_numerical_issue, log_structured
from .manifest import write_table

logger = get_logger(__name__)

_TWO_PI = 2.0 * np.pi


class LyapunovFailure(NumericalFailure):
    """Every sample of a Lyapunov run failed to integrate."""


@dataclass(frozen=True)
class CocycleState:
    x: np.ndarray
    xi: np.ndarray
    b: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class RayBundle:
    """
    Final states of a batch of rays.

    x, xi: (P, n); amplitudes: (P, n, r) complex; q: (P,) = int_0^t |xi|^2.
    """

    x: np.ndarray
    xi: np.ndarray
    amplitudes: np.ndarray
    q: np.ndarray
    t: float


@dataclass
class LyapunovEstimate:
    mu: float
    weight_m: int
    samples: int
    horizon: float
    per_sample_rates: List[Optional[float]]
    confidence_halfwidth: float
    seeded_rates: List[Dict[str, Any]] = field(default_factory=list)
    skipped: int = 0
    sample_points: Optional[np.ndarray] = None
    sample_covectors: Optional[np.ndarray] = None
    seed: int = 0
    renorm_interval: float = 1.0

    def to_payload(self) -> Dict[str, Any]:
        return {
            "mu": self.mu,
            "weight_m": self.weight_m,
            "samples": self.samples,
            "horizon": self.horizon,
            "per_sample_rates": self.per_sample_rates,
            "confidence_halfwidth": self.confidence_halfwidth,
            "seeded_rates": self.seeded_rates,
            "skipped": self.skipped,
            "seed": self.seed,
            "renorm_interval": self.renorm_interval,
        }


# ---------------------------------------------------------------------------
# Symbols
# ---------------------------------------------------------------------------


def _stretching(xi: np.ndarray) -> np.ndarray:
    """2 xi xi^T / |xi|^2 - I for a batch of covectors (P, n)."""
    xx = np.sum(xi * xi, axis=1)
    n = xi.shape[1]
    return 2.0 * np.einsum("pi,pj->pij", xi, xi) / xx[:, None, None] - np.eye(n)


def amplitude_symbol(
    flow: SteadyFlow,
    x: Sequence[float],
    xi: Sequence[float],
) -> np.ndarray:
    """a0(x, xi) = (2 xi xi^T / |xi|^2 - I) grad_u(x); 0-homogeneous in xi."""
    xi_arr = np.asarray(xi, dtype=np.float64)
    if not np.any(xi_arr):
        raise ZeroWavevectorError("the amplitude symbol needs xi != 0")
    grad = flow.grad_u(np.asarray(x, dtype=np.float64))
    return (_stretching(xi_arr[None, :])[0] @ grad).astype(np.complex128)


def fiber_frame(xi: Sequence[float]) -> np.ndarray:
    """Orthonormal basis of xi^perp as columns, shape (n, n - 1)."""
    xi_arr = np.asarray(xi, dtype=np.float64)
    if xi_arr.size == 2:
        perp = np.array([-xi_arr[1], xi_arr[0]])
        return (perp / np.linalg.norm(perp))[:, None]
    return linalg.null_space(xi_arr[None, :])


# ---------------------------------------------------------------------------
# Ray integration
# ---------------------------------------------------------------------------


def _solve_rays(
    flow: SteadyFlow,
    x0s: np.ndarray,
    xi0s: np.ndarray,
    amplitudes0: np.ndarray,
    t: float,
    tol: float,
    t_eval: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    P, n = x0s.shape
    r = amplitudes0.shape[2]
    sx = P * n
    sb = P * n * r

    def unpack(y: np.ndarray) -> tuple[np.ndarray, ...]:
        x = y[:sx].reshape(P, n)
        xi = y[sx : 2 * sx].reshape(P, n)
        br = y[2 * sx : 2 * sx + sb].reshape(P, n, r)
        bi = y[2 * sx + sb : 2 * sx + 2 * sb].reshape(P, n, r)
        return x, xi, br, bi

    def rhs(_: float, y: np.ndarray) -> np.ndarray:
        x, xi, br, bi = unpack(y)
        velocity, grad = flow.u_and_grad(x)
        dxi = -np.einsum("pji,pj->pi", grad, xi)
        a0 = np.matmul(_stretching(xi), grad)
        return np.concatenate(
            [
                velocity.ravel(),
                dxi.ravel(),
                np.matmul(a0, br).ravel(),
                np.matmul(a0, bi).ravel(),
                np.sum(xi * xi, axis=1),
            ]
        )

    y0 = np.concatenate(
        [
            x0s.ravel(),
            xi0s.ravel(),
            amplitudes0.real.ravel(),
            amplitudes0.imag.ravel(),
            np.zeros(P),
        ]
    )
    if t == 0.0:
        return np.array([0.0]), y0[:, None]

    sol = solve_ivp(
        rhs,
        (0.0, t),
        y0,
        method="RK45",
        rtol=tol,
        atol=tol,
        t_eval=t_eval,
    )
    if sol.status != 0:
        raise FlowIntegrationError(
            f"ray integration failed: {sol.message}",
            t_reached=float(sol.t[-1]) if sol.t.size else 0.0,
        )
    return sol.t, sol.y


def _unpack_column(y: np.ndarray, P: int, n: int, r: int) -> tuple[np.ndarray, ...]:
    sx = P * n
    sb = P * n * r
    x = y[:sx].reshape(P, n)
    xi = y[sx : 2 * sx].reshape(P, n)
    amps = y[2 * sx : 2 * sx + sb].reshape(P, n, r) + 1j * y[
        2 * sx + sb : 2 * sx + 2 * sb
    ].reshape(P, n, r)
    q = y[2 * sx + 2 * sb :]
    return x, xi, amps, q


def integrate_rays(
    flow: SteadyFlow,
    x0s: np.ndarray,
    xi0s: np.ndarray,
    amplitudes0: np.ndarray,
    t: float,
    tol: Optional[float] = None,
) -> RayBundle:
    """
    Batched joint solve of the ray, cocycle and damping quadrature.

    x0s, xi0s: (P, n); amplitudes0: (P, n, r). Every xi0 must be nonzero.
    Raises FlowIntegrationError with the time reached on failure.
    """
    tol = tol if tol is not None else get_settings().ode_tol
    check_flow_time(t)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=np.float64))
    xi0s = np.atleast_2d(np.asarray(xi0s, dtype=np.float64))
    amplitudes0 = np.asarray(amplitudes0, dtype=np.complex128)
    if amplitudes0.ndim == 2:
        amplitudes0 = amplitudes0[:, :, None]
    if np.any(np.sum(xi0s * xi0s, axis=1) == 0.0):
        raise ZeroWavevectorError("rays need nonzero initial covectors")

    P, n = x0s.shape
    r = amplitudes0.shape[2]
    _, ys = _solve_rays(flow, x0s, xi0s, amplitudes0, t, tol)
    x, xi, amps, q = _unpack_column(ys[:, -1], P, n, r)
    return RayBundle(x=x, xi=xi, amplitudes=amps, q=q, t=float(t))


def integrate_ray(
    flow: SteadyFlow,
    state0: CocycleState,
    t: float,
    tol: Optional[float] = None,
    t_eval: Optional[Sequence[float]] = None,
) -> List[CocycleState]:
    """
    Trajectory of one ray with its amplitude, sampled at `t_eval`.

    Defaults to 11 equispaced samples on [0, t]. Postconditions: xi(t).u(x(t))
    is conserved; xi.b stays 0 when b0 lies in the fiber of xi0.
    """
    tol = tol if tol is not None else get_settings().ode_tol
    check_flow_time(t)
    xi0 = np.asarray(state0.xi, dtype=np.float64)
    if not np.any(xi0):
        raise ZeroWavevectorError("rays need a nonzero initial covector")
    times = (
        np.asarray(t_eval, dtype=np.float64)
        if t_eval is not None
        else np.linspace(0.0, t, 11)
    )
    n = xi0.size
    b0 = np.asarray(state0.b, dtype=np.complex128).reshape(1, n, 1)
    solved_t, ys = _solve_rays(
        flow,
        np.asarray(state0.x, dtype=np.float64)[None, :],
        xi0[None, :],
        b0,
        t,
        tol,
        t_eval=None if t == 0.0 else times,
    )
    states = []
    for j, tj in enumerate(solved_t):
        x, xi, amps, _ = _unpack_column(ys[:, j], 1, n, 1)
        states.append(
            CocycleState(x=x[0], xi=xi[0], b=amps[0, :, 0], t=state0.t + float(tj))
        )
    return states


def viscous_damping(
    flow: SteadyFlow,
    x0: Sequence[float],
    xi0: Sequence[float],
    t: float,
    eps: float,
    tol: Optional[float] = None,
) -> float:
    """exp(-eps int_0^t |xi(s)|^2 ds) along the ray from (x0, xi0); 1 when eps = 0."""
    if eps < 0 or t < 0:
        raise ValueError("viscous_damping needs eps >= 0 and t >= 0")
    xi_arr = np.asarray(xi0, dtype=np.float64)
    if not np.any(xi_arr):
        raise ZeroWavevectorError("the damping factor needs xi0 != 0")
    if eps == 0.0:
        return 1.0
    n = xi_arr.size
    bundle = integrate_rays(
        flow,
        np.asarray(x0, dtype=np.float64)[None, :],
        xi_arr[None, :],
        np.zeros((1, n, 1), dtype=np.complex128),
        t,
        tol,
    )
    return float(np.exp(-eps * bundle.q[0]))


def stagnation_rate(flow: SteadyFlow, point: Sequence[float]) -> float:
    """Largest real part of the eigenvalues of grad u at a stagnation point."""
    grad = flow.grad_u(np.asarray(point, dtype=np.float64))
    return float(np.max(np.real(linalg.eigvals(grad))))


# ---------------------------------------------------------------------------
# Lyapunov exponents
# ---------------------------------------------------------------------------


def _advance(
    flow: SteadyFlow,
    x: np.ndarray,
    xi: np.ndarray,
    b: np.ndarray,
    h: float,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Advance a batch by h. Rays that fail on their own come back as NaN.
    """
    try:
        bundle = integrate_rays(flow, x, xi, b[:, :, None], h, tol)
        return bundle.x, bundle.xi, bundle.amplitudes[:, :, 0], np.ones(len(x), bool)
    except FlowIntegrationError:
        pass

    ok = np.ones(len(x), bool)
    out_x = np.full_like(x, np.nan)
    out_xi = np.full_like(xi, np.nan)
    out_b = np.full_like(b, np.nan)
    for i in range(len(x)):
        try:
            single = integrate_rays(
                flow, x[i : i + 1], xi[i : i + 1], b[i : i + 1, :, None], h, tol
            )
        except FlowIntegrationError:
            ok[i] = False
            continue
        out_x[i] = single.x[0]
        out_xi[i] = single.xi[0]
        out_b[i] = single.amplitudes[0, :, 0]
    return out_x, out_xi, out_b, ok


def _fit_slope(times: np.ndarray, logs: np.ndarray) -> np.ndarray:
    """Least-squares slope of each row of `logs` against `times`."""
    tc = times - times.mean()
    yc = logs - logs.mean(axis=1, keepdims=True)
    return (yc @ tc) / float(tc @ tc)


def _accumulate_logs(
    flow: SteadyFlow,
    x: np.ndarray,
    xi: np.ndarray,
    b: np.ndarray,
    horizon: float,
    interval: float,
    m: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Accumulated log(|b| |xi|^m) at renormalization times.

    Returns (times, logs (R, S + 1), alive (R,)). After each interval b and xi
    are rescaled to unit length; the cocycle is linear in b and 0-homogeneous
    in xi so the rescaling does not change the dynamics.
    """
    steps = int(math.ceil(horizon / interval - 1e-12))
    times = np.zeros(steps + 1)
    logs = np.zeros((len(x), steps + 1))
    alive = np.ones(len(x), bool)

    xi = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    for j in range(steps):
        h = min(interval, horizon - times[j])
        times[j + 1] = times[j] + h
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        b_start = np.linalg.norm(b[idx], axis=1)
        xi_start = np.linalg.norm(xi[idx], axis=1)
        nx, nxi, nb, ok = _advance(flow, x[idx], xi[idx], b[idx], h, tol)
        with np.errstate(divide="ignore", invalid="ignore"):
            b_norm = np.linalg.norm(nb, axis=1)
            xi_norm = np.linalg.norm(nxi, axis=1)
            growth = np.log(b_norm / b_start) + m * np.log(xi_norm / xi_start)
        ok &= np.isfinite(growth) & (b_norm > 0)
        alive[idx[~ok]] = False
        good = idx[ok]
        logs[:, j + 1] = logs[:, j]
        logs[good, j + 1] += growth[ok]
        x[good] = np.mod(nx[ok], _TWO_PI)
        xi[good] = nxi[ok] / xi_norm[ok, None]
        b[good] = nb[ok] / b_norm[ok, None]
    return times, logs, alive


def _rates(times: np.ndarray, logs: np.ndarray, horizon: float) -> np.ndarray:
    window = times >= 0.5 * horizon
    if np.count_nonzero(window) < 2:
        window = np.zeros_like(window)
        window[-2:] = True
    return _fit_slope(times[window], logs[:, window])


def lyapunov_exponent(
    flow: SteadyFlow,
    n_samples: int,
    horizon: float,
    m: int = 0,
    seed: int = 0,
    renorm_interval: Optional[float] = None,
    tol: Optional[float] = None,
) -> LyapunovEstimate:
    """
    Sampled estimate of the top Lyapunov exponent of the (weighted) cocycle.

    Samples (x0, xi0) uniformly on T^n x S^{n-1} from `seed`; each sample runs
    one ray per vector of an orthonormal frame of F(xi0). Catalog flows with
    known hyperbolic points are additionally seeded along the real
    eigen-directions of grad_u(x*)^T. The rate of a ray is the least-squares
    slope of its accumulated log-growth over the second half of the horizon;
    mu is the maximum over all rays.
    """
    if n_samples < 1 or horizon <= 0:
        raise ValueError("lyapunov_exponent needs n_samples >= 1 and horizon > 0")
    if m < 0:
        raise ValueError("weight m must be non-negative")
    settings = get_settings()
    interval = renorm_interval if renorm_interval is not None else settings.renorm_interval
    tol = tol if tol is not None else settings.ode_tol
    n = flow.dim

    rng = np.random.default_rng(seed)
    x0s = rng.uniform(0.0, _TWO_PI, size=(n_samples, n))
    xi0s = rng.standard_normal(size=(n_samples, n))
    xi0s /= np.linalg.norm(xi0s, axis=1, keepdims=True)

    ray_x: List[np.ndarray] = []
    ray_xi: List[np.ndarray] = []
    ray_b: List[np.ndarray] = []
    owner: List[int] = []
    for s in range(n_samples):
        frame = fiber_frame(xi0s[s])
        for j in range(frame.shape[1]):
            ray_x.append(x0s[s])
            ray_xi.append(xi0s[s])
            ray_b.append(frame[:, j])
            owner.append(s)

    seeds: List[Dict[str, Any]] = []
    for point in flow.hyperbolic_points:
        grad_t = flow.grad_u(np.asarray(point, dtype=np.float64)).T
        values, vectors = linalg.eig(grad_t)
        for i in np.argsort(-values.real, kind="stable"):
            if abs(values[i].imag) > 1e-12:
                continue
            direction = np.real(vectors[:, i])
            direction /= np.linalg.norm(direction)
            seeds.append({"point": list(point), "xi0": direction.tolist()})
            frame = fiber_frame(direction)
            for j in range(frame.shape[1]):
                ray_x.append(np.asarray(point, dtype=np.float64))
                ray_xi.append(direction)
                ray_b.append(frame[:, j])
                owner.append(-len(seeds))

    times, logs, alive = _accumulate_logs(
        flow,
        np.array(ray_x),
        np.array(ray_xi),
        np.array(ray_b, dtype=np.complex128),
        horizon,
        interval,
        m,
        tol,
    )
    rates = _rates(times, logs, horizon)
    owners = np.array(owner)

    per_sample: List[Optional[float]] = []
    skipped = 0
    for s in range(n_samples):
        mask = (owners == s) & alive
        if not np.any(mask):
            per_sample.append(None)
            skipped += 1
            continue
        per_sample.append(float(np.max(rates[mask])) + 0.0)

    for k, entry in enumerate(seeds):
        mask = (owners == -(k + 1)) & alive
        entry["rate"] = float(np.max(rates[mask])) + 0.0 if np.any(mask) else None

    candidates = [r for r in per_sample if r is not None]
    candidates += [e["rate"] for e in seeds if e["rate"] is not None]
    if not candidates:
        raise LyapunovFailure("every Lyapunov sample failed to integrate")
    if skipped:
        log_numerical_issue(
            logger,
            "lyapunov_samples_skipped",
            "warning",
            skipped=skipped,
            samples=n_samples,
        )

    sampled = np.array([r for r in per_sample if r is not None])
    halfwidth = (
        0.5 * float(sampled.max() - np.quantile(sampled, 0.9)) if sampled.size else 0.0
    )
    mu = float(max(candidates)) + 0.0
    log_structured(
        logger,
        logging.INFO,
        "lyapunov_estimate",
        flow=flow.name,
        mu=mu,
        weight_m=m,
        samples=n_samples,
        seeded=len(seeds),
        skipped=skipped,
    )
    return LyapunovEstimate(
        mu=mu,
        weight_m=m,
        samples=n_samples,
        horizon=float(horizon),
        per_sample_rates=per_sample,
        confidence_halfwidth=max(halfwidth, 0.0),
        seeded_rates=seeds,
        skipped=skipped,
        sample_points=x0s,
        sample_covectors=xi0s,
        seed=seed,
        renorm_interval=float(interval),
    )


def _format_vector(v: np.ndarray) -> str:
    return " ".join(f"{float(c):.17g}" for c in v)


def write_rates_csv(
    estimate: LyapunovEstimate,
    path: str | Path,
    config_hash: str,
) -> Path:
    """Per-sample rates: sample, x0, xi0, rate (vectors space-separated)."""
    rows: List[Dict[str, Any]] = []
    if estimate.sample_points is not None and estimate.sample_covectors is not None:
        for s, rate in enumerate(estimate.per_sample_rates):
            rows.append(
                {
                    "sample": s,
                    "kind": "sampled",
                    "x0": _format_vector(estimate.sample_points[s]),
                    "xi0": _format_vector(estimate.sample_covectors[s]),
                    "rate": rate,
                }
            )
    for k, entry in enumerate(estimate.seeded_rates):
        rows.append(
            {
                "sample": estimate.samples + k,
                "kind": "seeded",
                "x0": _format_vector(np.asarray(entry["point"])),
                "xi0": _format_vector(np.asarray(entry["xi0"])),
                "rate": entry["rate"],
            }
        )
    return write_table(
        path,
        rows,
        ["sample", "kind", "x0", "xi0", "rate"],
        config_hash,
    )


__all__ = [
    "CocycleState",
    "LyapunovEstimate",
    "LyapunovFailure",
    "RayBundle",
    "amplitude_symbol",
    "fiber_frame",
    "integrate_ray",
    "integrate_rays",
    "lyapunov_exponent",
    "stagnation_rate",
    "viscous_damping",
    "write_rates_csv",
]
