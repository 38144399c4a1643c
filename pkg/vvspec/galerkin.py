"""
Galerkin matrices of the linearized Euler / Navier-Stokes operator on T^n.

Velocity form, fiber coordinates: for target mode k and source mode q = k - m,

    block(k, q) = E_k [ -i (u_hat(m).k) I - i u_hat(m) m^T ] E_q^T

plus -eps |k|^2 on the diagonal. E_k holds the fiber basis of k as rows, so
the Leray projection is built in. Couplings leaving the ModeSet are dropped.

Vorticity form (2D only), scalar unknown per mode:

    entry(k, q) = -i (u_hat(m).k) - (m.q^perp) Omega_hat(m) / |q|^2
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Tuple

import numpy as np
from scipy import optimize, sparse

from .config import get_settings
from .flows import SteadyFlow
from .lattice import (
    ModeSet,
    SpectralField,
    UnsupportedDimensionError,
    check_same_modeset,
    to_fiber,
)
from .logging_utils import get_logger, log_structured
from .manifest import matrix_fingerprint

logger = get_logger(__name__)

Form = Literal["velocity", "vorticity"]

_CONTAINER_MAGIC = b"VVSOPER1"


class DimensionMismatchError(ValueError):
    """Flow and ModeSet live in different dimensions."""


class OperatorTooLargeError(ValueError):
    """Dense assembly requested above the configured dimension cap."""


class ContainerFormatError(ValueError):
    """A binary operator container is truncated or inconsistent."""


@dataclass(frozen=True, eq=False)
class GalerkinOperator:
    modeset: ModeSet
    eps: float
    matrix: np.ndarray
    flow_name: str
    form: Form = "velocity"
    flow_fingerprint: str = ""

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def fingerprint(self) -> str:
        return matrix_fingerprint(self.matrix)


# ---------------------------------------------------------------------------
# Index helpers
# ---------------------------------------------------------------------------


def _mode_positions(modeset: ModeSet, q: np.ndarray) -> np.ndarray:
    """
    Position of each row of q in modeset.modes, or -1 if q is outside the
    box or is the zero mode. Uses the lexicographic layout directly.
    """
    N = modeset.cutoff
    side = 2 * N + 1
    inside = np.all(np.abs(q) <= N, axis=1) & np.any(q != 0, axis=1)
    lin = np.zeros(len(q), dtype=np.int64)
    for a in range(modeset.dim):
        lin = lin * side + (q[:, a] + N)
    zero_lin = (side**modeset.dim - 1) // 2
    pos = lin - (lin > zero_lin)
    return np.where(inside, pos, -1)


def _coupling_entries(
    flow: SteadyFlow,
    modeset: ModeSet,
    form: Form,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """COO triplets of the inviscid operator."""
    f = modeset.fiber_dim if form == "velocity" else 1
    modes = modeset.modes
    k_float = modes.astype(np.float64)
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    omega_hat = flow.vorticity_coeffs if form == "vorticity" else None

    for idx_m, m in enumerate(flow.modes):
        u_m = flow.coeffs[idx_m]
        src = _mode_positions(modeset, modes - m)
        tgt = np.nonzero(src >= 0)[0]
        if tgt.size == 0:
            continue
        src = src[tgt]
        advect = -1j * (k_float[tgt] @ u_m)

        if form == "velocity":
            E_k = modeset.fiber_basis[tgt]
            E_q = modeset.fiber_basis[src]
            blocks = advect[:, None, None] * np.einsum("psa,pta->pst", E_k, E_q)
            blocks += -1j * np.einsum(
                "ps,pt->pst", E_k @ u_m, E_q @ m.astype(np.float64)
            )
        else:
            assert omega_hat is not None
            q = k_float[src]
            q_perp = np.stack([-q[:, 1], q[:, 0]], axis=1)
            qq = np.sum(q * q, axis=1)
            entry = advect - (q_perp @ m.astype(np.float64)) * omega_hat[idx_m] / qq
            blocks = entry[:, None, None]

        s_idx, t_idx = np.meshgrid(np.arange(f), np.arange(f), indexing="ij")
        rows.append((tgt[:, None, None] * f + s_idx[None]).ravel())
        cols.append((src[:, None, None] * f + t_idx[None]).ravel())
        vals.append(blocks.ravel())

    if not rows:
        empty_i = np.zeros(0, dtype=np.int64)
        return empty_i, empty_i, np.zeros(0, dtype=np.complex128)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _check_inputs(flow: SteadyFlow, modeset: ModeSet, eps: float) -> None:
    if flow.dim != modeset.dim:
        raise DimensionMismatchError(
            f"flow '{flow.name}' is {flow.dim}D but the ModeSet is {modeset.dim}D"
        )
    if eps < 0:
        raise ValueError(f"viscosity must be non-negative, got {eps}")


def _build_sparse(
    flow: SteadyFlow,
    modeset: ModeSet,
    eps: float,
    form: Form,
) -> sparse.csr_matrix:
    rows, cols, vals = _coupling_entries(flow, modeset, form)
    D = modeset.dimension if form == "velocity" else modeset.size
    inviscid = sparse.coo_matrix((vals, (rows, cols)), shape=(D, D)).tocsr()
    diffusion = (
        modeset.column_wavenumber_sq if form == "velocity" else modeset.wavenumber_sq
    )
    if eps == 0.0:
        return inviscid
    return (inviscid + sparse.diags(-eps * diffusion.astype(np.float64))).tocsr()


def _dense(matrix: sparse.csr_matrix) -> np.ndarray:
    cap = get_settings().max_dense_dimension
    if matrix.shape[0] > cap:
        raise OperatorTooLargeError(
            f"dense dimension {matrix.shape[0]} exceeds the cap {cap}"
        )
    return np.asarray(matrix.toarray(), dtype=np.complex128)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def assemble(flow: SteadyFlow, modeset: ModeSet, eps: float) -> GalerkinOperator:
    """
    Dense Galerkin matrix of L^eps in fiber coordinates.

    Entries are exact convolution sums over the finitely many flow modes.
    Raises DimensionMismatchError, OperatorTooLargeError.
    """
    _check_inputs(flow, modeset, eps)
    matrix = _dense(_build_sparse(flow, modeset, eps, "velocity"))
    log_structured(
        logger,
        logging.DEBUG,
        "galerkin_assembled",
        flow=flow.name,
        dim=modeset.dim,
        cutoff=modeset.cutoff,
        eps=eps,
        dimension=matrix.shape[0],
    )
    return GalerkinOperator(
        modeset=modeset,
        eps=float(eps),
        matrix=matrix,
        flow_name=flow.name,
        form="velocity",
        flow_fingerprint=flow.fingerprint,
    )


def assemble_sparse(
    flow: SteadyFlow,
    modeset: ModeSet,
    eps: float,
) -> sparse.csr_matrix:
    """Same entries as `assemble`, CSR, no dimension cap."""
    _check_inputs(flow, modeset, eps)
    return _build_sparse(flow, modeset, eps, "velocity")


def assemble_vorticity_2d(
    flow: SteadyFlow,
    modeset: ModeSet,
    eps: float,
) -> GalerkinOperator:
    """Linearized vorticity equation on the same ModeSet (2D only)."""
    if modeset.dim != 2 or flow.dim != 2:
        raise UnsupportedDimensionError("vorticity form is available in 2D only")
    _check_inputs(flow, modeset, eps)
    matrix = _dense(_build_sparse(flow, modeset, eps, "vorticity"))
    return GalerkinOperator(
        modeset=modeset,
        eps=float(eps),
        matrix=matrix,
        flow_name=flow.name,
        form="vorticity",
        flow_fingerprint=flow.fingerprint,
    )


def apply_operator(op: GalerkinOperator, f: SpectralField) -> SpectralField:
    check_same_modeset(op.modeset, f.modeset)
    coeffs = to_fiber(f).coefficients
    if coeffs.shape[0] != op.dimension:
        raise ValueError(
            f"field has {coeffs.shape[0]} coordinates, operator expects {op.dimension}"
        )
    return SpectralField(op.modeset, op.matrix @ coeffs, "fiber")


def conjugation_matrix(modeset: ModeSet) -> np.ndarray:
    """
    Index permutation of the reality map c(k, s) -> conj(c(-k, s)).

    (C c)[i] = conj(c[perm[i]]); requires e(-k) = e(k), which the fiber
    construction guarantees.
    """
    partner = _mode_positions(modeset, -modeset.modes)
    f = modeset.fiber_dim
    return (partner[:, None] * f + np.arange(f)[None, :]).ravel()


# ---------------------------------------------------------------------------
# Shear-chain oracle
# ---------------------------------------------------------------------------


def _chain(
    A: float,
    m: int,
    alpha: int,
    residue: int,
    N: int,
    eps: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tridiagonal coefficients (sub, diag, super) of a shear vorticity chain."""
    if alpha == 0:
        raise ValueError("the chain with k1 = 0 is identically zero")
    start = -N + ((residue + N) % m)
    k2 = np.arange(start, N + 1, m)
    kk = alpha**2 + k2.astype(np.float64) ** 2
    half = 0.5 * A * alpha
    diag = -eps * kk
    sub = np.zeros_like(kk)
    sup = np.zeros_like(kk)
    sub[1:] = -half * (1.0 - m**2 / kk[:-1])
    sup[:-1] = half * (1.0 - m**2 / kk[1:])
    return sub, diag, sup


def shear_chain_characteristic(
    A: float,
    m: int,
    alpha: int,
    residue: int,
    N: int,
    eps: float,
    lam: complex,
) -> complex:
    """
    det(T - lam) of the truncated shear chain via the continued fraction
    R_j = (d_j - lam) - a_j c_{j-1} / R_{j-1}, det = prod R_j.
    """
    sub, diag, sup = _chain(A, m, alpha, residue, N, eps)
    R = complex(diag[0] - lam)
    det = R
    for j in range(1, diag.size):
        R = (diag[j] - lam) - sub[j] * sup[j - 1] / R
        det *= R
    return det


def shear_chain_eigenvalue(
    A: float,
    m: int,
    alpha: int,
    residue: int,
    N: int,
    eps: float,
    guess: complex,
) -> complex:
    """Root of the chain characteristic function near `guess` (secant method)."""
    root = optimize.newton(
        lambda lam: shear_chain_characteristic(A, m, alpha, residue, N, eps, lam),
        complex(guess),
        tol=1e-14,
        maxiter=200,
    )
    return complex(root)


# ---------------------------------------------------------------------------
# Portable container
# ---------------------------------------------------------------------------


def export_operator(op: GalerkinOperator, path: str | Path) -> Path:
    """
    Write magic, header length (uint64 LE), JSON header, then the matrix as
    row-major little-endian complex128 (re, im) pairs.
    """
    path = Path(path)
    header: Dict[str, Any] = {
        "rows": op.dimension,
        "cols": op.dimension,
        "eps": op.eps,
        "flow_name": op.flow_name,
        "flow_fingerprint": op.flow_fingerprint,
        "form": op.form,
        "modeset": op.modeset.to_json(),
        "fingerprint": op.fingerprint,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(op.matrix, dtype="<c16").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def import_operator(path: str | Path) -> GalerkinOperator:
    data = Path(path).read_bytes()
    if data[: len(_CONTAINER_MAGIC)] != _CONTAINER_MAGIC:
        raise ContainerFormatError(f"'{path}' is not an operator container")
    offset = len(_CONTAINER_MAGIC)
    (length,) = struct.unpack("<Q", data[offset : offset + 8])
    offset += 8
    header = json.loads(data[offset : offset + length].decode("utf-8"))
    offset += length
    rows, cols = int(header["rows"]), int(header["cols"])
    body = data[offset:]
    if len(body) != rows * cols * 16:
        raise ContainerFormatError(
            f"'{path}' holds {len(body)} payload bytes, expected {rows * cols * 16}"
        )
    matrix = np.frombuffer(body, dtype="<c16").reshape(rows, cols).astype(np.complex128)
    if matrix_fingerprint(matrix) != header["fingerprint"]:
        raise ContainerFormatError(f"fingerprint mismatch in '{path}'")
    return GalerkinOperator(
        modeset=ModeSet.from_json(header["modeset"]),
        eps=float(header["eps"]),
        matrix=matrix,
        flow_name=str(header["flow_name"]),
        form=header["form"],
        flow_fingerprint=str(header.get("flow_fingerprint", "")),
    )


__all__ = [
    "ContainerFormatError",
    "DimensionMismatchError",
    "GalerkinOperator",
    "OperatorTooLargeError",
    "apply_operator",
    "assemble",
    "assemble_sparse",
    "assemble_vorticity_2d",
    "conjugation_matrix",
    "export_operator",
    "import_operator",
    "shear_chain_characteristic",
    "shear_chain_eigenvalue",
]
