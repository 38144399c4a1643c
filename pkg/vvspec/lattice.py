"""
Fourier lattice bookkeeping on the torus T^n.

Conventions:
- f(x) = sum_k f_hat(k) e^{i k.x}; the L2 norm uses the normalized torus measure,
  so ||f||^2 = sum_k |f_hat(k)|^2.
- The mean mode k = 0 never appears in a ModeSet.
- Column index of (mode i, fiber slot s) is i * (n - 1) + s.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Literal, Optional, Sequence, Tuple

import numpy as np

Layout = Literal["fiber", "full"]

_POINT_CHUNK = 2048


class UnsupportedDimensionError(ValueError):
    """Raised when a lattice of dimension other than 2 or 3 is requested."""


class ZeroWavevectorError(ValueError):
    """Raised when an operation needs a nonzero wave vector."""


class ModeSetMismatchError(ValueError):
    """Raised when two objects live on different ModeSets."""


@dataclass(frozen=True, eq=False)
class ModeSet:
    """
    Truncated lattice {k in Z^n : 0 < |k|_inf <= N} with divergence-free fibers.

    modes: (M, n) integer array in lexicographic order.
    fiber_basis: (M, n - 1, n) real array; row s of fiber_basis[i] is an
    orthonormal vector orthogonal to modes[i].
    """

    dim: int
    cutoff: int
    modes: np.ndarray
    fiber_basis: np.ndarray
    _lookup: Dict[Tuple[int, ...], int] = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.modes.shape[0])

    @property
    def fiber_dim(self) -> int:
        return self.dim - 1

    @property
    def dimension(self) -> int:
        return self.size * self.fiber_dim

    @property
    def wavenumber_sq(self) -> np.ndarray:
        """|k|^2 per mode, shape (M,)."""
        return np.sum(self.modes.astype(np.int64) ** 2, axis=1)

    @property
    def column_wavenumber_sq(self) -> np.ndarray:
        """|k|^2 per column of the fiber layout, shape (dimension,)."""
        return np.repeat(self.wavenumber_sq, self.fiber_dim)

    def mode_index(self, k: Sequence[int]) -> Optional[int]:
        return self._lookup.get(tuple(int(c) for c in k))

    def column(self, mode_index: int, slot: int) -> int:
        if not 0 <= slot < self.fiber_dim:
            raise IndexError(f"fiber slot {slot} out of range")
        return mode_index * self.fiber_dim + slot

    def slot_of(self, column: int) -> Tuple[int, int]:
        return divmod(column, self.fiber_dim)

    def same_as(self, other: "ModeSet") -> bool:
        return self.dim == other.dim and self.cutoff == other.cutoff

    def to_json(self) -> Dict[str, Any]:
        return {
            "dim": self.dim,
            "cutoff": self.cutoff,
            "modes": self.modes.tolist(),
        }

    @staticmethod
    def from_json(data: Dict[str, Any]) -> "ModeSet":
        modeset = build_mode_set(int(data["dim"]), int(data["cutoff"]))
        if "modes" in data and data["modes"] != modeset.modes.tolist():
            raise ModeSetMismatchError(
                "mode list in manifest does not match the canonical ordering"
            )
        return modeset


@dataclass(frozen=True, eq=False)
class SpectralField:
    """
    Coefficients of a vector field on a ModeSet.

    fiber layout: complex (dimension,) vector of fiber coordinates
    (divergence-free by construction).
    full layout: complex (M, n) array of vector coefficients v_hat(k).
    """

    modeset: ModeSet
    coefficients: np.ndarray
    layout: Layout = "fiber"

    def __post_init__(self) -> None:
        expected = (
            (self.modeset.dimension,)
            if self.layout == "fiber"
            else (self.modeset.size, self.modeset.dim)
        )
        if self.coefficients.shape != expected:
            raise ValueError(
                f"{self.layout} layout expects shape {expected}, "
                f"got {self.coefficients.shape}"
            )


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _fiber_2d(k: np.ndarray) -> np.ndarray:
    perp = np.array([-k[1], k[0]], dtype=np.int64)
    first = perp[np.nonzero(perp)[0][0]]
    if first < 0:
        perp = -perp
    return (perp / np.sqrt(float(perp @ perp)))[None, :]


def _fiber_3d(k: np.ndarray) -> np.ndarray:
    # Seeds: the two coordinate axes least aligned with k (ties by axis order).
    order = sorted(range(3), key=lambda i: (abs(int(k[i])), i))
    s1 = np.zeros(3, dtype=np.int64)
    s2 = np.zeros(3, dtype=np.int64)
    s1[order[0]] = 1
    s2[order[1]] = 1
    kk = int(k @ k)

    # Gram-Schmidt carried out in integers, normalized at the end.
    v1 = s1 * kk - int(s1 @ k) * k
    vv = int(v1 @ v1)
    v2 = s2 * (kk * vv) - int(s2 @ k) * vv * k - int(s2 @ v1) * kk * v1
    basis = np.stack([v1, v2]).astype(np.float64)
    return basis / np.linalg.norm(basis, axis=1, keepdims=True)


@lru_cache(maxsize=32)
def build_mode_set(n: int, N: int) -> ModeSet:
    """
    Build the ModeSet for dimension n and cutoff N.

    Preconditions: n in {2, 3}, N >= 1.
    Postconditions: lexicographic mode order, (n - 1) orthonormal fiber
    vectors per mode, total dimension (n - 1) * ((2N + 1)^n - 1).
    """
    if n not in (2, 3):
        raise UnsupportedDimensionError(f"unsupported dimension {n}")
    if N < 1:
        raise ValueError(f"cutoff must be >= 1, got {N}")

    modes = np.array(
        [
            k
            for k in itertools.product(range(-N, N + 1), repeat=n)
            if any(c != 0 for c in k)
        ],
        dtype=np.int64,
    )
    make_fiber = _fiber_2d if n == 2 else _fiber_3d
    fiber_basis = np.stack([make_fiber(k) for k in modes])

    modes.setflags(write=False)
    fiber_basis.setflags(write=False)
    lookup = {tuple(int(c) for c in k): i for i, k in enumerate(modes)}
    return ModeSet(
        dim=n,
        cutoff=N,
        modes=modes,
        fiber_basis=fiber_basis,
        _lookup=lookup,
    )


def leray_fiber_projector(k: Sequence[int]) -> np.ndarray:
    """Pi_hat(k) = I - k k^T / |k|^2, returned as a complex n x n matrix."""
    kv = np.asarray(k, dtype=np.float64)
    kk = float(kv @ kv)
    if kk == 0.0:
        raise ZeroWavevectorError("the fiber projector is undefined at k = 0")
    proj = np.eye(kv.size) - np.outer(kv, kv) / kk
    return proj.astype(np.complex128)


# ---------------------------------------------------------------------------
# Layouts, projection, truncation
# ---------------------------------------------------------------------------


def check_same_modeset(a: ModeSet, b: ModeSet) -> None:
    if not a.same_as(b):
        raise ModeSetMismatchError(
            f"mode sets differ: (dim={a.dim}, N={a.cutoff}) vs "
            f"(dim={b.dim}, N={b.cutoff})"
        )


def to_full(f: SpectralField) -> SpectralField:
    if f.layout == "full":
        return f
    ms = f.modeset
    c = f.coefficients.reshape(ms.size, ms.fiber_dim)
    full = np.einsum("is,isj->ij", c, ms.fiber_basis)
    return SpectralField(ms, full, "full")


def to_fiber(f: SpectralField) -> SpectralField:
    """Fiber coordinates e_s . v_hat(k); the longitudinal part is discarded."""
    if f.layout == "fiber":
        return f
    ms = f.modeset
    c = np.einsum("isj,ij->is", ms.fiber_basis, f.coefficients)
    return SpectralField(ms, c.reshape(ms.dimension), "fiber")


def project_div_free(f: SpectralField) -> SpectralField:
    """Apply Pi_hat(k) to every coefficient of a full-layout field."""
    if f.layout == "fiber":
        return f
    ms = f.modeset
    k = ms.modes.astype(np.float64)
    kv = np.sum(k * f.coefficients, axis=1) / ms.wavenumber_sq
    projected = f.coefficients - kv[:, None] * k
    return SpectralField(ms, projected, "full")


def truncate(f: SpectralField, cutoff: float) -> SpectralField:
    """
    P_N' of the Euclidean ball: zero every coefficient with |k| >= cutoff.
    """
    if cutoff <= 0:
        raise ValueError(f"truncation radius must be positive, got {cutoff}")
    ms = f.modeset
    keep = ms.wavenumber_sq < cutoff * cutoff
    if f.layout == "fiber":
        mask = np.repeat(keep, ms.fiber_dim)
        return SpectralField(ms, np.where(mask, f.coefficients, 0.0), "fiber")
    return SpectralField(
        ms, np.where(keep[:, None], f.coefficients, 0.0), "full"
    )


def ball_mask(modeset: ModeSet, cutoff: float) -> np.ndarray:
    """Boolean column mask (fiber layout) of the ball |k| < cutoff."""
    keep = modeset.wavenumber_sq < cutoff * cutoff
    return np.repeat(keep, modeset.fiber_dim)


def field_norm(f: SpectralField) -> float:
    return float(np.linalg.norm(f.coefficients))


def random_field(
    modeset: ModeSet,
    rng: np.random.Generator,
    layout: Layout = "fiber",
) -> SpectralField:
    shape = (
        (modeset.dimension,)
        if layout == "fiber"
        else (modeset.size, modeset.dim)
    )
    coeffs = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return SpectralField(modeset, coeffs, layout)


# ---------------------------------------------------------------------------
# Grid plumbing
# ---------------------------------------------------------------------------


def grid_frequencies(G: int) -> np.ndarray:
    return np.rint(np.fft.fftfreq(G, d=1.0 / G)).astype(np.int64)


def grid_points(n: int, G: int) -> np.ndarray:
    """Uniform grid x_j = 2 pi j / G, shape (G^n, n), C-order over axes."""
    axis = 2.0 * np.pi * np.arange(G) / G
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def to_grid_spectrum(f: SpectralField, G: int) -> np.ndarray:
    """Embed full-layout coefficients into an (n, G, ..., G) FFT-ordered array."""
    ms = f.modeset
    if G < 2 * ms.cutoff + 1:
        raise ValueError(f"grid {G} too small for cutoff {ms.cutoff}")
    full = to_full(f).coefficients
    spectrum = np.zeros((ms.dim,) + (G,) * ms.dim, dtype=np.complex128)
    idx = tuple(np.mod(ms.modes[:, a], G) for a in range(ms.dim))
    for c in range(ms.dim):
        spectrum[(c,) + idx] = full[:, c]
    return spectrum


def from_grid_spectrum(spectrum: np.ndarray, modeset: ModeSet) -> SpectralField:
    """Restrict an FFT-ordered grid spectrum to the ModeSet (full layout)."""
    G = spectrum.shape[1]
    idx = tuple(np.mod(modeset.modes[:, a], G) for a in range(modeset.dim))
    full = np.stack([spectrum[(c,) + idx] for c in range(modeset.dim)], axis=1)
    return SpectralField(modeset, full, "full")


def spectrum_to_grid_values(spectrum: np.ndarray) -> np.ndarray:
    n = spectrum.ndim - 1
    G = spectrum.shape[1]
    axes = tuple(range(1, n + 1))
    return np.fft.ifftn(spectrum, axes=axes) * (G**n)


def grid_values_to_spectrum(values: np.ndarray) -> np.ndarray:
    n = values.ndim - 1
    G = values.shape[1]
    axes = tuple(range(1, n + 1))
    return np.fft.fftn(values, axes=axes) / (G**n)


def evaluate_on_grid(f: SpectralField, G: int) -> np.ndarray:
    """Field values on the uniform grid, shape (n, G, ..., G)."""
    return spectrum_to_grid_values(to_grid_spectrum(f, G))


def evaluate_at_points(spectrum: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Spectral interpolation: evaluate sum_k c(k) e^{i k.y} at arbitrary points.

    spectrum: (c, G, ..., G) FFT-ordered; points: (P, n). Returns (P, c).
    The exponentials factorize over axes: each chunk builds n tables of
    shape (P, G) and contracts one axis at a time.
    """
    n = spectrum.ndim - 1
    G = spectrum.shape[1]
    freqs = grid_frequencies(G).astype(np.float64)
    out = np.empty((points.shape[0], spectrum.shape[0]), dtype=np.complex128)
    for start in range(0, points.shape[0], _POINT_CHUNK):
        chunk = points[start : start + _POINT_CHUNK]
        phases = [np.exp(1j * chunk[:, a : a + 1] * freqs[None, :]) for a in range(n)]
        acc = np.einsum("pa,ca...->cp...", phases[0], spectrum)
        for a in range(1, n):
            acc = np.einsum("cpb...,pb->cp...", acc, phases[a])
        out[start : start + chunk.shape[0]] = acc.T
    return out


__all__ = [
    "Layout",
    "ModeSet",
    "ModeSetMismatchError",
    "SpectralField",
    "UnsupportedDimensionError",
    "ZeroWavevectorError",
    "ball_mask",
    "build_mode_set",
    "check_same_modeset",
    "evaluate_at_points",
    "evaluate_on_grid",
    "field_norm",
    "from_grid_spectrum",
    "grid_frequencies",
    "grid_points",
    "grid_values_to_spectrum",
    "leray_fiber_projector",
    "project_div_free",
    "random_field",
    "spectrum_to_grid_values",
    "to_fiber",
    "to_full",
    "to_grid_spectrum",
    "truncate",
]
