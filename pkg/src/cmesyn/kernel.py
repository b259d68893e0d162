"""Gaussian-kernel algebra.

Pointwise kernel evaluation, Gram matrices, embeddings of finitely
supported measures, and the maximum mean discrepancy (MMD) between them.
Everything here is a pure function of immutable inputs and safe to call
from any number of concurrent workers.

Only the Gaussian family is implemented.  ``KernelParams.family`` is the
single dispatch point for adding other positive-semidefinite kernels;
the closed-form bounds elsewhere in the package (snapping error, MMD
Lipschitz constants) are Gaussian-specific and guard on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericsError

# Squared-MMD radicands this far below zero are treated as floating-point
# cancellation and clamped; anything worse is a real inconsistency, and
# downstream soundness depends on MMD being a metric.
MMD_RADICAND_TOL = 1e-9


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel k(x, y) = sigma_f^2 exp(-||x - y||^2 / (2 sigma_l^2)).

    ``sigma_f`` is the output scale, ``sigma_l`` the length scale in
    state-space units; both must be positive.
    """

    sigma_f: float
    sigma_l: float
    family: str = "gaussian"

    def __post_init__(self):
        if not self.sigma_f > 0:
            raise InputError(f"sigma_f must be > 0, got {self.sigma_f}")
        if not self.sigma_l > 0:
            raise InputError(f"sigma_l must be > 0, got {self.sigma_l}")
        if self.family != "gaussian":
            raise InputError(f"unsupported kernel family: {self.family!r}")


def as_points(x, name: str = "points") -> np.ndarray:
    """Coerce to an (m, n) point array.

    Scalars become a single 1-D point and 1-D arrays are read as m scalar
    points (column convention); a single n-D point must be passed 2-D.
    """
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
        raise InputError(f"{name} must be a nonempty (m, n) array")
    return pts


@dataclass(frozen=True)
class FiniteMeasure:
    """Finitely supported (signed) measure: sum_i weights[i] * delta_atoms[i].

    Weights need not be a probability vector.  Atoms follow the column
    convention of :func:`as_points`.
    """

    atoms: np.ndarray    # (m, n)
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        atoms = as_points(self.atoms, "atoms")
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.shape[0] != weights.shape[0]:
            raise InputError(
                f"atom/weight count mismatch: {atoms.shape[0]} vs {weights.shape[0]}"
            )
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


def dirac(x) -> FiniteMeasure:
    """Unit point mass at the single point ``x`` (scalar or 1-D vector)."""
    return FiniteMeasure(np.asarray(x, dtype=float).reshape(1, -1), np.ones(1))


@dataclass(frozen=True)
class Gram:
    """Dense kernel matrix with point provenance.

    ``entries[i, j] = k(row_points[i], col_points[j])``.  When the row and
    column point sets coincide the matrix is symmetric with diagonal equal
    to sigma_f^2, and positive semidefinite up to roundoff.
    """

    entries: np.ndarray
    row_points: np.ndarray
    col_points: np.ndarray


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def gram_entries(params: KernelParams, rows, cols=None) -> np.ndarray:
    """Kernel matrix as a bare array; ``cols=None`` means cols = rows.

    The symmetric case is symmetrized exactly and its diagonal pinned to
    sigma_f^2 so PSD checks are not at the mercy of summation order.
    """
    a = as_points(rows, "rows")
    symmetric = cols is None
    b = a if symmetric else as_points(cols, "cols")
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = _sqdist(a, b)
    d2 *= -1.0 / (2.0 * params.sigma_l**2)
    np.exp(d2, out=d2)
    d2 *= params.sigma_f**2
    if symmetric:
        d2 = 0.5 * (d2 + d2.T)
        np.fill_diagonal(d2, params.sigma_f**2)
    return d2


def kernel_eval(params: KernelParams, x, y) -> float:
    """k(x, y); symmetric, with values in (0, sigma_f^2]."""
    xv = np.asarray(x, dtype=float).ravel()
    yv = np.asarray(y, dtype=float).ravel()
    if xv.shape != yv.shape:
        raise InputError(f"dimension mismatch: {xv.shape} vs {yv.shape}")
    d2 = float(np.sum((xv - yv) ** 2))
    return params.sigma_f**2 * float(np.exp(-d2 / (2.0 * params.sigma_l**2)))


def gram(params: KernelParams, rows, cols=None) -> Gram:
    """Gram matrix of kernel evaluations between two point lists."""
    row_pts = as_points(rows, "rows")
    col_pts = row_pts if cols is None else as_points(cols, "cols")
    entries = gram_entries(params, row_pts, None if cols is None else col_pts)
    return Gram(entries=entries, row_points=row_pts, col_points=col_pts)


def mmd_squared(params: KernelParams, p: FiniteMeasure, q: FiniteMeasure) -> float:
    """Squared RKHS distance between the embeddings of two finite measures.

    May be a hair negative from cancellation; callers clamp.
    """
    if p.dim != q.dim:
        raise InputError(f"dimension mismatch: {p.dim} vs {q.dim}")
    kpp = gram_entries(params, p.atoms)
    kqq = gram_entries(params, q.atoms)
    kpq = gram_entries(params, p.atoms, q.atoms)
    wp, wq = p.weights, q.weights
    return float(wp @ kpp @ wp + wq @ kqq @ wq - 2.0 * (wp @ kpq @ wq))


def mmd(params: KernelParams, p: FiniteMeasure, q: FiniteMeasure) -> float:
    """MMD between two finitely supported measures.

    Radicands in [-MMD_RADICAND_TOL, 0) clamp to zero; anything below
    raises, because a broken metric would silently invalidate every
    certificate built on top of it.
    """
    r = mmd_squared(params, p, q)
    if r < -MMD_RADICAND_TOL:
        raise NumericsError(f"negative squared MMD beyond tolerance: {r}")
    return float(np.sqrt(max(r, 0.0)))
