"""Deterministic dense symmetric eigendecomposition and a finite-difference
gradient probe.

The eigensolver is a cyclic Jacobi sweep: unconditionally stable, free of
library-version drift, and bit-reproducible because the rotation order, the
eigenvalue tie-breaking and the eigenvector sign convention are all fixed.
Matrices here are small (feature dimension, at most a few dozen), so the
O(n^3)-per-sweep cost is irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, OracleError

# Convergence: off-diagonal Frobenius norm relative to the full norm.
JACOBI_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

# Eigenvalues closer than this are considered tied and keep column order.
EIGENVALUE_TIE_TOL = 1e-12

DEFAULT_FD_STEP = 1e-4


@dataclass(frozen=True)
class SymMatrix:
    """A real symmetric matrix, validated at construction."""

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if self.dim < 1:
            raise InputError(f"dim must be >= 1, got {self.dim}")
        if entries.shape != (self.dim, self.dim):
            raise InputError(f"expected {self.dim}x{self.dim} entries, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise InputError("matrix entries must be finite")
        if not np.array_equal(entries, entries.T):
            raise InputError("matrix entries must be exactly symmetric")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_array(cls, a) -> "SymMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError(f"expected a square matrix, got shape {a.shape}")
        return cls(dim=a.shape[0], entries=a)


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalues sorted descending with matching orthonormal columns."""

    values: np.ndarray   # (dim,)
    vectors: np.ndarray  # (dim, dim), column i pairs with values[i]

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _jacobi_rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """Zero out a[p, q] with a Givens rotation, accumulating into v."""
    apq = a[p, q]
    if apq == 0.0:
        return
    diff = a[q, q] - a[p, p]
    # Stable tangent of the rotation angle; sign chosen to keep |t| <= 1.
    if abs(apq) < 1e-300 * abs(diff):
        t = apq / diff  # rotation angle is denormal-small
    else:
        theta = diff / (2.0 * apq)
        t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c

    app, aqq = a[p, p], a[q, q]
    col_p = a[:, p].copy()
    col_q = a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    a[p, :] = a[:, p]
    a[q, :] = a[:, q]
    a[p, p] = app - t * apq
    a[q, q] = aqq + t * apq
    a[p, q] = 0.0
    a[q, p] = 0.0

    vp = v[:, p].copy()
    vq = v[:, q].copy()
    v[:, p] = c * vp - s * vq
    v[:, q] = s * vp + c * vq


def _order_descending_with_ties(values: np.ndarray) -> list[int]:
    """Indices sorting values descending; near-ties keep original column order.

    Sorted neighbours closer than EIGENVALUE_TIE_TOL are chained into one tie
    group and re-ordered by original index, which pins the output for repeated
    eigenvalues (e.g. the identity matrix).
    """
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    result: list[int] = []
    group = [order[0]] if order else []
    for i in order[1:]:
        if abs(values[group[-1]] - values[i]) < EIGENVALUE_TIE_TOL:
            group.append(i)
        else:
            result.extend(sorted(group))
            group = [i]
    result.extend(sorted(group))
    return result


def sym_eigendecomposition(s: SymMatrix) -> EigenPairs:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns eigenvalues in descending order.  Each eigenvector column is
    flipped so that its largest-magnitude component is positive, making the
    output a pure function of the input across runs and platforms.
    """
    a = s.entries.copy()
    n = s.dim
    v = np.eye(n)

    if n > 1:
        norm = np.linalg.norm(a)
        tol = JACOBI_REL_TOL * norm
        for _ in range(JACOBI_MAX_SWEEPS):
            off_part = a.copy()
            np.fill_diagonal(off_part, 0.0)
            off = np.linalg.norm(off_part)
            if off <= tol:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    _jacobi_rotate(a, v, p, q)

    values = np.diag(a).copy()
    order = _order_descending_with_ties(values)
    values = values[order]
    vectors = v[:, order]

    # Sign convention: largest-magnitude component of each column positive.
    for j in range(n):
        k = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[k, j] < 0.0:
            vectors[:, j] = -vectors[:, j]

    return EigenPairs(values=values, vectors=vectors)


def finite_difference_gradient(f, x, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    This is the independent oracle every analytic gradient in the package is
    checked against, so it deliberately shares no code with the autodiff tape.
    """
    if h <= 0:
        raise InputError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        fp = float(f(xp))
        xm = x.copy()
        xm[i] -= h
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
