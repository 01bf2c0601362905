"""Dense symmetric eigendecomposition and least-squares kernels.

A cyclic Jacobi sweep is used instead of a LAPACK binding so that eigenvalue
order, eigenvector signs, and convergence behavior are fully pinned down and
reproducible.  Matrices at play here are small (up to a few hundred rows).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np


class EigenConvergenceError(RuntimeError):
    """Jacobi sweep limit reached before the off-diagonal norm target."""


@dataclasses.dataclass
class EigenResult:
    """Eigenvalues sorted descending; eigenvector j in column j."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eig(a: np.ndarray, *, max_sweeps: int = 100, tol: float = 1e-12) -> EigenResult:
    """Eigendecomposition of a (near-)symmetric real matrix.

    The input is symmetrized as (A + A^T)/2, then reduced by cyclic Jacobi
    rotations until the off-diagonal Frobenius norm drops below
    ``tol * ||A||_F``.  Ordering is descending eigenvalue with ties broken by
    the pre-sort diagonal index; each eigenvector is scaled so its
    largest-magnitude component is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a = (a + a.T) / 2.0
    v = np.eye(n)
    anorm = float(np.linalg.norm(a))
    if n == 1 or anorm == 0.0:
        return _ordered(np.diag(a).copy(), v)

    target = tol * anorm
    for _ in range(max_sweeps):
        if _offdiag_norm(a) <= target:
            return _ordered(np.diag(a).copy(), v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                rows_p = a[p, :].copy()
                rows_q = a[q, :].copy()
                a[p, :] = c * rows_p - s * rows_q
                a[q, :] = s * rows_p + c * rows_q
                cols_p = a[:, p].copy()
                cols_q = a[:, q].copy()
                a[:, p] = c * cols_p - s * cols_q
                a[:, q] = s * cols_p + c * cols_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = _offdiag_norm(a)
    if off <= target:
        return _ordered(np.diag(a).copy(), v)
    raise EigenConvergenceError(
        f"no convergence after {max_sweeps} sweeps "
        f"(off-diagonal residual {off:.3e}, target {target:.3e})"
    )


def _offdiag_norm(a: np.ndarray) -> float:
    # Summing the off-diagonal squares directly avoids the cancellation that
    # ||A||^2 - sum(diag^2) suffers once the residual is tiny.
    b = a.copy()
    np.fill_diagonal(b, 0.0)
    return float(np.linalg.norm(b))


def _ordered(values: np.ndarray, vectors: np.ndarray) -> EigenResult:
    order = sorted(range(values.size), key=lambda j: (-values[j], j))
    values = values[order]
    vectors = vectors[:, order]
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0.0:
            vectors[:, j] = -col
    return EigenResult(values, vectors)


def gram(x: np.ndarray) -> np.ndarray:
    """X^T X, exactly symmetric (upper triangle computed, then mirrored)."""
    x = np.asarray(x, dtype=np.float64)
    m = x.T @ x
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


def top_c_eigvecs(e: EigenResult, c: int, positive_only: bool) -> np.ndarray:
    """First ``min(c, available)`` eigenvector columns.

    With ``positive_only``, columns whose eigenvalue is at or below
    ``1e-10 * max(1, lambda_max)`` are dropped, so fewer than ``c`` columns
    may come back.
    """
    d = e.eigenvectors.shape[0]
    if c < 0:
        raise ValueError("c must be >= 0")
    if c > d:
        raise ValueError(f"c={c} exceeds dimension {d}")
    if c == 0:
        return np.zeros((d, 0))
    count = c
    if positive_only:
        lam_max = float(e.eigenvalues[0]) if e.eigenvalues.size else 0.0
        eigtol = 1e-10 * max(1.0, lam_max)
        count = min(c, int(np.sum(e.eigenvalues > eigtol)))
    return e.eigenvectors[:, :count].copy()


def spd_solve(a: np.ndarray, b: np.ndarray, *, reltol: float = 1e-12) -> np.ndarray:
    """Minimum-norm solve of A X = B for symmetric PSD A.

    Works through ``sym_eig`` and inverts only eigenvalues above
    ``reltol * lambda_max``; rank deficiency therefore yields the
    pseudo-inverse (minimum-norm) solution.
    """
    b = np.asarray(b, dtype=np.float64)
    e = sym_eig(a)
    lam_max = float(e.eigenvalues[0]) if e.eigenvalues.size else 0.0
    if lam_max <= 0.0:
        return np.zeros_like(b, dtype=np.float64)
    keep = e.eigenvalues > reltol * lam_max
    v = e.eigenvectors[:, keep]
    inv = 1.0 / e.eigenvalues[keep]
    return v @ (inv[:, None] * (v.T @ b))
