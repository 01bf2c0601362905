"""Conflict-aware trimming operators for task vectors.

For a protected task ``k`` and one parameter slot, an operator removes the
components of every *other* task's vector that shift task ``k``'s features
the most, while a weight ``lam`` penalizes destroying the other task's own
feature contribution:

* linear weights: an orthonormal removal basis ``B``; the trimmed vector is
  ``T - T B B^T``.  ``B`` holds the top-`c` eigenvectors of the score matrix
  ``sum_{i != k} T_i^T (X_k^T X_k - lam * X_i^T X_i) T_i`` built from
  per-task exemplar features ``X``.
* scale parameters: a binary removal mask over dimensions scored by
  ``sum_{i != k} T_i_z^2 * (sum x_k_z^2 - lam * sum x_i_z^2)``.
* shift parameters: the same mask form with score ``sum_{i != k} T_i_z^2``
  (feature-free; valid for lam < 1 with balanced exemplar counts).

Scores and eigenvalues that are not strictly positive are excluded by
default: removing along them cannot reduce conflict.  Ties break toward the
lower dimension index so results are deterministic.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np

from .speclinalg import gram, sym_eig, top_c_eigvecs


@dataclasses.dataclass(frozen=True)
class TrimConfig:
    lam: float = 0.5
    c: int = 2
    positive_only: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.c < 0:
            raise ValueError("c must be >= 0")


@dataclasses.dataclass
class LinearBasis:
    """Column-orthonormal removal basis for one linear-weight slot."""

    slot: str
    basis: np.ndarray  # [d_out, c'] with c' possibly zero
    spectrum: np.ndarray | None = None  # score eigenvalues, descending

    @property
    def width(self) -> int:
        return self.basis.shape[1]


@dataclasses.dataclass
class Mask:
    """Binary removal mask for one scale/shift slot."""

    slot: str
    mask: np.ndarray  # bool [d]
    scores: np.ndarray | None = None  # per-dimension scores, unsorted

    @property
    def width(self) -> int:
        return int(np.sum(self.mask))


TrimOperator = LinearBasis | Mask


def _other_tasks(k, task_vectors: Mapping) -> list:
    if k not in task_vectors:
        raise KeyError(f"protected task {k!r} missing from task vectors")
    if len(task_vectors) < 2:
        raise ValueError("trimming needs at least two tasks")
    return [i for i in task_vectors if i != k]


def linear_score_matrix(k, task_vectors: Mapping, traces: Mapping,
                        lam: float) -> np.ndarray:
    """Symmetrized score matrix whose top eigenvectors form the basis."""
    others = _other_tasks(k, task_vectors)
    t_any = np.asarray(task_vectors[k], dtype=np.float64)
    if t_any.ndim != 2:
        raise ValueError(f"linear task vectors must be rank 2, got {t_any.shape}")
    d_in, d_out = t_any.shape
    if k not in traces:
        raise KeyError(f"missing trace for task {k!r}")
    g_k = gram(np.asarray(traces[k], dtype=np.float64))
    if g_k.shape != (d_in, d_in):
        raise ValueError(f"trace for task {k!r} has wrong feature dim")
    score = np.zeros((d_out, d_out))
    for i in others:
        t_i = np.asarray(task_vectors[i], dtype=np.float64)
        if t_i.shape != (d_in, d_out):
            raise ValueError(f"task {i!r} vector shape {t_i.shape} != {(d_in, d_out)}")
        if i not in traces:
            raise KeyError(f"missing trace for task {i!r}")
        g_i = gram(np.asarray(traces[i], dtype=np.float64))
        score += t_i.T @ (g_k - lam * g_i) @ t_i
    return (score + score.T) / 2.0


def linear_removal_basis(k, task_vectors: Mapping, traces: Mapping,
                         cfg: TrimConfig, slot: str = "") -> LinearBasis:
    """Removal basis protecting task ``k`` at one linear-weight slot."""
    score = linear_score_matrix(k, task_vectors, traces, cfg.lam)
    eig = sym_eig(score)
    basis = top_c_eigvecs(eig, min(cfg.c, score.shape[0]), cfg.positive_only)
    return LinearBasis(slot, basis, spectrum=eig.eigenvalues)


def apply_linear_projection(t: np.ndarray, op: LinearBasis) -> np.ndarray:
    """T - T B B^T; an empty basis leaves the vector untouched."""
    t = np.asarray(t, dtype=np.float64)
    b = op.basis
    if t.ndim != 2 or (b.size and t.shape[1] != b.shape[0]):
        raise ValueError(f"vector shape {t.shape} incompatible with basis {b.shape}")
    if b.shape[1] == 0:
        return t.copy()
    return t - (t @ b) @ b.T


def _select_top(scores: np.ndarray, c: int, exclude_nonpositive: bool) -> np.ndarray:
    mask = np.zeros(scores.size, dtype=bool)
    if c == 0:
        return mask
    order = np.lexsort((np.arange(scores.size), -scores))
    taken = 0
    for z in order:
        if taken >= c:
            break
        if exclude_nonpositive and scores[z] <= 0.0:
            break  # descending order: everything after is non-positive too
        mask[z] = True
        taken += 1
    return mask


def scale_scores(k, task_vectors: Mapping, traces: Mapping, lam: float) -> np.ndarray:
    others = _other_tasks(k, task_vectors)
    if k not in traces:
        raise KeyError(f"missing trace for task {k!r}")
    sumsq_k = np.sum(np.asarray(traces[k], dtype=np.float64) ** 2, axis=0)
    d = sumsq_k.size
    scores = np.zeros(d)
    for i in others:
        t_i = np.asarray(task_vectors[i], dtype=np.float64)
        if t_i.shape != (d,):
            raise ValueError(f"task {i!r} vector shape {t_i.shape} != ({d},)")
        if i not in traces:
            raise KeyError(f"missing trace for task {i!r}")
        sumsq_i = np.sum(np.asarray(traces[i], dtype=np.float64) ** 2, axis=0)
        scores += t_i**2 * (sumsq_k - lam * sumsq_i)
    return scores


def scale_mask(k, task_vectors: Mapping, traces: Mapping, cfg: TrimConfig,
               slot: str = "") -> Mask:
    """Removal mask for a scale slot: top-`c` strictly positive scores."""
    scores = scale_scores(k, task_vectors, traces, cfg.lam)
    return Mask(slot, _select_top(scores, cfg.c, cfg.positive_only), scores=scores)


def shift_scores(k, task_vectors: Mapping) -> np.ndarray:
    others = _other_tasks(k, task_vectors)
    d = np.asarray(task_vectors[k]).size
    scores = np.zeros(d)
    for i in others:
        t_i = np.asarray(task_vectors[i], dtype=np.float64)
        if t_i.shape != (d,):
            raise ValueError(f"task {i!r} vector shape {t_i.shape} != ({d},)")
        scores += t_i**2
    return scores


def shift_mask(k, task_vectors: Mapping, cfg: TrimConfig, slot: str = "") -> Mask:
    """Removal mask for a shift slot.

    The score is lam-free, but the derivation behind it carries a (1 - lam)
    factor that flips sign at lam >= 1, so such configs are rejected.  Zero
    scores are never selected (there is nothing to remove there).
    """
    if cfg.lam >= 1.0:
        raise ValueError(
            "shift trimming requires lam < 1; pass lam in [0, 1) or disable "
            "shift trimming"
        )
    scores = shift_scores(k, task_vectors)
    return Mask(slot, _select_top(scores, cfg.c, exclude_nonpositive=True),
                scores=scores)


def apply_mask(t: np.ndarray, op: Mask) -> np.ndarray:
    """Zero the masked entries; everything else is carried over bit-exactly."""
    t = np.asarray(t, dtype=np.float64)
    if t.shape != op.mask.shape:
        raise ValueError(f"vector shape {t.shape} != mask shape {op.mask.shape}")
    out = t.copy()
    out[op.mask] = 0.0
    return out


def apply_operator(t: np.ndarray, op: TrimOperator) -> np.ndarray:
    if isinstance(op, LinearBasis):
        return apply_linear_projection(t, op)
    return apply_mask(t, op)


def objective_value(kind: str, k, op: TrimOperator, task_vectors: Mapping,
                    traces: Mapping, cfg: TrimConfig) -> float:
    """Value of the maximization objective the operator was chosen for.

    Evaluated from the definitions (feature norms of removed components),
    independent of the eigen/score shortcut used to construct the operator.
    """
    others = _other_tasks(k, task_vectors)
    total = 0.0
    if kind == "linear":
        if not isinstance(op, LinearBasis):
            raise ValueError("linear objective needs a LinearBasis operator")
        b = op.basis
        if b.shape[1] == 0:
            return 0.0
        x_k = np.asarray(traces[k], dtype=np.float64)
        for i in others:
            removed = np.asarray(task_vectors[i], dtype=np.float64) @ b @ b.T
            x_i = np.asarray(traces[i], dtype=np.float64)
            total += np.sum((x_k @ removed) ** 2)
            total -= cfg.lam * np.sum((x_i @ removed) ** 2)
        return float(total)
    if kind == "scale":
        if not isinstance(op, Mask):
            raise ValueError("scale objective needs a Mask operator")
        m = op.mask.astype(np.float64)
        x_k = np.asarray(traces[k], dtype=np.float64)
        for i in others:
            removed = np.asarray(task_vectors[i], dtype=np.float64) * m
            x_i = np.asarray(traces[i], dtype=np.float64)
            total += np.sum((x_k * removed) ** 2)
            total -= cfg.lam * np.sum((x_i * removed) ** 2)
        return float(total)
    if kind == "shift":
        if not isinstance(op, Mask):
            raise ValueError("shift objective needs a Mask operator")
        m = op.mask.astype(np.float64)
        n_k = np.asarray(traces[k]).shape[0]
        for i in others:
            removed = np.asarray(task_vectors[i], dtype=np.float64) * m
            n_i = np.asarray(traces[i]).shape[0]
            total += (n_k - cfg.lam * n_i) * np.sum(removed**2)
        return float(total)
    raise ValueError(f"unknown objective kind {kind!r}")
