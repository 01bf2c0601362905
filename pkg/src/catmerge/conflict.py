"""Knowledge-conflict measurement and layer-wise diagnostics.

The conflict of task ``i``'s vector on task ``k`` is the loss increase

    delta_k|i = L_k(w0 + T_k + T_i) - L_k(w0 + T_k)

evaluated on task ``k``'s labeled data.  This module measures single
conflicts, sweeps them over grids of per-task merge coefficients (optionally
after conflict-aware trimming), decomposes feature shifts layer by layer, and
checks an empirical Lipschitz upper bound on the conflict.  The Lipschitz
constants are estimated from the evaluation data itself, so the bound check
is a sanity diagnostic, not a proof.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np

from .merging import TaskVector, apply_deltas, apply_trim_operators
from .netexec import (
    Batch,
    ModelSpec,
    apply_layer,
    forward,
    loss,
    per_sample_loss,
)
from .tensorio import Checkpoint

_SLACK = 1e-8


def knowledge_conflict(spec: ModelSpec, w0: Checkpoint, t_k: TaskVector,
                       t_i: TaskVector, dataset_k: Batch,
                       loss_kind: str) -> float:
    """Loss increase on task k's data when task i's vector joins the merge."""
    if dataset_k.y is None:
        raise ValueError("knowledge_conflict needs a labeled dataset")
    with_both = apply_deltas(w0, [(t_k, 1.0), (t_i, 1.0)])
    with_own = apply_deltas(w0, [(t_k, 1.0)])
    loss_both = loss(loss_kind, forward(spec, with_both, dataset_k), dataset_k.y)
    loss_own = loss(loss_kind, forward(spec, with_own, dataset_k), dataset_k.y)
    return loss_both - loss_own


@dataclasses.dataclass
class ConflictGrid:
    """Summed bidirectional conflict over a grid of merge coefficients."""

    alphas_k: np.ndarray
    alphas_i: np.ndarray
    values: np.ndarray  # [len(alphas_k), len(alphas_i)], row-major

    def mean(self) -> float:
        return float(np.mean(self.values))


def conflict_grid(
    spec: ModelSpec,
    w0: Checkpoint,
    t_k: TaskVector,
    t_i: TaskVector,
    dataset_k: Batch,
    dataset_i: Batch,
    alphas_k: Sequence[float],
    alphas_i: Sequence[float],
    loss_kind: str = "cross_entropy",
    edit: Mapping | None = None,
    workers: int = 1,
) -> ConflictGrid:
    """Cell (a, b) holds delta_k|i + delta_i|k with vectors scaled by a, b.

    If ``edit`` (a removal-operator set over the two tasks) is given, the
    vectors are trimmed before scaling.  Cells are independent; with
    ``workers > 1`` they are evaluated in a thread pool and written back by
    index, so the result does not depend on scheduling.
    """
    alphas_k = np.asarray(list(alphas_k), dtype=np.float64)
    alphas_i = np.asarray(list(alphas_i), dtype=np.float64)
    if alphas_k.size == 0 or alphas_i.size == 0:
        raise ValueError("alpha grids must be non-empty")
    if dataset_k.y is None or dataset_i.y is None:
        raise ValueError("conflict grids need labeled datasets")

    if edit:
        t_k, t_i = apply_trim_operators([t_k, t_i], edit)

    def task_loss(ckpt: Checkpoint, batch: Batch) -> float:
        return loss(loss_kind, forward(spec, ckpt, batch), batch.y)

    base_k = [task_loss(apply_deltas(w0, [(t_k, a)]), dataset_k) for a in alphas_k]
    base_i = [task_loss(apply_deltas(w0, [(t_i, b)]), dataset_i) for b in alphas_i]

    values = np.zeros((alphas_k.size, alphas_i.size))

    def cell(row: int, col: int) -> float:
        combined = apply_deltas(
            w0, [(t_k, float(alphas_k[row])), (t_i, float(alphas_i[col]))]
        )
        conflict_on_k = task_loss(combined, dataset_k) - base_k[row]
        conflict_on_i = task_loss(combined, dataset_i) - base_i[col]
        return conflict_on_k + conflict_on_i

    coords = [(r, c) for r in range(alphas_k.size) for c in range(alphas_i.size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (r, c), val in zip(coords, pool.map(lambda rc: cell(*rc), coords)):
                values[r, c] = val
    else:
        for r, c in coords:
            values[r, c] = cell(r, c)
    return ConflictGrid(alphas_k, alphas_i, values)


def grid_to_csv(grid: ConflictGrid) -> str:
    """Row-major CSV with 17 significant digits (exact float round-trip)."""
    lines = ["alpha_k,alpha_i,conflict"]
    for r, a in enumerate(grid.alphas_k):
        for c, b in enumerate(grid.alphas_i):
            lines.append(f"{a:.17g},{b:.17g},{grid.values[r, c]:.17g}")
    return "\n".join(lines) + "\n"


def write_grid_csv(path, grid: ConflictGrid) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(grid_to_csv(grid))


def read_grid_csv(path) -> ConflictGrid:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0] != "alpha_k,alpha_i,conflict":
        raise ValueError(f"{path}: not a conflict-grid CSV")
    rows = [tuple(float(tok) for tok in line.split(",")) for line in lines[1:]]
    alphas_k = sorted({r[0] for r in rows})
    alphas_i = sorted({r[1] for r in rows})
    index_k = {a: j for j, a in enumerate(alphas_k)}
    index_i = {b: j for j, b in enumerate(alphas_i)}
    values = np.zeros((len(alphas_k), len(alphas_i)))
    for a, b, v in rows:
        values[index_k[a], index_i[b]] = v
    return ConflictGrid(np.asarray(alphas_k), np.asarray(alphas_i), values)


@dataclasses.dataclass
class LayerShift:
    """Feature-shift decomposition for one layer."""

    index: int
    kind: str
    feat_shift: float        # ||f_l(perturbed) - f_l(clean)||_F over the batch
    local_shift: float       # ||f_l with only layer l perturbed - f_l(clean)||_F
    gamma_hat: float         # max per-exemplar output/input difference ratio
    lemma_ok: bool           # recursion inequality holds for every exemplar
    lemma_margin: float      # min slack across exemplars (>= -1e-8 when ok)


@dataclasses.dataclass
class LayerShiftReport:
    layers: list[LayerShift]

    def all_hold(self) -> bool:
        return all(entry.lemma_ok for entry in self.layers)

    def to_json_dict(self) -> dict:
        return {
            "layers": [dataclasses.asdict(entry) for entry in self.layers],
            "lemma_holds": self.all_hold(),
        }


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=1))


def layer_shift_decomposition(spec: ModelSpec, w0: Checkpoint, t_k: TaskVector,
                              t_i: TaskVector,
                              exemplars_k: Batch) -> LayerShiftReport:
    """Decompose the feature shift caused by ``t_i`` layer by layer.

    For every layer the total shift is compared against the recursion
    ``||shift_l|| <= gamma_l * ||shift_{l-1}|| + ||local_l||`` per exemplar,
    where ``gamma_l`` is the layer's empirical input-Lipschitz ratio under
    the perturbed parameters and ``local_l`` perturbs only layer ``l``'s own
    parameters.  Exemplar pairs with zero input difference are skipped in
    the gamma estimate.
    """
    clean = apply_deltas(w0, [(t_k, 1.0)])
    perturbed = apply_deltas(w0, [(t_k, 1.0), (t_i, 1.0)])

    x_clean = exemplars_k.x
    x_pert = exemplars_k.x
    prev_diff = np.zeros(exemplars_k.n)  # per-exemplar ||shift_{l-1}||
    entries = []
    for idx, layer in enumerate(spec.layers):
        out_clean = apply_layer(layer, x_clean, clean, idx)
        out_pert = apply_layer(layer, x_pert, perturbed, idx)
        local = apply_layer(layer, x_clean, perturbed, idx)

        diff = _row_norms(out_pert - out_clean)
        local_diff = _row_norms(local - out_clean)
        propagated = _row_norms(out_pert - local)  # gamma numerator
        in_diff = _row_norms(x_pert - x_clean)

        valid = in_diff > 0.0
        gamma = float(np.max(propagated[valid] / in_diff[valid])) if np.any(valid) else 0.0
        margin = float(np.min(gamma * prev_diff + local_diff - diff))
        entries.append(
            LayerShift(
                index=idx,
                kind=type(layer).__name__.lower(),
                feat_shift=float(np.linalg.norm(out_pert - out_clean)),
                local_shift=float(np.linalg.norm(local - out_clean)),
                gamma_hat=gamma,
                lemma_ok=bool(margin >= -_SLACK),
                lemma_margin=margin,
            )
        )
        x_clean, x_pert, prev_diff = out_clean, out_pert, diff
    return LayerShiftReport(entries)


@dataclasses.dataclass
class BoundCheck:
    """Empirical conflict bound: |delta_k|i| against the layer-shift sum."""

    lhs: float
    rhs: float
    holds: bool
    beta_hat: float
    gammas: list[float]

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def theorem_bound_check(spec: ModelSpec, w0: Checkpoint, t_k: TaskVector,
                        t_i: TaskVector, dataset_k: Batch,
                        loss_kind: str) -> BoundCheck:
    """Check |delta_k|i| <= beta_hat * sum_l (prod gamma_m) * ||local_l||.

    ``beta_hat`` is the max per-exemplar ratio of loss change to final-output
    change; gammas and local shifts come from the layer decomposition on the
    same data.  All constants are empirical maxima over the dataset, so the
    inequality is expected to hold up to floating-point slack.
    """
    if dataset_k.y is None:
        raise ValueError("theorem_bound_check needs a labeled dataset")
    report = layer_shift_decomposition(spec, w0, t_k, t_i,
                                       Batch(dataset_k.x.copy()))
    lhs = abs(knowledge_conflict(spec, w0, t_k, t_i, dataset_k, loss_kind))

    clean = apply_deltas(w0, [(t_k, 1.0)])
    perturbed = apply_deltas(w0, [(t_k, 1.0), (t_i, 1.0)])
    z_clean = forward(spec, clean, dataset_k)
    z_pert = forward(spec, perturbed, dataset_k)
    losses_clean = per_sample_loss(loss_kind, z_clean, dataset_k.y)
    losses_pert = per_sample_loss(loss_kind, z_pert, dataset_k.y)
    out_diff = _row_norms(z_pert - z_clean)
    valid = out_diff > 0.0
    beta = float(np.max(np.abs(losses_pert - losses_clean)[valid] / out_diff[valid])) \
        if np.any(valid) else 0.0

    gammas = [entry.gamma_hat for entry in report.layers]
    rhs = 0.0
    for l, entry in enumerate(report.layers):
        tail = 1.0
        for m in range(l + 1, len(gammas)):
            tail *= gammas[m]
        rhs += tail * entry.local_shift
    rhs *= beta
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + _SLACK),
                      beta_hat=beta, gammas=gammas)
