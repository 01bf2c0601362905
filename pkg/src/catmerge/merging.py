"""Task-vector algebra and end-to-end merge strategies.

Strategies over a shared pretrained checkpoint ``w0`` and per-task vectors
``T_k = W_k - w0``:

* ``average``       -- elementwise mean of checkpoints.
* ``task_arithmetic`` -- ``w0 + alpha * sum_k T_k``.
* ``magnitude_trim`` -- per vector, keep only the largest-magnitude entries
  (a Ties-style baseline), then task arithmetic.
* ``cat``           -- conflict-aware trimming: collect per-slot features for
  every task under its own fine-tuned parameters, build removal operators
  protecting each task, edit all other tasks' vectors, then task arithmetic.
* ``lsq``           -- per-slot closed-form least-squares merge of the task
  vectors (pseudo-inverse for linear weights, feature-weighted per-dimension
  average for scales, plain mean for shifts).

Everything is deterministic: task order is list order, accumulation is
left-to-right, and operator computation precedes all edits.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Mapping, Sequence

import numpy as np

from . import netexec, trimming
from .netexec import Batch, ModelSpec, forward_collect
from .speclinalg import gram, spd_solve
from .tensorio import Checkpoint, ParamKind, check_aligned
from .trimming import LinearBasis, Mask, TrimConfig, TrimOperator


@dataclasses.dataclass
class TaskVector:
    """Per-layer parameter deltas of one fine-tuned model."""

    task_id: int
    delta: Checkpoint


@dataclasses.dataclass
class MergeConfig:
    method: str = "cat"  # average | task_arithmetic | magnitude_trim | cat | lsq
    alpha: float = 1.0
    trim: TrimConfig = dataclasses.field(default_factory=TrimConfig)
    magnitude_keep_fraction: float = 1.0
    exemplar_paths: tuple[str, ...] | None = None

    def __post_init__(self):
        methods = ("average", "task_arithmetic", "magnitude_trim", "cat", "lsq")
        if self.method not in methods:
            raise ValueError(f"method must be one of {methods}")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if not (0.0 < self.magnitude_keep_fraction <= 1.0):
            raise ValueError("magnitude_keep_fraction must be in (0, 1]")


def compute_task_vector(w0: Checkpoint, wk: Checkpoint, task_id: int = 0) -> TaskVector:
    """Elementwise ``wk - w0`` with kinds copied from ``w0``."""
    if not check_aligned(w0, wk):
        raise ValueError("checkpoints are not aligned")
    delta = Checkpoint()
    for name, entry in w0:
        if entry.store_dtype == "u32":
            raise ValueError(f"slot {name}: integer tensors have no task vector")
        delta.add(name, entry.kind, wk[name].array - entry.array)
    return TaskVector(task_id, delta)


def apply_deltas(w0: Checkpoint,
                 scaled: Sequence[tuple[TaskVector, float]]) -> Checkpoint:
    """``w0 + sum_j scale_j * delta_j``, accumulated left to right."""
    for tv, _ in scaled:
        if not check_aligned(w0, tv.delta):
            raise ValueError(f"task vector {tv.task_id} not aligned to base")
    out = Checkpoint(meta=w0.meta)
    for name, entry in w0:
        acc = entry.array
        for tv, scale in scaled:
            acc = acc + scale * tv.delta[name].array
        out.add(name, entry.kind, acc, store_dtype=entry.store_dtype)
    return out


def merge_task_arithmetic(w0: Checkpoint, tvs: Sequence[TaskVector],
                          alpha: float) -> Checkpoint:
    """``w0 + alpha * sum_k T_k`` in fixed task order."""
    for tv in tvs:
        if not check_aligned(w0, tv.delta):
            raise ValueError(f"task vector {tv.task_id} not aligned to base")
    out = Checkpoint(meta=w0.meta)
    for name, entry in w0:
        acc = np.zeros_like(entry.array)
        for tv in tvs:
            acc = acc + tv.delta[name].array
        out.add(name, entry.kind, entry.array + alpha * acc,
                store_dtype=entry.store_dtype)
    return out


def merge_average(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise arithmetic mean of mutually aligned checkpoints."""
    if not checkpoints:
        raise ValueError("cannot average an empty list of checkpoints")
    base = checkpoints[0]
    for ck in checkpoints[1:]:
        if not check_aligned(base, ck):
            raise ValueError("checkpoints are not mutually aligned")
    out = Checkpoint(meta=base.meta)
    for name, entry in base:
        acc = entry.array
        for ck in checkpoints[1:]:
            acc = acc + ck[name].array
        out.add(name, entry.kind, acc / len(checkpoints),
                store_dtype=entry.store_dtype)
    return out


def magnitude_trim_vector(tv: TaskVector, keep_fraction: float) -> TaskVector:
    """Zero all but the top ``floor(keep_fraction * total)`` magnitudes.

    The threshold is global across all slots of the vector; magnitude ties
    break toward the lower flattened index.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must be in (0, 1]")
    names = tv.delta.names()
    flats = [tv.delta[name].array.reshape(-1) for name in names]
    united = np.concatenate(flats) if flats else np.zeros(0)
    total = united.size
    kept = int(np.floor(keep_fraction * total))
    keep_mask = np.zeros(total, dtype=bool)
    if kept > 0:
        order = np.lexsort((np.arange(total), -np.abs(united)))
        keep_mask[order[:kept]] = True

    out = Checkpoint()
    offset = 0
    for name in names:
        entry = tv.delta[name]
        size = entry.array.size
        piece = united[offset : offset + size].copy()
        piece[~keep_mask[offset : offset + size]] = 0.0
        out.add(name, entry.kind, piece.reshape(entry.array.shape))
        offset += size
    return TaskVector(tv.task_id, out)


def merge_magnitude_trim(w0: Checkpoint, tvs: Sequence[TaskVector],
                         keep_fraction: float, alpha: float) -> Checkpoint:
    trimmed = [magnitude_trim_vector(tv, keep_fraction) for tv in tvs]
    return merge_task_arithmetic(w0, trimmed, alpha)


def collect_task_traces(spec: ModelSpec, w0: Checkpoint,
                        tvs: Sequence[TaskVector],
                        exemplars: Mapping[int, Batch]) -> dict[int, dict]:
    """Per-slot input features for every task under its fine-tuned params."""
    counts = set()
    traces: dict[int, dict] = {}
    for tv in tvs:
        if tv.task_id not in exemplars:
            raise ValueError(f"missing exemplars for task {tv.task_id}")
        batch = exemplars[tv.task_id]
        counts.add(batch.n)
        finetuned = apply_deltas(w0, [(tv, 1.0)])
        _, trace = forward_collect(spec, finetuned, batch)
        traces[tv.task_id] = trace
    if len(counts) > 1:
        raise ValueError(f"exemplar counts differ across tasks: {sorted(counts)}")
    return traces


def compute_trim_operators(
    spec: ModelSpec,
    w0: Checkpoint,
    tvs: Sequence[TaskVector],
    exemplars: Mapping[int, Batch],
    cfg: TrimConfig,
) -> dict[tuple[int, str], TrimOperator]:
    """All removal operators, computed from the *original* task vectors.

    Returns a mapping (protected task, slot) -> operator.  Frozen slots are
    skipped entirely; a single task yields no operators.
    """
    netexec.check_spec_params(spec, w0)
    for tv in tvs:
        if not check_aligned(w0, tv.delta):
            raise ValueError(f"task vector {tv.task_id} not aligned to base")
    if len(tvs) < 2:
        return {}
    traces = collect_task_traces(spec, w0, tvs, exemplars)

    operators: dict[tuple[int, str], TrimOperator] = {}
    for tv in tvs:
        k = tv.task_id
        for name, entry in w0:
            kind = entry.kind
            if kind is ParamKind.FROZEN:
                continue
            slot_vectors = {t.task_id: t.delta[name].array for t in tvs}
            slot_traces = {tid: traces[tid][name] for tid in slot_vectors}
            if kind is ParamKind.LINEAR_WEIGHT:
                op: TrimOperator = trimming.linear_removal_basis(
                    k, slot_vectors, slot_traces, cfg, slot=name
                )
            elif kind is ParamKind.SCALE:
                op = trimming.scale_mask(k, slot_vectors, slot_traces, cfg, slot=name)
            else:
                op = trimming.shift_mask(k, slot_vectors, cfg, slot=name)
            operators[(k, name)] = op
    return operators


def apply_trim_operators(
    tvs: Sequence[TaskVector],
    operators: Mapping[tuple[int, str], TrimOperator],
) -> list[TaskVector]:
    """Edit phase: ascending protected task, then slot, then target task.

    Each protected task's operators are applied to every *other* task's
    vector; operators for different protected tasks compose sequentially.
    """
    edited = []
    for tv in tvs:
        delta = Checkpoint()
        for name, entry in tv.delta:
            delta.add(name, entry.kind, entry.array.copy())
        edited.append(TaskVector(tv.task_id, delta))

    for protector in tvs:
        k = protector.task_id
        for name, _ in protector.delta:
            op = operators.get((k, name))
            if op is None:
                continue
            for target in edited:
                if target.task_id == k:
                    continue
                entry = target.delta[name]
                entry.array = trimming.apply_operator(entry.array, op)
    return edited


def _operator_summary(operators: Mapping[tuple[int, str], TrimOperator],
                      w0: Checkpoint, tvs: Sequence[TaskVector]) -> list[dict]:
    if not operators:
        return []
    rows = []
    for name, entry in w0:
        if entry.kind is ParamKind.FROZEN:
            continue
        per_task = []
        for tv in tvs:
            op = operators.get((tv.task_id, name))
            if op is None:
                continue
            if isinstance(op, LinearBasis):
                spectrum = op.spectrum
            else:
                spectrum = None if op.scores is None else np.sort(op.scores)[::-1]
            per_task.append({
                "task": tv.task_id,
                "removed": op.width,
                "score_spectrum": [] if spectrum is None
                else [float(v) for v in spectrum],
            })
        rows.append({"slot": name, "kind": entry.kind.value, "operators": per_task})
    return rows


def merge_cat(
    spec: ModelSpec,
    w0: Checkpoint,
    tvs: Sequence[TaskVector],
    exemplars: Mapping[int, Batch],
    cfg: MergeConfig,
) -> tuple[Checkpoint, dict[tuple[int, str], TrimOperator], dict]:
    """Conflict-aware merge: trim, then task arithmetic.

    With ``cfg.trim.c == 0`` the output is bit-identical to plain task
    arithmetic; with a single task there is nothing to trim.
    """
    if not tvs:
        raise ValueError("merge_cat needs at least one task vector")
    operators = compute_trim_operators(spec, w0, tvs, exemplars, cfg.trim)
    edited = apply_trim_operators(tvs, operators)
    merged = merge_task_arithmetic(w0, edited, cfg.alpha)
    report = {
        "method": "cat",
        "alpha": cfg.alpha,
        "lam": cfg.trim.lam,
        "c": cfg.trim.c,
        "positive_only": cfg.trim.positive_only,
        "tasks": [tv.task_id for tv in tvs],
        "exemplars_per_task": exemplars[tvs[0].task_id].n if len(tvs) > 1 else 0,
        "slots": _operator_summary(operators, w0, tvs),
    }
    return merged, operators, report


def merge_lsq(
    spec: ModelSpec,
    w0: Checkpoint,
    tvs: Sequence[TaskVector],
    exemplars: Mapping[int, Batch],
    alpha: float,
) -> Checkpoint:
    """Closed-form least-squares merge of the task vectors, slot by slot.

    Linear weights solve ``(sum_k X_k^T X_k) T = sum_k X_k^T X_k T_k`` with a
    minimum-norm pseudo-inverse; scale slots average per dimension weighted
    by feature energy (dimensions with zero energy fall back to the plain
    mean); shift slots take the plain mean.  Frozen slots keep task
    arithmetic's plain sum.
    """
    if not tvs:
        raise ValueError("merge_lsq needs at least one task vector")
    netexec.check_spec_params(spec, w0)
    for tv in tvs:
        if not check_aligned(w0, tv.delta):
            raise ValueError(f"task vector {tv.task_id} not aligned to base")
    traces = collect_task_traces(spec, w0, tvs, exemplars)

    out = Checkpoint(meta=w0.meta)
    for name, entry in w0:
        kind = entry.kind
        deltas = [tv.delta[name].array for tv in tvs]
        if kind is ParamKind.FROZEN:
            merged = deltas[0].copy()
            for d in deltas[1:]:
                merged = merged + d
        elif kind is ParamKind.LINEAR_WEIGHT:
            lhs = np.zeros((entry.array.shape[0],) * 2)
            rhs = np.zeros_like(entry.array)
            for tv, delta in zip(tvs, deltas):
                g = gram(traces[tv.task_id][name])
                lhs += g
                rhs += g @ delta
            merged = spd_solve(lhs, rhs)
        elif kind is ParamKind.SCALE:
            denom = np.zeros(entry.array.shape[0])
            numer = np.zeros(entry.array.shape[0])
            for tv, delta in zip(tvs, deltas):
                sumsq = np.sum(np.asarray(traces[tv.task_id][name]) ** 2, axis=0)
                denom += sumsq
                numer += sumsq * delta
            plain_mean = np.mean(deltas, axis=0)
            with np.errstate(divide="ignore", invalid="ignore"):
                merged = np.where(denom > 0.0, numer / np.where(denom > 0, denom, 1.0),
                                  plain_mean)
        else:  # SHIFT
            merged = np.mean(deltas, axis=0)
        out.add(name, kind, entry.array + alpha * merged,
                store_dtype=entry.store_dtype)
    return out


def save_operators(path, operators: Mapping[tuple[int, str], TrimOperator]) -> None:
    """Persist a removal-operator set to an MTC1 container.

    Non-empty bases/masks become tensors named ``task{k}:{slot}``; empty
    operators are recorded in the container meta so a reload reproduces the
    set exactly.
    """
    from .tensorio import write_container

    ckpt = Checkpoint()
    index = []
    for (k, slot), op in operators.items():
        name = f"task{k}:{slot}"
        if isinstance(op, LinearBasis):
            rec = {"name": name, "task": k, "slot": slot, "op": "basis",
                   "width": op.width, "dim": int(op.basis.shape[0])}
            if op.width > 0:
                ckpt.add(name, ParamKind.FROZEN, op.basis)
        else:
            rec = {"name": name, "task": k, "slot": slot, "op": "mask",
                   "width": op.width, "dim": int(op.mask.size)}
            if op.width > 0:
                ckpt.add(name, ParamKind.FROZEN, op.mask.astype(np.uint32))
        index.append(rec)
    ckpt.meta["operators"] = json.dumps(index, sort_keys=True)
    write_container(path, ckpt)


def load_operators(path) -> dict[tuple[int, str], TrimOperator]:
    from .tensorio import read_container

    ckpt = read_container(path)
    index = json.loads(ckpt.meta["operators"])
    operators: dict[tuple[int, str], TrimOperator] = {}
    for rec in index:
        key = (rec["task"], rec["slot"])
        if rec["op"] == "basis":
            if rec["width"] == 0:
                basis = np.zeros((rec["dim"], 0))
            else:
                basis = ckpt[rec["name"]].array
            operators[key] = LinearBasis(rec["slot"], basis)
        else:
            if rec["width"] == 0:
                mask = np.zeros(rec["dim"], dtype=bool)
            else:
                mask = ckpt[rec["name"]].array.astype(bool)
            operators[key] = Mask(rec["slot"], mask)
    return operators
