"""Seeded synthetic multi-task benchmark suites.

Each task is a Gaussian-blob classification problem whose class-mean
directions live in a task subspace.  ``conflict_strength`` blends every
task's subspace between a private orthogonal block (0.0: tasks do not
interact) and one shared block with task-specific label rotations (1.0:
tasks place the same inputs in different classes, the worst case for
merging).  A shared pretrained model is trained briefly on the pooled data,
then fine-tuned per task; everything derives from one documented seed, so
suites are bit-reproducible.

Stream labels (see prng.derive): 0 = subspace frame, 1 = parameter init,
(2, task, part) = task data with part 0/1/2 = train/eval/exemplars.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .netexec import (
    Activation,
    Batch,
    Linear,
    ModelSpec,
    Norm,
    backward,
    forward,
    loss,
    sgd_step,
)
from .prng import Stream
from .tensorio import Checkpoint, ParamKind, read_container, write_container

_FRAME, _INIT, _DATA = 0, 1, 2
_TRAIN, _EVAL, _EXEMPLARS = 0, 1, 2


@dataclasses.dataclass
class SuiteConfig:
    seed: int
    tasks: int = 4
    input_dim: int = 32
    hidden_dim: int = 64
    hidden_layers: int = 2
    classes: int = 4
    train_samples: int = 512
    eval_samples: int = 256
    exemplars: int = 3
    finetune_steps: int = 300
    lr: float = 0.05
    conflict_strength: float = 0.8
    mean_scale: float = 3.0
    noise: float = 1.0
    norm_eps: float = 1e-5
    model: ModelSpec | None = None

    def __post_init__(self):
        if self.tasks < 1:
            raise ValueError("tasks must be >= 1")
        if not (0.0 <= self.conflict_strength <= 1.0):
            raise ValueError("conflict_strength must be in [0, 1]")
        if self.exemplars < 1:
            raise ValueError("exemplars must be >= 1")

    def resolved_model(self) -> ModelSpec:
        if self.model is not None:
            return self.model
        layers: list = []
        cur = self.input_dim
        for _ in range(self.hidden_layers):
            layers.append(Linear(cur, self.hidden_dim))
            layers.append(Norm(self.hidden_dim, self.norm_eps))
            layers.append(Activation("relu"))
            cur = self.hidden_dim
        layers.append(Linear(cur, self.classes))
        return ModelSpec(layers, self.input_dim, self.classes)

    def to_json_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("model")
        return data

    @classmethod
    def from_json_dict(cls, data: dict, model: ModelSpec | None = None) -> "SuiteConfig":
        return cls(model=model, **data)


@dataclasses.dataclass
class TaskData:
    task_id: int
    finetuned: Checkpoint
    train: Batch
    eval: Batch
    exemplars: Batch


@dataclasses.dataclass
class TaskSuite:
    config: SuiteConfig
    spec: ModelSpec
    pretrained: Checkpoint
    tasks: list[TaskData]


def _orthonormal_columns(stream: Stream, dim: int, count: int) -> np.ndarray:
    """Deterministic modified Gram-Schmidt on PRNG gaussians."""
    g = stream.normal_matrix(dim, count)
    q = np.zeros((dim, count))
    for j in range(count):
        v = g[:, j].copy()
        for _ in range(2):  # re-orthogonalize for numerical safety
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
        q[:, j] = v / np.linalg.norm(v)
    return q


def _class_directions(cfg: SuiteConfig) -> np.ndarray:
    """Unit direction of every (task, class) mean; shape [K, C, D]."""
    need = (cfg.tasks + 1) * cfg.classes
    if need > cfg.input_dim:
        raise ValueError(
            f"input_dim {cfg.input_dim} too small for {cfg.tasks} tasks x "
            f"{cfg.classes} classes with orthogonal subspaces (needs >= {need})"
        )
    frame = _orthonormal_columns(Stream(cfg.seed).split(_FRAME),
                                 cfg.input_dim, need)
    common = frame[:, cfg.tasks * cfg.classes :]
    rho = cfg.conflict_strength
    dirs = np.zeros((cfg.tasks, cfg.classes, cfg.input_dim))
    for t in range(cfg.tasks):
        own = frame[:, t * cfg.classes : (t + 1) * cfg.classes]
        for c in range(cfg.classes):
            shared = common[:, (c + t) % cfg.classes]  # task-rotated labels
            v = (1.0 - rho) * own[:, c] + rho * shared
            dirs[t, c] = v / np.linalg.norm(v)
    return dirs


def _sample_task_batch(cfg: SuiteConfig, dirs: np.ndarray, task: int,
                       part: int, count: int) -> Batch:
    stream = Stream(cfg.seed).split(_DATA, task, part)
    labels = np.arange(count, dtype=np.uint32) % np.uint32(cfg.classes)
    noise = stream.normal_matrix(count, cfg.input_dim)
    x = cfg.mean_scale * dirs[task, labels.astype(np.int64)] + cfg.noise * noise
    return Batch(x, labels)


def init_params(spec: ModelSpec, stream: Stream) -> Checkpoint:
    """Gaussian fan-in init for weights; scales 1, shifts/biases 0."""
    ckpt = Checkpoint()
    for name, kind, shape in spec.param_slots():
        if kind is ParamKind.LINEAR_WEIGHT:
            fan_in = shape[0]
            arr = stream.normal_matrix(*shape) / np.sqrt(fan_in)
        elif kind is ParamKind.SCALE:
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        ckpt.add(name, kind, arr)
    return ckpt


def train(spec: ModelSpec, params: Checkpoint, batch: Batch, steps: int,
          lr: float, loss_kind: str = "cross_entropy") -> Checkpoint:
    """Full-batch gradient descent; deterministic."""
    for _ in range(steps):
        grads = backward(spec, params, batch, loss_kind)
        params = sgd_step(params, grads, lr)
    return params


def generate_suite(cfg: SuiteConfig) -> TaskSuite:
    """Pretrained model, per-task fine-tunes, datasets, and exemplar sets."""
    spec = cfg.resolved_model()
    dirs = _class_directions(cfg)

    batches = []
    for t in range(cfg.tasks):
        batches.append(
            (
                _sample_task_batch(cfg, dirs, t, _TRAIN, cfg.train_samples),
                _sample_task_batch(cfg, dirs, t, _EVAL, cfg.eval_samples),
                _sample_task_batch(cfg, dirs, t, _EXEMPLARS, cfg.exemplars),
            )
        )

    params = init_params(spec, Stream(cfg.seed).split(_INIT))
    pooled = Batch(
        np.concatenate([b[0].x for b in batches], axis=0),
        np.concatenate([b[0].y for b in batches], axis=0),
    )
    pretrain_steps = max(1, cfg.finetune_steps // 5)
    pretrained = train(spec, params, pooled, pretrain_steps, cfg.lr)
    pretrained.meta["role"] = "pretrained"

    tasks = []
    for t in range(cfg.tasks):
        train_batch, eval_batch, exemplar_batch = batches[t]
        finetuned = train(spec, pretrained, train_batch, cfg.finetune_steps, cfg.lr)
        finetuned = _with_meta(finetuned, {"role": "finetuned", "task": str(t)})
        tasks.append(TaskData(t, finetuned, train_batch, eval_batch,
                              Batch(exemplar_batch.x)))
    return TaskSuite(cfg, spec, pretrained, tasks)


def _with_meta(ckpt: Checkpoint, meta: dict) -> Checkpoint:
    out = Checkpoint(meta=meta)
    for name, entry in ckpt:
        out.add(name, entry.kind, entry.array, store_dtype=entry.store_dtype)
    return out


def evaluate(spec: ModelSpec, checkpoint: Checkpoint, eval_batch: Batch,
             loss_kind: str = "cross_entropy") -> tuple[float, float]:
    """(mean loss, argmax accuracy) on a labeled batch."""
    if eval_batch.y is None:
        raise ValueError("evaluate needs a labeled batch")
    logits = forward(spec, checkpoint, eval_batch)
    mean_loss = loss(loss_kind, logits, eval_batch.y)
    predicted = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predicted == eval_batch.y.astype(np.int64)))
    return mean_loss, accuracy


def _batch_checkpoint(batch: Batch, with_labels: bool) -> Checkpoint:
    ckpt = Checkpoint()
    ckpt.add("x", ParamKind.FROZEN, batch.x)
    if with_labels:
        if batch.y is None:
            raise ValueError("batch has no labels")
        ckpt.add("y", ParamKind.FROZEN, batch.y.astype(np.uint32))
    return ckpt


def _checkpoint_batch(ckpt: Checkpoint) -> Batch:
    x = ckpt["x"].array
    y = ckpt["y"].array if "y" in ckpt else None
    return Batch(x, y)


def save_suite(suite: TaskSuite, directory) -> None:
    """Persist a suite as MTC1 containers plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_container(directory / "pretrained.mtc", suite.pretrained)
    task_records = []
    for task in suite.tasks:
        t = task.task_id
        files = {
            "finetuned": f"task{t}.finetuned.mtc",
            "train": f"task{t}.train.mtc",
            "eval": f"task{t}.eval.mtc",
            "exemplars": f"task{t}.exemplars.mtc",
        }
        write_container(directory / files["finetuned"], task.finetuned)
        write_container(directory / files["train"],
                        _batch_checkpoint(task.train, with_labels=True))
        write_container(directory / files["eval"],
                        _batch_checkpoint(task.eval, with_labels=True))
        write_container(directory / files["exemplars"],
                        _batch_checkpoint(task.exemplars, with_labels=False))
        task_records.append({"id": t, **files})
    manifest = {
        "format": "catmerge-suite",
        "version": 1,
        "seed": suite.config.seed,
        "config": suite.config.to_json_dict(),
        "model": suite.spec.to_json_dict(),
        "pretrained": "pretrained.mtc",
        "tasks": task_records,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_suite(directory) -> TaskSuite:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{directory} has no manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "catmerge-suite" or manifest.get("version") != 1:
        raise ValueError(f"{manifest_path}: not a version-1 suite manifest")
    spec = ModelSpec.from_json_dict(manifest["model"])
    cfg = SuiteConfig.from_json_dict(manifest["config"], model=spec)
    pretrained = read_container(directory / manifest["pretrained"])
    tasks = []
    for rec in manifest["tasks"]:
        tasks.append(
            TaskData(
                rec["id"],
                read_container(directory / rec["finetuned"]),
                _checkpoint_batch(read_container(directory / rec["train"])),
                _checkpoint_batch(read_container(directory / rec["eval"])),
                _checkpoint_batch(read_container(directory / rec["exemplars"])),
            )
        )
    return TaskSuite(cfg, spec, pretrained, tasks)


def suite_paths(directory) -> list[str]:
    """All files a suite consists of, manifest first (for digests)."""
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    paths = ["manifest.json", manifest["pretrained"]]
    for rec in manifest["tasks"]:
        paths.extend([rec["finetuned"], rec["train"], rec["eval"], rec["exemplars"]])
    return [os.path.join(os.fspath(directory), p) for p in paths]
