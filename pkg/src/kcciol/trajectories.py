"""Learning-trajectory samplers.

A learning trajectory is an ordered, labeled sample sequence split into an
adaptation part (x_tr/y_tr, length k) and a held-out part (x_val/y_val,
length s). Samples of one class/task are contiguous in the adaptation part.
Classification trajectories distinguish train mode (the adaptation classes
are a proper subset of the held-out classes) from eval mode (equal sets);
sine trajectories always use equal task sets.

Samplers are pure functions of (inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds
from .errors import UsageError

SINE_TASKS_PER_TRAJECTORY = 10
AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
Z_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SineTask:
    amplitude: float
    phase: float

    def targets(self, z: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(z + self.phase)


@dataclass(frozen=True)
class ClassificationDataset:
    """Isotropic Gaussian clusters standing in for an image class pool."""

    means: np.ndarray  # (C, d)
    samples: np.ndarray  # (C, n_per_class, d)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def n_per_class(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class LearningTrajectory:
    x_tr: np.ndarray
    y_tr: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    class_order: tuple[int, ...]  # classes in order of first appearance in x_tr
    tr_counts: tuple[int, ...]  # samples per class in x_tr, aligned with class_order
    val_class_order: tuple[int, ...]
    val_counts: tuple[int, ...]

    @property
    def k(self) -> int:
        return self.x_tr.shape[0]

    @property
    def s(self) -> int:
        return self.x_val.shape[0]


def sample_sine_taskset(count: int, seed) -> list[SineTask]:
    """`count` sine tasks with amplitude ~ U[0.1, 5] and phase ~ U[0, pi]."""
    if count < 1:
        raise UsageError("count must be >= 1")
    rng = seeds.rng(seed, "sine-tasks")
    amplitudes = rng.uniform(*AMPLITUDE_RANGE, size=count)
    phases = rng.uniform(*PHASE_RANGE, size=count)
    return [SineTask(float(a), float(p)) for a, p in zip(amplitudes, phases)]


def _sine_inputs(z: np.ndarray, slot: int) -> np.ndarray:
    """Input encoding [z, one-hot(task slot)] -> 11 dims."""
    x = np.zeros((z.size, 1 + SINE_TASKS_PER_TRAJECTORY))
    x[:, 0] = z
    x[:, 1 + slot] = 1.0
    return x


def sample_regression_trajectory(
    taskset: list[SineTask], seed, tr_per_fn: int = 1280, val_per_fn: int = 32
) -> LearningTrajectory:
    """Pick 10 tasks and sample a function-contiguous trajectory over them.

    Each sample is ([z, one-hot(n)], amplitude*sin(z + phase)) with z uniform
    on [-5, 5]; slot n is the task's position within the trajectory.
    """
    if len(taskset) < SINE_TASKS_PER_TRAJECTORY:
        raise UsageError(f"need at least {SINE_TASKS_PER_TRAJECTORY} tasks, got {len(taskset)}")
    rng = seeds.rng(seed, "regression-trajectory")
    chosen = rng.choice(len(taskset), size=SINE_TASKS_PER_TRAJECTORY, replace=False)
    x_tr, y_tr, x_val, y_val = [], [], [], []
    for slot, task_id in enumerate(chosen):
        task = taskset[task_id]
        z_tr = rng.uniform(*Z_RANGE, size=tr_per_fn)
        z_val = rng.uniform(*Z_RANGE, size=val_per_fn)
        x_tr.append(_sine_inputs(z_tr, slot))
        y_tr.append(task.targets(z_tr)[:, None])
        x_val.append(_sine_inputs(z_val, slot))
        y_val.append(task.targets(z_val)[:, None])
    slots = tuple(range(SINE_TASKS_PER_TRAJECTORY))
    return LearningTrajectory(
        x_tr=np.concatenate(x_tr),
        y_tr=np.concatenate(y_tr),
        x_val=np.concatenate(x_val),
        y_val=np.concatenate(y_val),
        class_order=slots,
        tr_counts=(tr_per_fn,) * SINE_TASKS_PER_TRAJECTORY,
        val_class_order=slots,
        val_counts=(val_per_fn,) * SINE_TASKS_PER_TRAJECTORY,
    )


def gen_synthetic_classes(n_classes: int, dim: int, n_per_class: int, sigma: float, seed) -> ClassificationDataset:
    """Gaussian clusters: means uniform in [-1, 1]^dim, isotropic spread sigma."""
    if n_classes < 2:
        raise UsageError("need at least 2 classes")
    if dim < 1:
        raise UsageError("dimension must be >= 1")
    rng = seeds.rng(seed, "synthetic-classes")
    means = rng.uniform(-1.0, 1.0, size=(n_classes, dim))
    noise = rng.normal(0.0, 1.0, size=(n_classes, n_per_class, dim))
    return ClassificationDataset(means=means, samples=means[:, None, :] + sigma * noise)


def sample_classification_trajectory(
    dataset: ClassificationDataset,
    mode: str,
    tr_classes: int,
    extra_val_classes: int,
    per_class_tr: int,
    per_class_val: int,
    seed,
) -> LearningTrajectory:
    """Class-contiguous trajectory with trajectory-local labels.

    Train mode adds `extra_val_classes` unseen classes to the held-out part
    (proper subset); eval mode uses exactly the adaptation classes. Local
    labels are assigned in order of first appearance, so the head dimension
    equals the trajectory's class count regardless of global class ids.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and extra_val_classes < 1:
        raise UsageError("train mode needs at least one extra held-out class")
    if mode == "eval":
        extra_val_classes = 0
    total_classes = tr_classes + extra_val_classes
    if total_classes > dataset.n_classes:
        raise UsageError(f"trajectory needs {total_classes} classes, dataset has {dataset.n_classes}")
    if per_class_tr + per_class_val > dataset.n_per_class:
        raise UsageError("not enough samples per class for disjoint tr/val splits")

    rng = seeds.rng(seed, "classification-trajectory")
    chosen = rng.choice(dataset.n_classes, size=total_classes, replace=False)
    tr_globals = chosen[:tr_classes]
    x_tr, y_tr, x_val, y_val = [], [], [], []
    for local, cls in enumerate(chosen):
        picks = rng.choice(dataset.n_per_class, size=per_class_tr + per_class_val, replace=False)
        samples = dataset.samples[cls]
        if local < tr_classes:
            x_tr.append(samples[picks[:per_class_tr]])
            y_tr.append(np.full(per_class_tr, local))
        x_val.append(samples[picks[per_class_tr:]])
        y_val.append(np.full(per_class_val, local))
    return LearningTrajectory(
        x_tr=np.concatenate(x_tr),
        y_tr=np.concatenate(y_tr),
        x_val=np.concatenate(x_val),
        y_val=np.concatenate(y_val),
        class_order=tuple(range(tr_classes)),
        tr_counts=(per_class_tr,) * tr_classes,
        val_class_order=tuple(range(total_classes)),
        val_counts=(per_class_val,) * total_classes,
    )


def export_trajectory(trajectory: LearningTrajectory, path) -> None:
    """Line-oriented text dump: header with k, s, class order; then one
    comma-separated sample per line (features..., label)."""
    order = ",".join(str(c) for c in trajectory.class_order)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# k={trajectory.k} s={trajectory.s} class_order={order}\n")
        for x, y in ((trajectory.x_tr, trajectory.y_tr), (trajectory.x_val, trajectory.y_val)):
            for row, label in zip(x, y):
                feats = ",".join(repr(float(v)) for v in row)
                lab = float(label) if np.ndim(label) == 0 else float(np.asarray(label).ravel()[0])
                fh.write(f"{feats},{lab!r}\n")
