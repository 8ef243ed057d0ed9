"""Class-incremental online evaluation protocol and the masking-level sweep.

Per trajectory: freeze the representation, draw a fresh random head, run
plain SGD over the adaptation samples exactly once and in order (per-sample
for classification, batch-online for regression), then score on the
held-out samples. No tape is needed: the updates are first-order, so the
head gradient is computed by a hand-rolled backward pass over the head
layers only (kept numerically identical to the taped path; the tests
compare them).

Trajectories are independent given their derived seeds; `KCCIOL_THREADS`
caps the worker pool and results are identical at any parallelism level.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backend, seeds
from .config import ExperimentConfig, eval_taskset, training_sampler
from .errors import UsageError
from .metalearner import Mask, continue_phase3, train_full
from .models import ModelSpec, ParameterStore, build_model, forward_range, layout_for, load_checkpoint, replace_head
from .trajectories import LearningTrajectory, sample_classification_trajectory, sample_regression_trajectory

BASELINE_KINDS = ("scratch", "pretrained", "kcciol")


@dataclass(frozen=True)
class MetricsRecord:
    trajectory_id: int
    count: int  # classes or tasks seen so far
    metric: float  # accuracy (classification) or MSE (regression)
    seed: int
    source: str  # which parameters produced it (phase3 / scratch / ...)


@dataclass
class EvalReport:
    records: list[MetricsRecord]
    protocol: dict
    summary: dict[int, tuple[float, float]]  # count -> (mean, std)

    @classmethod
    def build(cls, records, protocol) -> "EvalReport":
        return cls(records=records, protocol=protocol, summary=cls.recompute_summary(records))

    @staticmethod
    def recompute_summary(records) -> dict[int, tuple[float, float]]:
        by_count: dict[int, list[float]] = {}
        for rec in records:
            by_count.setdefault(rec.count, []).append(rec.metric)
        return {
            count: (float(np.mean(vals)), float(np.std(vals)))
            for count, vals in sorted(by_count.items())
        }

    def final_mean(self) -> float:
        """Mean metric at the largest class/task count."""
        return self.summary[max(self.summary)][0]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if "config_hash" in self.protocol:
                fh.write(f"# config_hash={self.protocol['config_hash']}\n")
            fh.write("trajectory_id,count,metric,seed\n")
            for rec in self.records:
                fh.write(f"{rec.trajectory_id},{rec.count},{rec.metric!r},{rec.seed}\n")

    def write_summary(self, path) -> None:
        doc = {
            "protocol": self.protocol,
            "summary": {str(c): {"mean": m, "std": s} for c, (m, s) in self.summary.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- head-only online SGD (first order, no tape) ------------------------------


def _head_blocks(spec: ModelSpec):
    """(offset-into-head-vector, shape) pairs for the head layers."""
    layout = layout_for(spec)
    theta_end = layout[2 * spec.split_index - 1].offset + layout[2 * spec.split_index - 1].size
    return [(b.offset - theta_end, b.shape) for b in layout[2 * spec.split_index :]]


def _head_forward_cached(spec, head_vec, h):
    """Forward through the head; returns output and per-layer input cache."""
    blocks = _head_blocks(spec)
    cache = []
    n_head_layers = len(blocks) // 2
    for i in range(n_head_layers):
        w_off, w_shape = blocks[2 * i]
        b_off, b_shape = blocks[2 * i + 1]
        w = head_vec[w_off : w_off + w_shape[0] * w_shape[1]].reshape(w_shape)
        b = head_vec[b_off : b_off + b_shape[0]]
        cache.append(h)
        z = h @ w + b
        h = z if i == n_head_layers - 1 else backend.relu(z)
    return h, cache


def _head_gradient(spec, head_vec, h_in, targets, loss_kind):
    """Flat head gradient of the batch loss; matches the taped losses."""
    pred, cache = _head_forward_cached(spec, head_vec, h_in)
    if loss_kind == "mse":
        delta = (2.0 / pred.size) * (pred - targets)
    else:
        shifted = pred - np.max(pred, axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / np.sum(expz, axis=1, keepdims=True)
        onehot = np.zeros_like(probs)
        onehot[np.arange(pred.shape[0]), targets.astype(int)] = 1.0
        delta = (probs - onehot) / pred.shape[0]
    blocks = _head_blocks(spec)
    grad = np.zeros_like(head_vec)
    n_head_layers = len(blocks) // 2
    for i in range(n_head_layers - 1, -1, -1):
        w_off, w_shape = blocks[2 * i]
        b_off, b_shape = blocks[2 * i + 1]
        w = head_vec[w_off : w_off + w_shape[0] * w_shape[1]].reshape(w_shape)
        h = cache[i]
        grad[w_off : w_off + w.size] = (h.T @ delta).ravel()
        grad[b_off : b_off + b_shape[0]] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * backend.relu_mask(cache[i])
    return grad


def adapt_head_online(spec, head_vec, rep_tr, y_tr, alpha, batch_bounds, loss_kind):
    """Run the online updates over precomputed representations.

    `batch_bounds` is the ordered list of (start, stop) index pairs; each
    sample is consumed exactly once. Returns the adapted flat head vector.
    """
    head = np.array(head_vec, dtype=np.float64)
    for start, stop in batch_bounds:
        grad = _head_gradient(spec, head, rep_tr[start:stop], y_tr[start:stop], loss_kind)
        head = backend.axpy(head, -alpha, grad)
    return head


def _class_batch_bounds(counts, batch):
    """Batches in class order that never straddle a class boundary."""
    bounds = []
    offset = 0
    for count in counts:
        for start in range(0, count, batch):
            bounds.append((offset + start, offset + min(start + batch, count)))
        offset += count
    return bounds


def run_regression_trajectory(
    spec: ModelSpec,
    store: ParameterStore,
    trajectory: LearningTrajectory,
    alpha: float,
    inner_batch: int,
    head_seed,
) -> list[tuple[int, float]]:
    """Adapt a fresh head over one 10-task trajectory; cumulative MSE per task count.

    After finishing task t's samples the MSE is measured on the held-out
    samples of tasks 1..t.
    """
    head_spec, head_store = replace_head(spec, store, spec.output_dim, head_seed)
    rep_tr = forward_range(spec, store.values, trajectory.x_tr, 0, spec.split_index)
    rep_val = forward_range(spec, store.values, trajectory.x_val, 0, spec.split_index)
    head = np.array(head_store.head)
    results = []
    tr_offset = 0
    val_seen = 0
    for t, (tr_count, val_count) in enumerate(zip(trajectory.tr_counts, trajectory.val_counts), start=1):
        bounds = [(tr_offset + s, tr_offset + min(s + inner_batch, tr_count)) for s in range(0, tr_count, inner_batch)]
        head = adapt_head_online(head_spec, head, rep_tr, trajectory.y_tr, alpha, bounds, "mse")
        tr_offset += tr_count
        val_seen += val_count
        pred, _ = _head_forward_cached(head_spec, head, rep_val[:val_seen])
        err = pred - trajectory.y_val[:val_seen]
        results.append((t, float(np.mean(err * err))))
    return results


def run_classification_trajectory(
    spec: ModelSpec,
    store: ParameterStore,
    trajectory: LearningTrajectory,
    alpha: float,
    head_seed,
    head_store: ParameterStore | None = None,
) -> tuple[int, float]:
    """Per-sample online SGD on a fresh head; argmax accuracy on the held-out part."""
    n_classes = len(trajectory.val_class_order)
    if head_store is None:
        head_spec, head_store = replace_head(spec, store, n_classes, head_seed)
    else:
        head_spec = head_store.spec
    rep_tr = forward_range(spec, store.values, trajectory.x_tr, 0, spec.split_index)
    rep_val = forward_range(spec, store.values, trajectory.x_val, 0, spec.split_index)
    bounds = _class_batch_bounds(trajectory.tr_counts, 1)
    head = adapt_head_online(head_spec, np.array(head_store.head), rep_tr, trajectory.y_tr, alpha, bounds, "xent")
    logits, _ = _head_forward_cached(head_spec, head, rep_val)
    predicted = np.argmax(logits, axis=1)  # lowest index wins ties
    accuracy = float(np.mean(predicted == trajectory.y_val))
    return n_classes, accuracy


# -- report-level protocols ----------------------------------------------------


def _n_threads() -> int:
    raw = os.environ.get("KCCIOL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"KCCIOL_THREADS must be an integer, got {raw!r}") from None


def _run_parallel(worker, n_jobs):
    threads = _n_threads()
    if threads == 1:
        return [worker(i) for i in range(n_jobs)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, range(n_jobs)))


def evaluate_regression(
    spec: ModelSpec,
    store: ParameterStore,
    taskset,
    alpha: float,
    inner_batch: int,
    n_runs: int,
    seed,
    tr_per_fn: int = 1280,
    val_per_fn: int = 32,
    source: str = "checkpoint",
) -> EvalReport:
    """Table-style regression protocol: n_runs 10-task trajectories."""
    seed = int(seed)
    theta_before = store.theta.copy()

    def worker(run: int):
        trajectory = sample_regression_trajectory(taskset, seeds.derive(seed, "run", run), tr_per_fn, val_per_fn)
        scores = run_regression_trajectory(spec, store, trajectory, alpha, inner_batch, seeds.derive(seed, "run", run, "head"))
        return [MetricsRecord(run, t, mse, seed, source) for t, mse in scores]

    groups = _run_parallel(worker, n_runs)
    if not np.array_equal(store.theta, theta_before):
        raise UsageError("representation parameters changed during evaluation")
    records = [rec for group in groups for rec in group]
    protocol = {
        "kind": "sine-regression",
        "alpha": alpha,
        "inner_batch": inner_batch,
        "runs": n_runs,
        "seed": seed,
        "tr_per_fn": tr_per_fn,
        "val_per_fn": val_per_fn,
        "source": source,
    }
    return EvalReport.build(records, protocol)


def evaluate_classification(
    spec: ModelSpec,
    store: ParameterStore,
    dataset,
    alpha: float,
    n_trajectories: int,
    seed,
    eval_classes: int,
    per_class_tr: int,
    per_class_val: int,
    source: str = "checkpoint",
) -> EvalReport:
    """Class-incremental protocol on eval-mode trajectories (equal class sets)."""
    seed = int(seed)
    theta_before = store.theta.copy()

    def worker(run: int):
        trajectory = sample_classification_trajectory(
            dataset, "eval", eval_classes, 0, per_class_tr, per_class_val, seeds.derive(seed, "run", run)
        )
        count, accuracy = run_classification_trajectory(
            spec, store, trajectory, alpha, seeds.derive(seed, "run", run, "head")
        )
        return MetricsRecord(run, count, accuracy, seed, source)

    records = _run_parallel(worker, n_trajectories)
    if not np.array_equal(store.theta, theta_before):
        raise UsageError("representation parameters changed during evaluation")
    protocol = {
        "kind": "synthetic-classification",
        "alpha": alpha,
        "runs": n_trajectories,
        "seed": seed,
        "classes": eval_classes,
        "per_class_tr": per_class_tr,
        "per_class_val": per_class_val,
        "source": source,
    }
    return EvalReport.build(records, protocol)


def evaluate_with_config(config: ExperimentConfig, store: ParameterStore, seed=None, source: str = "checkpoint") -> EvalReport:
    """Run the configured evaluation protocol against a parameter store."""
    eval_seed = config.seed if seed is None else seed
    pool = eval_taskset(config)
    if config.kind == "sine-regression":
        report = evaluate_regression(
            config.model_spec,
            store,
            pool,
            config.eval_learning_rate,
            config.phases[2].inner_batch,
            config.eval_runs,
            seeds.derive(eval_seed, "evaluation").generate_state(1)[0],
            config.eval_tr_per_fn,
            config.eval_val_per_fn,
            source,
        )
    else:
        report = evaluate_classification(
            config.model_spec,
            store,
            pool,
            config.eval_learning_rate,
            config.eval_runs,
            seeds.derive(eval_seed, "evaluation").generate_state(1)[0],
            config.eval_classes,
            config.per_class_tr,
            config.per_class_val,
            source,
        )
    report.protocol["config_hash"] = config.config_hash
    return report


def run_baseline(kind: str, config: ExperimentConfig, store: ParameterStore | None = None, seed=None) -> EvalReport:
    """Scratch (random store), pretrained (plain phase-1 parameters), or the
    consolidated checkpoint, all under the identical protocol."""
    if kind not in BASELINE_KINDS:
        raise UsageError(f"baseline kind must be one of {BASELINE_KINDS}, got {kind!r}")
    if kind == "scratch":
        store = build_model(config.model_spec, seeds.derive(config.seed, "scratch-model"))
    elif store is None:
        raise UsageError(f"the {kind} baseline needs a checkpoint store")
    return evaluate_with_config(config, store, seed=seed, source=kind)


# -- masking-level sweep -------------------------------------------------------


def _train_inputs_hash(config: ExperimentConfig, upto_phase: int, delta: float | None = None) -> str:
    """Hash of everything that determines training results up to a phase."""
    fields = (
        config.kind,
        config.seed,
        dataclasses.astuple(config.model_spec),
        tuple(dataclasses.astuple(p) for p in config.phases[:upto_phase]),
        config.train_tasks,
        config.tr_per_fn,
        config.val_per_fn,
        config.class_count,
        config.class_dim,
        config.class_per_class,
        config.class_sigma,
        config.tr_classes,
        config.extra_val_classes,
        config.per_class_tr,
        config.per_class_val,
        delta,
    )
    return hashlib.sha256(repr(fields).encode()).hexdigest()[:16]


def _load_cached_store(path, expected_hash):
    meta_path = path + ".meta.json"
    if not (os.path.exists(path) and os.path.exists(meta_path)):
        return None
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("train_inputs_hash") != expected_hash:
        return None
    _, store, _ = load_checkpoint(path)
    return store


def _store_cache_meta(path, train_hash, config) -> None:
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"train_inputs_hash": train_hash, "config_hash": config.config_hash, "seed": config.seed}, fh)
        fh.write("\n")


def phases12_cached(config: ExperimentConfig, cache_dir=None) -> tuple[ParameterStore, ParameterStore]:
    """Phase-1 and phase-2 stores for a config, reusing on-disk checkpoints
    when their recorded training inputs match."""
    from .models import save_checkpoint

    hashes = [_train_inputs_hash(config, upto_phase=p) for p in (1, 2)]
    paths = None
    if cache_dir is not None:
        paths = [os.path.join(cache_dir, f"seed{config.seed}", f"phase{p}.kcml") for p in (1, 2)]
        cached = [_load_cached_store(path, h) for path, h in zip(paths, hashes)]
        if all(c is not None for c in cached):
            return cached[0], cached[1]
    result = train_full(config, out_dir=None, stop_after_phase=2)
    stores = (result.stores[1], result.stores[2])
    if paths is not None:
        os.makedirs(os.path.dirname(paths[0]), exist_ok=True)
        for path, store, train_hash in zip(paths, stores, hashes):
            save_checkpoint(path, store.spec, store)
            _store_cache_meta(path, train_hash, config)
    return stores


def phase2_store_cached(config: ExperimentConfig, cache_dir=None) -> ParameterStore:
    """Phases 1-2 for a config; see phases12_cached."""
    return phases12_cached(config, cache_dir)[1]


def phase3_store_cached(config: ExperimentConfig, phase2_store: ParameterStore, delta: float, cache_dir=None):
    from .models import save_checkpoint

    train_hash = _train_inputs_hash(config, upto_phase=3, delta=delta)
    path = None
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"seed{config.seed}", f"delta{delta:g}", "phase3.kcml")
        cached = _load_cached_store(path, train_hash)
        if cached is not None:
            return cached
    store, _mask = continue_phase3(config, phase2_store, delta)
    if path is not None:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_checkpoint(path, store.spec, store, _mask.bits)
        _store_cache_meta(path, train_hash, config)
    return store


def mask_sweep(config: ExperimentConfig, delta_list, seed_list, cache_dir=None) -> dict:
    """Train/evaluate per importance fraction, phases 1-2 shared per seed.

    Returns {"metric", "rows": [(delta, mean, std)], "per_seed": {delta: [...]}}.
    The per-seed evaluation uses the same derived evaluation seed for every
    delta, so comparisons across deltas are paired.
    """
    for delta in delta_list:
        if not 0.0 <= delta <= 1.0:
            raise UsageError(f"delta {delta} outside [0, 1]")
    per_seed: dict[float, list[float]] = {float(d): [] for d in delta_list}
    for seed in seed_list:
        cfg = dataclasses.replace(config, seed=int(seed))
        phase2 = phase2_store_cached(cfg, cache_dir)
        for delta in delta_list:
            store3 = phase3_store_cached(cfg, phase2, float(delta), cache_dir)
            report = evaluate_with_config(cfg, store3, source=f"sweep-delta{delta:g}")
            per_seed[float(delta)].append(report.final_mean())
    rows = [
        (delta, float(np.mean(vals)), float(np.std(vals)))
        for delta, vals in per_seed.items()
    ]
    metric = "mse" if config.kind == "sine-regression" else "accuracy"
    return {"metric": metric, "rows": rows, "per_seed": per_seed, "seeds": [int(s) for s in seed_list]}
