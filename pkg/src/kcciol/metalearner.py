"""Meta-training engine with knowledge consolidation.

One outer step: unroll sequential SGD on the head over the adaptation
samples (taped, so gradients flow through the whole unroll into the
representation), measure the loss of the adapted model on the held-out
samples, add the active penalties, and take one Adam step on all
parameters. Three phases chain these steps:

1. plain meta-training (no penalties),
2. l1 squeeze (gamma > 0) that pushes knowledge into few parameters,
3. constrained training (lambda > 0) that protects the important
   parameters, identified by magnitude percentile, while the rest adapt
   freely.

The constraint penalty is ``sum((mask * d(l_meta)/d(params))^2)``, which
needs the gradient itself to stay differentiable; see tape.Tape.gradient.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import seeds
from .errors import NumericError, UsageError
from .models import (
    ModelSpec,
    ParameterStore,
    TapedParams,
    build_model,
    grad_flat,
    save_checkpoint,
    taped_forward_range,
)
from .optim import AdamState, adam_step
from .tape import Node, Tape


@dataclass(frozen=True)
class PhaseConfig:
    """Per-phase hyperparameters of the training schedule."""

    alpha: float  # inner-loop learning rate
    beta: float  # outer-loop learning rate
    lam: float = 0.0  # constraint-penalty coefficient
    gamma: float = 0.0  # l1 coefficient
    steps: int = 0  # outer iterations
    inner_batch: int = 1  # samples per inner update

    def __post_init__(self):
        for name in ("alpha", "beta", "lam", "gamma"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.steps < 0:
            raise UsageError("steps must be >= 0")
        if self.inner_batch < 1:
            raise UsageError("inner_batch must be >= 1")


class Mask:
    """Binary importance marker aligned with a flat parameter vector."""

    def __init__(self, bits: np.ndarray, delta: float, threshold: float):
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        bits.flags.writeable = False
        self.bits = bits
        self.delta = float(delta)
        self.threshold = float(threshold)

    @property
    def population(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return self.bits.size


def get_mask(values, delta: float) -> Mask:
    """Mark the ceil(delta * n) largest-magnitude parameters as important.

    Ties break toward the lower flat index. The threshold reported is the
    smallest magnitude inside the important set (inf when it is empty).
    """
    if not 0.0 <= delta <= 1.0:
        raise UsageError(f"delta must be in [0, 1], got {delta}")
    values = values.values if isinstance(values, ParameterStore) else np.asarray(values)
    n = values.size
    count = math.ceil(delta * n)
    bits = np.zeros(n, dtype=np.uint8)
    if count > 0:
        order = np.argsort(-np.abs(values), kind="stable")
        keep = order[:count]
        bits[keep] = 1
        threshold = float(np.abs(values[keep[-1]]))
    else:
        threshold = float("inf")
    return Mask(bits, delta, threshold)


# -- loss terms ---------------------------------------------------------------


def mse_loss(tape: Tape, pred: Node, targets: np.ndarray) -> Node:
    """Mean over all entries of the squared prediction error."""
    diff = tape.add(pred, tape.const(-np.asarray(targets, dtype=np.float64)))
    return tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / diff.value.size)


def softmax_xent_loss(tape: Tape, logits: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy of raw logits against integer labels.

    The max-shift used for numerical stability is detached, which leaves
    the gradient exact.
    """
    n, n_classes = logits.value.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise UsageError(f"expected {n} labels, got shape {labels.shape}")
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels.astype(int)] = 1.0
    shift = tape.const(-np.max(logits.value, axis=1, keepdims=True))
    z = tape.add(logits, shift)
    lse = tape.add(tape.log(tape.sum(tape.exp(z), axis=1, keepdims=True)), tape.neg(shift))
    picked = tape.sum(tape.mul(logits, tape.const(onehot)), axis=1, keepdims=True)
    return tape.scale(tape.sum(tape.add(lse, tape.neg(picked))), 1.0 / n)


def batch_loss(tape: Tape, pred: Node, targets: np.ndarray, loss_kind: str) -> Node:
    if loss_kind == "mse":
        return mse_loss(tape, pred, targets)
    if loss_kind == "xent":
        return softmax_xent_loss(tape, pred, targets)
    raise UsageError(f"unknown loss kind {loss_kind!r}")


def l1_penalty(tape_or_values, params: TapedParams | None = None):
    """Sum of absolute parameter values over the entire store.

    Taped form: ``l1_penalty(tape, taped_params) -> Node`` (the gradient
    uses sign, with the subgradient at 0 taken as 0). Plain form:
    ``l1_penalty(values) -> float``.
    """
    if params is None:
        values = tape_or_values.values if isinstance(tape_or_values, ParameterStore) else tape_or_values
        return float(np.sum(np.abs(values)))
    tape = tape_or_values
    return tape.sum(tape.abs(params.flat()))


def constraint_loss(tape_or_mask, mask_or_grad, grad_node: Node | None = None):
    """Squared norm of the masked gradient, ``sum((mask * g)^2)``.

    Taped form: ``constraint_loss(tape, mask, g_node) -> Node`` where
    g_node is the flat gradient of the meta loss; the result stays
    differentiable with respect to the parameters (double backward).
    Plain form: ``constraint_loss(mask, g) -> float``.
    """
    if grad_node is None:
        mask, grad = tape_or_mask, mask_or_grad
        grad = np.asarray(grad)
        if grad.shape != (len(mask),):
            raise UsageError(f"gradient length {grad.shape} does not match mask length {len(mask)}")
        masked = mask.bits * grad
        return float(np.dot(masked, masked))
    tape, mask = tape_or_mask, mask_or_grad
    if grad_node.value.shape != (len(mask),):
        raise UsageError(f"gradient length {grad_node.value.shape} does not match mask length {len(mask)}")
    masked = tape.mul(grad_node, tape.const(mask.bits.astype(np.float64)))
    return tape.sum(tape.mul(masked, masked))


# -- inner / outer loop -------------------------------------------------------


def inner_loop(
    tape: Tape,
    params: TapedParams,
    x_tr: np.ndarray,
    y_tr: np.ndarray,
    alpha: float,
    inner_batch: int,
    loss_kind: str,
) -> list[Node]:
    """Sequential SGD on the head blocks over x_tr, taped end to end.

    Batches are consumed in order and every sample is used exactly once;
    representation blocks are read but never written. Returns the adapted
    head blocks (W_k), differentiable w.r.t. both the representation and
    the initial head.
    """
    spec = params.spec
    head = list(params.head_blocks)
    k = x_tr.shape[0]
    if k != y_tr.shape[0]:
        raise UsageError("x_tr and y_tr length mismatch")
    if k == 0:
        return head
    # One batched representation forward; row-slice gradients are cheap and
    # this turns 6 small GEMMs per batch into 6 large ones. The per-batch
    # fallback keeps memory linear for very long trajectories (each row
    # slice's adjoint materializes a full-size zero-padded matrix).
    batched_rep = k <= 2048
    rep_all = None
    if batched_rep:
        rep_all = taped_forward_range(tape, spec, params.blocks, tape.const(x_tr), 0, spec.split_index)
    for start in range(0, k, inner_batch):
        stop = min(start + inner_batch, k)
        if batched_rep:
            hb = tape.rows(rep_all, start, stop)
        else:
            hb = taped_forward_range(tape, spec, params.blocks, tape.const(x_tr[start:stop]), 0, spec.split_index)
        yb = y_tr[start:stop]
        blocks = params.theta_blocks + head
        pred = taped_forward_range(tape, spec, blocks, hb, spec.split_index, spec.n_layers)
        loss = batch_loss(tape, pred, yb, loss_kind)
        grads = tape.gradient(loss, head)
        head = [tape.axpy(w, -alpha, g) for w, g in zip(head, grads)]
    return head


def meta_loss(
    tape: Tape, params: TapedParams, head: list[Node], x_val: np.ndarray, y_val: np.ndarray, loss_kind: str
) -> Node:
    """Loss of the adapted model on the held-out part of the trajectory."""
    if x_val.shape[0] == 0:
        raise UsageError("validation part of the trajectory is empty")
    spec = params.spec
    blocks = params.theta_blocks + list(head)
    pred = taped_forward_range(tape, spec, blocks, tape.const(x_val), 0, spec.n_layers)
    return batch_loss(tape, pred, y_val, loss_kind)


@dataclass(frozen=True)
class LossBreakdown:
    l_meta: float
    l_constraint: float
    l_1: float
    total: float


def outer_step(
    store: ParameterStore,
    adam_state: AdamState,
    trajectory,
    mask: Mask | None,
    phase: PhaseConfig,
    loss_kind: str,
    first_order: bool = False,
) -> tuple[ParameterStore, AdamState, LossBreakdown]:
    """One meta-update of the full store; pure in all inputs.

    total = l_meta + lam * l_constraint + gamma * l_1, followed by a single
    Adam step at rate phase.beta. With `first_order`, the gradient inside
    the constraint treats the adapted head as initial-head-plus-constant
    (straight-through), which skips the second differentiation through the
    unroll; the l_meta term itself always uses the full unrolled gradient.
    """
    if phase.lam > 0 and mask is None:
        raise UsageError("a mask is required when the constraint coefficient is positive")
    tape = Tape()
    try:
        params = TapedParams(tape, store)
        head_k = inner_loop(tape, params, trajectory.x_tr, trajectory.y_tr, phase.alpha, phase.inner_batch, loss_kind)
        l_meta = meta_loss(tape, params, head_k, trajectory.x_val, trajectory.y_val, loss_kind)
        total = l_meta
        l_con_value = 0.0
        l1_value = 0.0
        if phase.lam > 0 and mask.population > 0:
            if first_order:
                w0 = params.head_blocks
                head_for_grad = [tape.add(w, tape.const(hk.value - w.value)) for w, hk in zip(w0, head_k)]
                l_meta_inner = meta_loss(tape, params, head_for_grad, trajectory.x_val, trajectory.y_val, loss_kind)
            else:
                l_meta_inner = l_meta
            g_meta = grad_flat(tape, l_meta_inner, params)
            l_con = constraint_loss(tape, mask, g_meta)
            l_con_value = l_con.item()
            total = tape.add(total, tape.scale(l_con, phase.lam))
        if phase.gamma > 0:
            l1 = l1_penalty(tape, params)
            l1_value = l1.item()
            total = tape.add(total, tape.scale(l1, phase.gamma))
        tape.assert_finite(total)
        breakdown = LossBreakdown(l_meta.item(), l_con_value, l1_value, total.item())
        g_total = grad_flat(tape, total, params)
        tape.assert_finite(g_total)
        new_state, new_values = adam_step(adam_state, store.values, g_total.value, phase.beta)
    finally:
        tape.nodes.clear()  # break node<->tape reference cycle promptly
    return store.with_values(new_values), new_state, breakdown


def kcciol(
    sample_trajectory,
    mask: Mask | None,
    store: ParameterStore,
    phase: PhaseConfig,
    seed,
    loss_kind: str,
    first_order: bool = False,
    log=None,
) -> tuple[ParameterStore, list[tuple]]:
    """Run `phase.steps` outer steps with a fresh trajectory per step.

    `sample_trajectory` is called with a per-step derived SeedSequence.
    Optimizer state starts fresh (each phase re-enters with its own rates).
    Returns the trained store and the per-step loss records
    (step, l_meta, l_constraint, l_1, total); `log` receives formatted
    lines when given.
    """
    state = AdamState.initial(store.n_params)
    records = []
    for step in range(phase.steps):
        trajectory = sample_trajectory(seeds.derive(seed, "step", step))
        try:
            store, state, losses = outer_step(store, state, trajectory, mask, phase, loss_kind, first_order)
        except NumericError as exc:
            raise NumericError(f"outer step {step}: {exc}") from exc
        records.append((step, losses.l_meta, losses.l_constraint, losses.l_1, losses.total))
        if log is not None:
            log.write(f"{step}, {losses.l_meta!r}, {losses.l_constraint!r}, {losses.l_1!r}, {losses.total!r}\n")
    return store, records


def _phase_for(config, index: int) -> PhaseConfig:
    phase = config.phases[index - 1]
    if index in (1, 3) and phase.gamma != 0:
        raise UsageError(f"phase {index} must have gamma = 0")
    if index in (1, 2) and phase.lam != 0:
        raise UsageError(f"phase {index} must have lambda = 0")
    return phase


@dataclass
class TrainResult:
    stores: dict[int, ParameterStore]  # phase -> checkpointed store
    mask: Mask | None
    records: dict[int, list[tuple]]  # phase -> loss records


def _checkpoint_path(out_dir, phase: int) -> str:
    return os.path.join(out_dir, f"phase{phase}.kcml")


def _write_phase_artifacts(config, out_dir, phase: int, store, mask, records) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = _checkpoint_path(out_dir, phase)
    save_checkpoint(path, store.spec, store, mask.bits if mask is not None else None)
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"config_hash": config.config_hash, "seed": config.seed, "phase": phase}, fh)
        fh.write("\n")
    log_path = os.path.join(out_dir, f"phase{phase}_loss.log")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config.config_hash}\n")
        fh.write("# step, l_meta, l_constraint, l_1, total\n")
        for row in records:
            fh.write(f"{row[0]}, {row[1]!r}, {row[2]!r}, {row[3]!r}, {row[4]!r}\n")


def train_full(config, out_dir=None, stop_after_phase: int = 3, first_order: bool = False) -> TrainResult:
    """Run the three-phase schedule: plain meta-training, l1 squeeze, then
    mask computation and constrained training.

    Writes a checkpoint (plus loss log) per phase when `out_dir` is given.
    The mask is computed from the post-phase-2 parameters with the
    configured importance fraction.
    """
    from .config import training_sampler  # local import; config depends on this module

    spec = config.model_spec
    store = build_model(spec, seeds.derive(config.seed, "model"))
    sampler = training_sampler(config)
    result = TrainResult(stores={}, mask=None, records={})
    mask = None
    for phase_idx in range(1, stop_after_phase + 1):
        phase = _phase_for(config, phase_idx)
        if phase_idx == 3:
            mask = get_mask(store.values, config.delta)
            result.mask = mask
        store, records = kcciol(
            sampler,
            mask if phase_idx == 3 else None,
            store,
            phase,
            seeds.derive(config.seed, "phase", phase_idx),
            config.loss_kind,
            first_order=first_order,
        )
        result.stores[phase_idx] = store
        result.records[phase_idx] = records
        if out_dir is not None:
            _write_phase_artifacts(config, out_dir, phase_idx, store, mask if phase_idx == 3 else None, records)
    return result


def continue_phase3(
    config, phase2_store: ParameterStore, delta: float, out_dir=None, first_order: bool = False
) -> tuple[ParameterStore, Mask]:
    """Phase 3 alone from a phase-2 checkpoint with an explicit importance
    fraction; used by the masking-level sweep to share phases 1-2."""
    from .config import training_sampler

    phase = _phase_for(config, 3)
    mask = get_mask(phase2_store.values, delta)
    store, records = kcciol(
        training_sampler(config),
        mask,
        phase2_store,
        phase,
        seeds.derive(config.seed, "phase", 3),
        config.loss_kind,
        first_order=first_order,
    )
    if out_dir is not None:
        _write_phase_artifacts(config, out_dir, 3, store, mask, records)
    return store, mask
