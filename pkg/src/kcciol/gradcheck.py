"""Finite-difference validation of the full training objective gradient.

Builds tiny nets, unrolls k inner steps, assembles
``l_meta + lam * l_constraint + gamma * l_1`` exactly as the outer step
does, and compares the taped gradient against central differences. This is
the end-to-end check that the nested differentiation (gradient of a
function of a gradient) is correct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds
from .errors import UsageError
from .metalearner import Mask, constraint_loss, get_mask, inner_loop, l1_penalty, meta_loss
from .models import ModelSpec, ParameterStore, TapedParams, build_model, grad_flat
from .tape import Tape, finite_diff_grad
from .trajectories import LearningTrajectory


@dataclass(frozen=True)
class GradcheckCase:
    name: str
    k_inner: int
    lam: float
    gamma: float
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _total_objective(tape, params, trajectory, alpha, inner_batch, lam, gamma, mask, loss_kind):
    head_k = inner_loop(tape, params, trajectory.x_tr, trajectory.y_tr, alpha, inner_batch, loss_kind)
    total = meta_loss(tape, params, head_k, trajectory.x_val, trajectory.y_val, loss_kind)
    if lam > 0:
        g_meta = grad_flat(tape, total, params)
        total = tape.add(total, tape.scale(constraint_loss(tape, mask, g_meta), lam))
    if gamma > 0:
        total = tape.add(total, tape.scale(l1_penalty(tape, params), gamma))
    return total


def check_case(
    spec: ModelSpec,
    store: ParameterStore,
    trajectory: LearningTrajectory,
    alpha: float,
    inner_batch: int,
    lam: float,
    gamma: float,
    mask: Mask | None,
    loss_kind: str,
    eps: float = 1e-5,
) -> float:
    """Max hybrid relative error |analytic - fd| / max(1, |fd|) over coordinates."""

    def objective(flat_values):
        tape = Tape()
        params = TapedParams(tape, store.with_values(flat_values))
        value = _total_objective(tape, params, trajectory, alpha, inner_batch, lam, gamma, mask, loss_kind).item()
        tape.nodes.clear()
        return value

    tape = Tape()
    params = TapedParams(tape, store)
    total = _total_objective(tape, params, trajectory, alpha, inner_batch, lam, gamma, mask, loss_kind)
    analytic = grad_flat(tape, total, params).value.copy()
    tape.nodes.clear()

    numeric = finite_diff_grad(objective, store.values, eps)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _toy_trajectory(rng, input_dim, out_dim, k_samples, n_val, loss_kind) -> LearningTrajectory:
    x_tr = rng.uniform(-1.0, 1.0, size=(k_samples, input_dim))
    x_val = rng.uniform(-1.0, 1.0, size=(n_val, input_dim))
    if loss_kind == "mse":
        y_tr = rng.uniform(-1.0, 1.0, size=(k_samples, out_dim))
        y_val = rng.uniform(-1.0, 1.0, size=(n_val, out_dim))
    else:
        y_tr = rng.integers(0, out_dim, size=k_samples)
        y_val = rng.integers(0, out_dim, size=n_val)
    return LearningTrajectory(
        x_tr=x_tr,
        y_tr=y_tr,
        x_val=x_val,
        y_val=y_val,
        class_order=(0,),
        tr_counts=(k_samples,),
        val_class_order=(0,),
        val_counts=(n_val,),
    )


NET_SHAPES = (
    # (name, layer sizes, split, loss kind)
    ("linear-mse", (3, 4, 1), 1, "mse"),
    ("two-layer-mse", (3, 8, 1), 1, "mse"),
    ("three-layer-mse", (4, 8, 8, 1), 2, "mse"),
    ("three-layer-xent", (4, 8, 8, 3), 2, "xent"),
)


def run_gradcheck(seed: int = 0, alpha: float = 0.05, inner_batch: int = 2) -> list[GradcheckCase]:
    """The full case grid: nets up to 3 layers x 8 units, k in {0,1,2} inner
    steps, (lam, gamma) in {0, 0.5}^2. Tolerance 1e-4 without the constraint
    term, 1e-3 with it."""
    cases = []
    for name, layers, split, loss_kind in NET_SHAPES:
        spec = ModelSpec(layers, split)
        for k_inner in (0, 1, 2):
            for lam in (0.0, 0.5):
                for gamma in (0.0, 0.5):
                    rng = seeds.rng(seed, "gradcheck", name, k_inner, int(lam * 2), int(gamma * 2))
                    store = build_model(spec, seeds.derive(seed, "gradcheck-model", name, k_inner))
                    # keep parameters away from relu kinks and |w|=0 ties
                    jitter = rng.uniform(0.05, 0.3, size=store.n_params) * rng.choice((-1.0, 1.0), size=store.n_params)
                    store = store.with_values(store.values + jitter)
                    trajectory = _toy_trajectory(rng, spec.input_dim, spec.output_dim, k_inner * inner_batch, 4, loss_kind)
                    mask = get_mask(store.values, 0.5) if lam > 0 else None
                    err = check_case(spec, store, trajectory, alpha, inner_batch, lam, gamma, mask, loss_kind)
                    tol = 1e-3 if lam > 0 else 1e-4
                    cases.append(GradcheckCase(name, k_inner, lam, gamma, err, tol))
    return cases


def format_report(cases: list[GradcheckCase]) -> str:
    lines = ["net                 k  lam  gamma  max_rel_err  tol     status"]
    for c in cases:
        status = "ok" if c.passed else "FAIL"
        lines.append(
            f"{c.name:<18} {c.k_inner:>2}  {c.lam:<4g} {c.gamma:<6g} {c.max_rel_err:<12.3e} {c.tolerance:<7g} {status}"
        )
    worst = max(c.max_rel_err for c in cases)
    lines.append(f"worst case: {worst:.3e} over {len(cases)} cases")
    return "\n".join(lines)
