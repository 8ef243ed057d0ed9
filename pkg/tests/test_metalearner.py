"""Meta-training engine: inner loop, loss terms, masks, outer step, phases."""

import dataclasses

import numpy as np
import pytest

from kcciol import seeds
from kcciol.errors import NumericError, UsageError
from kcciol.gradcheck import check_case, _toy_trajectory
from kcciol.metalearner import (
    Mask,
    PhaseConfig,
    constraint_loss,
    get_mask,
    inner_loop,
    kcciol,
    l1_penalty,
    meta_loss,
    outer_step,
    softmax_xent_loss,
    train_full,
)
from kcciol.models import ModelSpec, ParameterStore, TapedParams, build_model, grad_flat
from kcciol.optim import AdamState, adam_step
from kcciol.tape import Tape
from kcciol.trajectories import LearningTrajectory


def _tiny_trajectory(rng, spec, k, n_val, loss_kind="mse"):
    return _toy_trajectory(rng, spec.input_dim, spec.output_dim, k, n_val, loss_kind)


SPEC = ModelSpec((3, 6, 6, 1), 2)


# -- inner loop ---------------------------------------------------------------


def test_inner_loop_empty_is_identity():
    store = build_model(SPEC, 0)
    tape = Tape()
    params = TapedParams(tape, store)
    head = inner_loop(tape, params, np.zeros((0, 3)), np.zeros((0, 1)), 0.1, 2, "mse")
    assert head == params.head_blocks


def test_inner_loop_one_parameter_arithmetic():
    # rig h(x)=1 and a 1x1 head: loss = w^2, one step at 0.1 from w=1 -> 0.8
    spec = ModelSpec((1, 1, 1), 1)
    store = ParameterStore(spec, np.array([1.0, 0.0, 1.0, 0.0]))  # theta=(1,0), head w=1,b=0
    tape = Tape()
    params = TapedParams(tape, store)
    x = np.array([[1.0]])
    y = np.array([[0.0]])
    head = inner_loop(tape, params, x, y, 0.1, 1, "mse")
    assert head[0].value[0, 0] == pytest.approx(0.8, abs=0)


def test_inner_loop_unroll_derivative_vs_finite_difference():
    spec = ModelSpec((1, 1, 1), 1)
    alpha = 0.1

    def w_k(w0):
        store = ParameterStore(spec, np.array([1.0, 0.0, w0, 0.0]))
        tape = Tape()
        params = TapedParams(tape, store)
        head = inner_loop(tape, params, np.array([[1.0]]), np.array([[0.0]]), alpha, 1, "mse")
        return float(head[0].value[0, 0])

    # analytic: dW1/dW0 = 1 - 2*alpha*h^2 = 0.8
    eps = 1e-6
    numeric = (w_k(1.0 + eps) - w_k(1.0 - eps)) / (2 * eps)
    assert abs(numeric - 0.8) <= 1e-6

    store = ParameterStore(spec, np.array([1.0, 0.0, 1.0, 0.0]))
    tape = Tape()
    params = TapedParams(tape, store)
    head = inner_loop(tape, params, np.array([[1.0]]), np.array([[0.0]]), alpha, 1, "mse")
    dw = tape.gradient(tape.sum(head[0]), params.head_blocks[0])
    assert dw.value[0, 0] == pytest.approx(0.8, rel=1e-12)


def test_inner_loop_never_touches_theta():
    store = build_model(SPEC, 1)
    theta_before = store.theta.copy()
    rng = np.random.default_rng(0)
    traj = _tiny_trajectory(rng, SPEC, 6, 4)
    tape = Tape()
    params = TapedParams(tape, store)
    inner_loop(tape, params, traj.x_tr, traj.y_tr, 0.05, 2, "mse")
    assert np.array_equal(store.theta, theta_before)
    # taped theta leaves still hold the original values bit-exact
    flat_theta = np.concatenate([b.value.ravel() for b in params.theta_blocks])
    assert np.array_equal(flat_theta, theta_before)


def test_inner_loop_consumes_each_batch_once():
    store = build_model(SPEC, 1)
    rng = np.random.default_rng(0)
    traj = _tiny_trajectory(rng, SPEC, 7, 4)  # 7 samples, batch 2 -> 4 updates
    tape = Tape()
    params = TapedParams(tape, store)
    inner_loop(tape, params, traj.x_tr, traj.y_tr, 0.05, 2, "mse")
    axpy_count = sum(1 for n in tape.nodes if n.op == "axpy")
    assert axpy_count == 4 * len(params.head_blocks)


# -- loss terms ---------------------------------------------------------------


def test_meta_loss_perfect_predictor_is_zero():
    spec = ModelSpec((1, 1, 1), 1)
    store = ParameterStore(spec, np.array([1.0, 0.0, 1.0, 0.0]))  # identity-ish net
    tape = Tape()
    params = TapedParams(tape, store)
    x = np.array([[1.0], [2.0]])
    loss = meta_loss(tape, params, params.head_blocks, x, x, "mse")
    assert loss.item() == 0.0


def test_meta_loss_zero_predictor_mse():
    spec = ModelSpec((1, 1, 1), 1)
    store = ParameterStore(spec, np.zeros(4))
    tape = Tape()
    params = TapedParams(tape, store)
    x = np.array([[1.0], [1.0]])
    y = np.array([[1.0], [-1.0]])
    loss = meta_loss(tape, params, params.head_blocks, x, y, "mse")
    assert loss.item() == pytest.approx(1.0, abs=0)


def test_xent_uniform_logits_is_log_c():
    tape = Tape()
    for n_classes in (2, 5, 9):
        logits = tape.const(np.zeros((4, n_classes)))
        labels = np.array([0, 1, 0, n_classes - 1])
        loss = softmax_xent_loss(tape, logits, labels)
        assert loss.item() == pytest.approx(np.log(n_classes), rel=1e-12)


def test_constraint_loss_examples():
    assert constraint_loss(Mask(np.zeros(3, np.uint8), 0.0, np.inf), np.array([1.0, 2.0, 3.0])) == 0.0
    mask = Mask(np.array([1, 0], np.uint8), 0.5, 3.0)
    assert constraint_loss(mask, np.array([3.0, 4.0])) == pytest.approx(9.0, abs=0)


def test_constraint_loss_full_mask_equals_norm():
    rng = np.random.default_rng(4)
    g = rng.normal(size=50)
    mask = Mask(np.ones(50, np.uint8), 1.0, 0.0)
    direct = float(np.dot(g, g))
    assert abs(constraint_loss(mask, g) - direct) <= 1e-12 * max(1.0, direct)


def test_constraint_loss_taped_matches_plain():
    rng = np.random.default_rng(5)
    store = build_model(SPEC, 2)
    traj = _tiny_trajectory(rng, SPEC, 4, 3)
    mask = get_mask(store.values, 0.5)
    tape = Tape()
    params = TapedParams(tape, store)
    head = inner_loop(tape, params, traj.x_tr, traj.y_tr, 0.05, 2, "mse")
    lm = meta_loss(tape, params, head, traj.x_val, traj.y_val, "mse")
    g = grad_flat(tape, lm, params)
    taped = constraint_loss(tape, mask, g)
    assert taped.item() == pytest.approx(constraint_loss(mask, g.value), rel=1e-12)


def test_l1_penalty_values():
    assert l1_penalty(np.zeros(5)) == 0.0
    assert l1_penalty(np.array([1.0, -2.0, 3.0])) == 6.0


def test_l1_subgradient_zero_at_zero():
    spec = ModelSpec((1, 1, 1), 1)
    store = ParameterStore(spec, np.array([0.7, 0.0, -0.3, 0.9]))
    tape = Tape()
    params = TapedParams(tape, store)
    g = tape.gradient(l1_penalty(tape, params), params.blocks)
    flat = np.concatenate([x.value.ravel() for x in g])
    assert np.array_equal(flat, [1.0, 0.0, -1.0, 1.0])


# -- masks --------------------------------------------------------------------


def test_mask_boundary_fractions():
    values = np.array([0.5, -1.0, 0.25, 2.0])
    assert get_mask(values, 1.0).bits.tolist() == [1, 1, 1, 1]
    assert get_mask(values, 0.0).bits.tolist() == [0, 0, 0, 0]
    assert get_mask(values, 0.0).threshold == np.inf


def test_mask_top_half():
    mask = get_mask(np.array([0.1, -0.5, 0.3, 0.05]), 0.5)
    assert mask.bits.tolist() == [0, 1, 1, 0]
    assert mask.threshold == 0.3


def test_mask_tie_breaks_to_lower_index():
    mask = get_mask(np.array([0.2, -0.2, 0.2]), 1.0 / 3.0)
    assert mask.bits.tolist() == [1, 0, 0]


def test_mask_population_and_equivariances():
    rng = np.random.default_rng(6)
    for trial in range(50):
        n = int(rng.integers(3, 200))
        values = rng.normal(size=n)
        delta = float(rng.uniform())
        mask = get_mask(values, delta)
        assert mask.population == int(np.ceil(delta * n))
        assert np.array_equal(get_mask(2.0 * values, delta).bits, mask.bits)
        perm = rng.permutation(n)
        assert np.array_equal(get_mask(values[perm], delta).bits, mask.bits[perm])


def test_mask_bits_immutable():
    mask = get_mask(np.array([1.0, 2.0]), 0.5)
    with pytest.raises(ValueError):
        mask.bits[0] = 1


# -- outer step / kcciol --------------------------------------------------------


def _phase(**kw):
    base = dict(alpha=0.05, beta=0.01, lam=0.0, gamma=0.0, steps=1, inner_batch=2)
    base.update(kw)
    return PhaseConfig(**base)


def test_outer_step_plain_reduces_to_meta_gradient():
    rng = np.random.default_rng(7)
    store = build_model(SPEC, 3)
    traj = _tiny_trajectory(rng, SPEC, 4, 3)
    state = AdamState.initial(store.n_params)
    new_store, new_state, losses = outer_step(store, state, traj, None, _phase(), "mse")
    assert losses.total == losses.l_meta
    assert losses.l_constraint == 0.0 and losses.l_1 == 0.0

    # reference: compute the plain meta-gradient by hand and take the same Adam step
    tape = Tape()
    params = TapedParams(tape, store)
    head = inner_loop(tape, params, traj.x_tr, traj.y_tr, 0.05, 2, "mse")
    lm = meta_loss(tape, params, head, traj.x_val, traj.y_val, "mse")
    g = grad_flat(tape, lm, params)
    _, ref_values = adam_step(AdamState.initial(store.n_params), store.values, g.value, 0.01)
    assert np.array_equal(new_store.values, ref_values)


def test_outer_step_requires_mask_with_constraint():
    rng = np.random.default_rng(8)
    store = build_model(SPEC, 3)
    traj = _tiny_trajectory(rng, SPEC, 4, 3)
    with pytest.raises(UsageError):
        outer_step(store, AdamState.initial(store.n_params), traj, None, _phase(lam=0.5), "mse")


def test_outer_step_gradients_match_finite_differences():
    # gamma-only and full constrained mode on a small net, through the unroll
    rng = np.random.default_rng(9)
    spec = ModelSpec((3, 8, 1), 1)
    store = build_model(spec, 4)
    store = store.with_values(store.values + 0.1 * np.sign(rng.normal(size=store.n_params)))
    traj = _tiny_trajectory(rng, spec, 4, 3)
    mask = get_mask(store.values, 0.5)
    err_gamma = check_case(spec, store, traj, 0.05, 2, 0.0, 0.5, None, "mse")
    assert err_gamma <= 1e-4
    err_full = check_case(spec, store, traj, 0.05, 2, 0.5, 0.0, mask, "mse")
    assert err_full <= 1e-3


def test_outer_step_numeric_error_leaves_params_alone():
    rng = np.random.default_rng(10)
    store = build_model(SPEC, 3)
    huge = store.with_values(store.values * 1e160)
    traj = _tiny_trajectory(rng, SPEC, 4, 3)
    with pytest.raises(NumericError):
        outer_step(huge, AdamState.initial(store.n_params), traj, None, _phase(), "mse")
    assert np.array_equal(huge.values, store.values * 1e160)


def test_kcciol_zero_steps():
    store = build_model(SPEC, 3)
    out, records = kcciol(lambda s: None, None, store, _phase(steps=0), 0, "mse")
    assert out is store and records == []


def test_kcciol_deterministic():
    rng_spec = ModelSpec((3, 6, 1), 1)
    store = build_model(rng_spec, 5)

    def sampler(step_seed):
        rng = np.random.default_rng(step_seed.generate_state(2))
        return _tiny_trajectory(rng, rng_spec, 4, 3)

    a, rec_a = kcciol(sampler, None, store, _phase(steps=5), 11, "mse")
    b, rec_b = kcciol(sampler, None, store, _phase(steps=5), 11, "mse")
    assert np.array_equal(a.values, b.values)
    assert rec_a == rec_b


def test_kcciol_learns_on_tiny_sine():
    # 200 steps on a small net: smoothed meta loss decreases (window 50)
    from kcciol.config import parse_config, training_sampler

    cfg = parse_config("configs/sine_desk.cfg")
    cfg = dataclasses.replace(cfg, model_spec=ModelSpec((11, 32, 32, 32, 1), 2), tr_per_fn=32, val_per_fn=8)
    store = build_model(cfg.model_spec, seeds.derive(0, "model"))
    phase = dataclasses.replace(cfg.phases[0], steps=200)
    out, records = kcciol(training_sampler(cfg), None, store, phase, seeds.derive(0, "phase", 1), "mse")
    losses = np.array([r[1] for r in records])
    assert losses[-50:].mean() < losses[:50].mean()


def test_train_full_phase_bookkeeping(tmp_path):
    from kcciol.config import parse_config

    cfg = parse_config("configs/class_desk.cfg")
    cfg = dataclasses.replace(
        cfg,
        phases=(
            dataclasses.replace(cfg.phases[0], steps=6),
            dataclasses.replace(cfg.phases[1], steps=4, gamma=1e-3),
            dataclasses.replace(cfg.phases[2], steps=3, lam=1e-3),
        ),
    )
    out_dir = tmp_path / "run"
    result = train_full(cfg, out_dir=str(out_dir))
    assert sorted(result.records) == [1, 2, 3]
    assert len(result.records[1]) == 6 and len(result.records[2]) == 4 and len(result.records[3]) == 3
    # phase 1/3 have no l1 term; phase 2 does; phase 3 has the constraint term
    assert all(r[3] == 0.0 for r in result.records[1])
    assert all(r[3] > 0.0 for r in result.records[2])
    assert all(r[2] >= 0.0 for r in result.records[3]) and any(r[2] > 0.0 for r in result.records[3])
    assert all(r[2] == 0.0 for r in result.records[1] + result.records[2])
    # mask population from the configured fraction
    n = result.stores[2].n_params
    assert result.mask.population == int(np.ceil(cfg.delta * n))
    for phase in (1, 2, 3):
        assert (out_dir / f"phase{phase}.kcml").exists()
        assert (out_dir / f"phase{phase}_loss.log").exists()


def test_first_order_constraint_switch():
    rng = np.random.default_rng(11)
    store = build_model(SPEC, 6)
    mask = get_mask(store.values, 0.5)
    state = AdamState.initial(store.n_params)

    # no unroll: the straight-through head equals the initial head, so the
    # approximation is exact (same math, different adjoint accumulation order)
    traj0 = _tiny_trajectory(rng, SPEC, 0, 4)
    full0, _, b_full0 = outer_step(store, state, traj0, mask, _phase(lam=0.5), "mse")
    fo0, _, b_fo0 = outer_step(store, state, traj0, mask, _phase(lam=0.5), "mse", first_order=True)
    assert np.allclose(full0.values, fo0.values, rtol=0, atol=1e-12)
    assert b_full0.l_constraint == pytest.approx(b_fo0.l_constraint, rel=1e-12)

    # with an unroll the approximation treats the adapted head as
    # initial-head-plus-constant, so both the penalty value and the update
    # differ from the full double-backward path
    traj = _tiny_trajectory(rng, SPEC, 4, 4)
    full, _, b_full = outer_step(store, state, traj, mask, _phase(lam=0.5), "mse")
    fo, _, b_fo = outer_step(store, state, traj, mask, _phase(lam=0.5), "mse", first_order=True)
    assert b_full.l_meta == b_fo.l_meta
    assert b_fo.l_constraint > 0 and b_full.l_constraint > 0
    assert not np.array_equal(full.values, fo.values)


def test_loss_log_format(tmp_path):
    from kcciol.config import parse_config

    cfg = parse_config("configs/class_desk.cfg")
    cfg = dataclasses.replace(
        cfg,
        phases=(
            dataclasses.replace(cfg.phases[0], steps=3),
            dataclasses.replace(cfg.phases[1], steps=2),
            dataclasses.replace(cfg.phases[2], steps=2),
        ),
    )
    train_full(cfg, out_dir=str(tmp_path))
    lines = (tmp_path / "phase2_loss.log").read_text().splitlines()
    assert lines[0] == f"# config_hash={cfg.config_hash}"
    assert lines[1] == "# step, l_meta, l_constraint, l_1, total"
    for step, line in enumerate(lines[2:]):
        parts = [p.strip() for p in line.split(",")]
        assert len(parts) == 5 and int(parts[0]) == step
        l_meta, l_con, l_1, total = map(float, parts[1:])
        assert total == pytest.approx(l_meta + cfg.phases[1].gamma * l_1, rel=1e-12)
        assert l_con == 0.0


def test_phase_coefficient_validation():
    from kcciol.config import parse_config

    cfg = parse_config("configs/class_desk.cfg")
    bad = dataclasses.replace(
        cfg, phases=(dataclasses.replace(cfg.phases[0], gamma=0.1), cfg.phases[1], cfg.phases[2])
    )
    with pytest.raises(UsageError):
        train_full(bad, out_dir=None)
