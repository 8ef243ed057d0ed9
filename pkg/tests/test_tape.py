"""Autodiff engine tests: primitive gradients against finite differences,
nested differentiation against symbolic oracles, replay determinism."""

import numpy as np
import pytest

from kcciol.errors import NumericError, UsageError
from kcciol.tape import Tape, finite_diff_grad


def test_square_gradient():
    tape = Tape()
    w = tape.leaf(3.0)
    g = tape.gradient(tape.mul(w, w), w)
    assert g.value == pytest.approx(6.0, abs=0)


def test_l1_gradient_sign():
    tape = Tape()
    w = tape.leaf(np.array([1.0, -2.0]))
    g = tape.gradient(tape.sum(tape.abs(w)), w)
    assert np.array_equal(g.value, [1.0, -1.0])


def test_double_backward_symbolic():
    # g(w) = ||grad f(w)||^2 with f(w) = w^3: grad f = 3w^2, g = 9w^4,
    # grad g = 36w^3 -> 36 at w = 1
    tape = Tape()
    w = tape.leaf(1.0)
    f = tape.mul(w, tape.mul(w, w))
    df = tape.gradient(f, w)
    dg = tape.gradient(tape.mul(df, df), w)
    assert dg.value == pytest.approx(36.0, rel=1e-12)


def test_triple_backward():
    # third derivative of w^4 is 24w
    tape = Tape()
    w = tape.leaf(2.0)
    f = tape.mul(tape.mul(w, w), tape.mul(w, w))
    d3 = tape.gradient(tape.gradient(tape.gradient(f, w), w), w)
    assert d3.value == pytest.approx(48.0, rel=1e-12)


def test_second_derivative_polynomial_exact():
    # f(w) = sum(3w^4 - 2w^2 + w); diagonal Hessian is 36w^2 - 4
    rng = np.random.default_rng(7)
    w0 = rng.uniform(-2, 2, size=5)
    tape = Tape()
    w = tape.leaf(w0)
    w2 = tape.mul(w, w)
    f = tape.sum(tape.add(tape.add(tape.scale(tape.mul(w2, w2), 3.0), tape.scale(w2, -2.0)), w))
    g1 = tape.gradient(f, w)
    g2 = tape.gradient(tape.sum(g1), w)
    assert np.max(np.abs(g2.value - (36.0 * w0**2 - 4.0))) <= 1e-10


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) <= 1e-8


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 1.25, np.array([0.3, -0.4]), 1e-5)
    assert np.array_equal(g, [0.0, 0.0])


def test_finite_diff_sine():
    g = finite_diff_grad(lambda x: float(np.sin(x[0])), np.array([0.7]), 1e-5)
    assert abs(g[0] - np.cos(0.7)) <= 1e-8


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(UsageError):
        finite_diff_grad(lambda x: 0.0, np.array([1.0]), 0.0)


def _random_scalar_programs():
    """Builders covering every primitive; each returns a scalar node."""

    def dense_relu(tape, x):
        n = x.value.size
        w = tape.leaf(np.linspace(-0.7, 0.9, n * 3).reshape(n, 3))
        b = tape.leaf(np.array([0.1, -0.2, 0.3]))
        h = tape.relu(tape.add(tape.matmul(tape.reshape(x, (1, n)), w), b))
        return tape.sum(h), [w, b]

    def log_exp_recip(tape, x):
        z = tape.exp(tape.scale(x, 0.3))
        return tape.sum(tape.log(tape.add(tape.recip(z), tape.const(np.full(x.value.shape, 0.5))))), []

    def abs_mix(tape, x):
        return tape.sum(tape.mul(tape.abs(x), tape.add(x, tape.const(np.ones(x.value.shape))))), []

    def slices_and_concat(tape, x):
        n = x.value.size
        a = tape.slice1d(x, 0, n // 2)
        b = tape.slice1d(x, n // 2, n)
        joined = tape.concat1d([tape.mul(a, a), b, tape.embed1d(a, 1, 1 + a.value.size, n + 2)])
        return tape.sum(tape.mul(joined, joined)), []

    def rows_and_axpy(tape, x):
        n = x.value.size
        m = tape.reshape(x, (n // 2, 2))
        top = tape.rows(m, 0, n // 4)
        emb = tape.embed_rows(top, 1, 1 + top.value.shape[0], n // 2 + 1)
        return tape.sum(tape.axpy(tape.mul(emb, emb), -0.5, emb)), []

    def nested_grad_norm(tape, x):
        # differentiating this exercises third-order nesting
        f = tape.sum(tape.mul(x, tape.mul(x, x)))
        g = tape.gradient(f, x)
        return tape.sum(tape.mul(g, g)), []

    def softmax_like(tape, x):
        n = x.value.size
        m = tape.reshape(x, (2, n // 2))
        shift = tape.const(-np.max(m.value, axis=1, keepdims=True))
        # the detached shift must be added back: the value is then
        # shift-independent and the detachment is gradient-exact
        lse = tape.add(tape.log(tape.sum(tape.exp(tape.add(m, shift)), axis=1, keepdims=True)), tape.neg(shift))
        return tape.sum(tape.add(lse, tape.neg(tape.sum(m, axis=1, keepdims=True)))), []

    return [dense_relu, log_exp_recip, abs_mix, slices_and_concat, rows_and_axpy, nested_grad_norm, softmax_like]


def test_gradients_match_finite_differences_100_instances():
    rng = np.random.default_rng(0)
    programs = _random_scalar_programs()
    checked = 0
    for trial in range(100):
        build = programs[trial % len(programs)]
        x0 = rng.uniform(0.2, 1.0, size=8) * rng.choice([-1.0, 1.0], size=8)

        def objective(vec):
            tape = Tape()
            x = tape.leaf(vec)
            out, _ = build(tape, x)
            return out.item()

        tape = Tape()
        x = tape.leaf(x0)
        out, _ = build(tape, x)
        analytic = tape.gradient(out, x).value
        numeric = finite_diff_grad(objective, x0, 1e-5)
        rel = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))
        assert rel <= 1e-4, f"trial {trial} ({build.__name__}): rel error {rel}"
        checked += 1
    assert checked == 100


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    tape = Tape()
    x = tape.leaf(rng.normal(size=(4, 3)))
    w = tape.leaf(rng.normal(size=(3, 2)))
    h = tape.relu(tape.matmul(x, w))
    loss = tape.sum(tape.mul(h, h))
    tape.gradient(loss, [x, w])
    assert tape.replay()


def test_forward_determinism_across_runs():
    def run():
        tape = Tape()
        x = tape.leaf(np.linspace(-1, 1, 12).reshape(4, 3))
        w = tape.leaf(np.linspace(0.5, -0.5, 6).reshape(3, 2))
        out = tape.sum(tape.relu(tape.matmul(x, w)))
        g = tape.gradient(out, w)
        return out.value.copy(), g.value.copy()

    out1, g1 = run()
    out2, g2 = run()
    assert np.array_equal(out1, out2) and np.array_equal(g1, g2)


def test_gradient_unused_leaf_is_zero():
    tape = Tape()
    w = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones(2))
    g = tape.gradient(tape.sum(tape.mul(w, w)), unused)
    assert np.array_equal(g.value, np.zeros(2))


def test_nonfinite_named_in_error():
    tape = Tape()
    x = tape.leaf(800.0)
    e = tape.exp(x)  # overflows to inf
    with pytest.raises(NumericError, match=r"exp"):
        tape.assert_finite(e)


def test_objective_must_be_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(UsageError):
        tape.gradient(x, x)


def test_foreign_node_rejected():
    tape1, tape2 = Tape(), Tape()
    x1 = tape1.leaf(1.0)
    x2 = tape2.leaf(1.0)
    with pytest.raises(UsageError):
        tape1.gradient(tape1.mul(x1, x1), x2)


def test_broadcast_add_bias_gradient():
    tape = Tape()
    x = tape.const(np.arange(6.0).reshape(3, 2))
    b = tape.leaf(np.array([1.0, -1.0]))
    out = tape.sum(tape.add(x, b))
    g = tape.gradient(out, b)
    assert np.array_equal(g.value, [3.0, 3.0])


def test_stop_gradient_blocks_flow():
    tape = Tape()
    w = tape.leaf(2.0)
    frozen = tape.stop_gradient(tape.mul(w, w))
    out = tape.mul(frozen, w)  # d/dw = frozen = 4 (not 3w^2)
    g = tape.gradient(out, w)
    assert g.value == pytest.approx(4.0)
