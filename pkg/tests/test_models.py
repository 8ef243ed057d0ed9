"""Model construction, forward passes, head replacement, checkpoint format."""

import numpy as np
import pytest

from kcciol import backend, seeds
from kcciol.errors import FormatError, UsageError
from kcciol.models import (
    ModelSpec,
    ParameterStore,
    TapedParams,
    build_model,
    forward,
    load_checkpoint,
    replace_head,
    save_checkpoint,
    taped_forward,
)
from kcciol.tape import Tape, finite_diff_grad

SMALL = ModelSpec((3, 5, 4, 2), split_index=2)


def test_spec_validation():
    with pytest.raises(UsageError):
        ModelSpec((3, 0, 2), 1)
    with pytest.raises(UsageError):
        ModelSpec((3, 4, 2), 2)  # split must be < weight layer count
    with pytest.raises(UsageError):
        ModelSpec((3,), 1)


def test_build_deterministic():
    a = build_model(SMALL, 42)
    b = build_model(SMALL, 42)
    assert np.array_equal(a.values, b.values)
    c = build_model(SMALL, 43)
    assert not np.array_equal(a.values, c.values)


def test_biases_zero_after_build():
    store = build_model(SMALL, 1)
    for block in store.layout:
        if block.name.startswith("b"):
            assert np.array_equal(store.block_values(block), np.zeros(block.shape))


def test_weight_bounds_over_1000_seeds():
    spec = ModelSpec((4, 3, 2), 1)
    bounds = [np.sqrt(6.0 / (4 + 3)), np.sqrt(6.0 / (3 + 2))]
    for seed in range(1000):
        store = build_model(spec, seed)
        for layer, bound in enumerate(bounds):
            w = store.block_values(store.layout[2 * layer])
            assert np.abs(w).max() <= bound


def test_partition_covers_store():
    store = build_model(SMALL, 0)
    together = np.concatenate([store.theta, store.head])
    assert np.array_equal(together, store.values)
    assert store.theta_end + store.head.size == store.n_params


def test_forward_zero_params_zero_output():
    store = ParameterStore(SMALL, np.zeros(build_model(SMALL, 0).n_params))
    out = forward(SMALL, store, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, np.zeros(2))


def test_forward_affine_arithmetic():
    # two 1-wide layers: relu(3*1+0)=3, then 3*2+1=7
    spec = ModelSpec((1, 1, 1), 1)
    store = ParameterStore(spec, np.array([1.0, 0.0, 2.0, 1.0]))
    out = forward(spec, store, np.array([3.0]))
    assert np.array_equal(out, [7.0])


def test_forward_matches_inline_reimplementation():
    spec = ModelSpec((4, 6, 5, 3), 2)
    store = build_model(spec, 9)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 4))

    # straight-line duplicate evaluation
    values = store.values
    offset = 0
    h = x
    sizes = spec.layer_sizes
    for layer in range(3):
        w = values[offset : offset + sizes[layer] * sizes[layer + 1]].reshape(sizes[layer], sizes[layer + 1])
        offset += w.size
        b = values[offset : offset + sizes[layer + 1]]
        offset += b.size
        h = h @ w + b
        if layer != 2:
            h = np.maximum(h, 0.0)

    out = forward(spec, store, x)
    assert np.max(np.abs(out - h)) <= 1e-12


def test_forward_dimension_check():
    store = build_model(SMALL, 0)
    with pytest.raises(UsageError):
        forward(SMALL, store, np.ones(4))


def test_taped_forward_matches_plain():
    store = build_model(SMALL, 3)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 3))
    tape = Tape()
    params = TapedParams(tape, store)
    out = taped_forward(tape, params, x)
    assert np.array_equal(out.value, forward(SMALL, store, x))


def test_taped_forward_gradient_vs_finite_differences():
    store = build_model(SMALL, 3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 3))
    # keep away from relu kinks for the finite-difference probe
    store = store.with_values(store.values + 0.05 * np.sign(rng.normal(size=store.n_params)))

    def objective(values):
        tape = Tape()
        params = TapedParams(tape, store.with_values(values))
        out = taped_forward(tape, params, x)
        return tape.scale(tape.sum(tape.mul(out, out)), 1.0 / out.value.size).item()

    tape = Tape()
    params = TapedParams(tape, store)
    out = taped_forward(tape, params, x)
    loss = tape.scale(tape.sum(tape.mul(out, out)), 1.0 / out.value.size)
    theta_grads = tape.gradient(loss, params.theta_blocks)
    analytic = np.concatenate([g.value.ravel() for g in theta_grads])
    numeric = finite_diff_grad(objective, store.values, 1e-5)[: store.theta_end]
    rel = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))
    assert rel <= 1e-4


def test_replace_head_keeps_theta_bits():
    store = build_model(SMALL, 7)
    new_spec, new_store = replace_head(SMALL, store, 2, seed=11)
    assert new_spec == SMALL
    assert np.array_equal(new_store.theta, store.theta)
    assert not np.array_equal(new_store.head, store.head)


def test_replace_head_resizes_output():
    store = build_model(SMALL, 7)
    new_spec, new_store = replace_head(SMALL, store, 6, seed=11)
    assert new_spec.layer_sizes == (3, 5, 4, 6)
    assert new_store.n_params == store.theta_end + (4 * 6 + 6)


def test_replace_head_seed_contract():
    store = build_model(SMALL, 7)
    _, a = replace_head(SMALL, store, 2, seed=1)
    _, b = replace_head(SMALL, store, 2, seed=2)
    _, a2 = replace_head(SMALL, store, 2, seed=1)
    assert np.array_equal(a.values, a2.values)
    assert not np.array_equal(a.head, b.head)
    assert np.array_equal(a.theta, b.theta)


def test_checkpoint_roundtrip(tmp_path):
    store = build_model(SMALL, 13)
    mask = (np.arange(store.n_params) % 3 == 0).astype(np.uint8)
    path = tmp_path / "model.kcml"
    save_checkpoint(path, SMALL, store, mask)
    spec2, store2, mask2 = load_checkpoint(path)
    assert spec2 == SMALL
    assert np.array_equal(store2.values, store.values)
    assert np.array_equal(mask2, mask)


def test_checkpoint_without_mask(tmp_path):
    store = build_model(SMALL, 13)
    path = tmp_path / "model.kcml"
    save_checkpoint(path, SMALL, store)
    _, _, mask = load_checkpoint(path)
    assert mask is None


def test_checkpoint_corruption_detected(tmp_path):
    store = build_model(SMALL, 13)
    path = tmp_path / "model.kcml"
    save_checkpoint(path, SMALL, store, (np.arange(store.n_params) % 2).astype(np.uint8))
    raw = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    positions = list(rng.integers(0, len(raw), size=12)) + [0, 5, len(raw) - 1]
    for pos in positions:
        corrupted = bytearray(raw)
        corrupted[pos] ^= 0x40
        bad = tmp_path / "bad.kcml"
        bad.write_bytes(bytes(corrupted))
        with pytest.raises(FormatError):
            load_checkpoint(bad)


def test_checkpoint_truncation_detected(tmp_path):
    store = build_model(SMALL, 13)
    path = tmp_path / "model.kcml"
    save_checkpoint(path, SMALL, store)
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        bad = tmp_path / "cut.kcml"
        bad.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(bad)


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    import zlib

    store = build_model(SMALL, 13)
    path = tmp_path / "model.kcml"
    save_checkpoint(path, SMALL, store)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)  # version field
    raw[-4:] = struct.pack("<I", zlib.crc32(bytes(raw[:-4])))  # keep the checksum valid
    bad = tmp_path / "v99.kcml"
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(bad)


def test_store_values_read_only():
    store = build_model(SMALL, 0)
    with pytest.raises(ValueError):
        store.values[0] = 5.0
