"""Tape ops against finite differences and hand oracles; optimizer + checkpoints."""

import json

import numpy as np
import pytest

from unipre3d.autodiff import (
    ParameterStore, Tape, Var, adam_step, add, apply_linear, add_linear_params,
    broadcast_rows, concat_channels, concat_rows, feature_norm, gather_rows,
    leaf, linear, load_checkpoint, mean_pool_rows, relu, row_scale,
    save_checkpoint, scale, segment_mean, softmax_cross_entropy, step_lr,
)
from unipre3d.errors import DimensionError, InputError, NumericError


def fd_grad(build, x0, h=1e-6):
    """Central finite differences of scalar-valued build(x: np.ndarray)."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy(); xp[i] += h
        xm = flat.copy(); xm[i] -= h
        gf[i] = (build(xp.reshape(x0.shape)) - build(xm.reshape(x0.shape))) / (2 * h)
    return g


def run_scalar(graph, x0):
    """Run graph(tape, x_var) -> scalar Var, backprop, return (value, x.grad)."""
    tape = Tape()
    x = leaf(x0)
    out = graph(tape, x)
    out.grad[...] = 1.0
    tape.backward()
    return float(out.data), x.grad.copy()


# ---------------------------------------------------------------------------
# elementary ops


def test_linear_identity():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    w = leaf(np.eye(2))
    b = leaf([10.0, 20.0])
    out = linear(None, x, w, b)
    np.testing.assert_array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])


def test_linear_grad_oracle():
    # loss = sum(x @ w.T + b) has closed-form grads.
    rng = np.random.default_rng(3)
    xd = rng.normal(size=(4, 3))
    wd = rng.normal(size=(2, 3))
    bd = rng.normal(size=2)
    tape = Tape()
    x, w, b = leaf(xd), leaf(wd), leaf(bd)
    out = linear(tape, x, w, b)
    out.grad[...] = 1.0
    tape.backward()
    np.testing.assert_allclose(x.grad, np.ones((4, 2)) @ wd, atol=1e-12)
    np.testing.assert_allclose(w.grad, np.ones((4, 2)).T @ xd, atol=1e-12)
    np.testing.assert_allclose(b.grad, 4.0 * np.ones(2), atol=1e-12)


def test_linear_shape_errors():
    with pytest.raises(DimensionError):
        linear(None, leaf(np.zeros((2, 3))), leaf(np.zeros((4, 5))), leaf(np.zeros(4)))
    with pytest.raises(DimensionError):
        linear(None, leaf(np.zeros((2, 3))), leaf(np.zeros((4, 3))), leaf(np.zeros(5)))


def test_relu_values_and_grad():
    tape = Tape()
    x = leaf([[-1.0, 0.0, 2.0]])
    out = relu(tape, x)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])
    out.grad[...] = 1.0
    tape.backward()
    # subgradient at 0 chosen as 0
    np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_gather_rows_miss_is_zero():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    out = gather_rows(None, x, np.array([1, -1, 0, 1]))
    np.testing.assert_array_equal(out.data, [[3, 4], [0, 0], [1, 2], [3, 4]])


def test_gather_rows_grad_accumulates_duplicates():
    tape = Tape()
    x = leaf(np.zeros((2, 1)))
    out = gather_rows(tape, x, np.array([1, 1, -1, 0]))
    out.grad[...] = np.array([[1.0], [2.0], [7.0], [4.0]])
    tape.backward()
    np.testing.assert_array_equal(x.grad, [[4.0], [3.0]])  # miss row dropped


def test_gather_rows_range_check():
    x = leaf(np.zeros((2, 1)))
    with pytest.raises(InputError):
        gather_rows(None, x, np.array([2]))
    with pytest.raises(InputError):
        gather_rows(None, x, np.array([-2]))


def test_segment_mean_oracle():
    rng = np.random.default_rng(5)
    xd = rng.normal(size=(10, 3))
    seg = rng.integers(0, 4, size=10)
    seg[:4] = np.arange(4)  # ensure all segments hit
    out = segment_mean(None, leaf(xd), seg, 4)
    for s in range(4):
        np.testing.assert_allclose(out.data[s], xd[seg == s].mean(axis=0), atol=1e-12)


def test_segment_mean_empty_segment_rejected():
    with pytest.raises(InputError):
        segment_mean(None, leaf(np.zeros((3, 2))), np.array([0, 0, 2]), 4)


def test_feature_norm_standardizes_and_stays_finite():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(32, 5)) * 1000.0 + 300.0
    out = feature_norm(None, leaf(x))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-3)


def test_softmax_cross_entropy_oracle():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(6, 4)) * 3.0
    labels = rng.integers(0, 4, size=6)
    out = softmax_cross_entropy(None, leaf(logits), labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = -logp[np.arange(6), labels].mean()
    np.testing.assert_allclose(float(out.data), expect, rtol=1e-12)


def test_broadcast_mean_pool_inverse_shapes():
    x = leaf(np.arange(6.0).reshape(1, 6))
    up = broadcast_rows(None, x, 5)
    assert up.shape == (5, 6)
    down = mean_pool_rows(None, up)
    np.testing.assert_allclose(down.data, x.data, atol=1e-12)


def test_concat_backward_splits():
    tape = Tape()
    a, b = leaf(np.zeros((2, 3))), leaf(np.zeros((1, 3)))
    out = concat_rows(tape, a, b)
    out.grad[...] = np.arange(9.0).reshape(3, 3)
    tape.backward()
    np.testing.assert_array_equal(a.grad, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(b.grad, [[6, 7, 8]])

    tape = Tape()
    a, b = leaf(np.zeros((2, 2))), leaf(np.zeros((2, 1)))
    out = concat_channels(tape, a, b)
    out.grad[...] = np.arange(6.0).reshape(2, 3)
    tape.backward()
    np.testing.assert_array_equal(a.grad, [[0, 1], [3, 4]])
    np.testing.assert_array_equal(b.grad, [[2], [5]])


# ---------------------------------------------------------------------------
# composite graphs vs finite differences


def _composite_graph(tape, x):
    # two-layer MLP with normalization, pooling, concat, and a softmax head
    h = relu(tape, feature_norm(tape, x))
    h = row_scale(tape, h, np.linspace(0.5, 1.5, x.shape[0]))
    pooled = broadcast_rows(tape, mean_pool_rows(tape, h), x.shape[0])
    h = concat_channels(tape, h, pooled)
    h = add(tape, h, scale(tape, h, 0.25))
    logits = gather_rows(tape, h, np.array([0, 2, 1, -1, 3]))
    return softmax_cross_entropy(tape, logits, np.array([0, 3, 1, 2, 5]))


def test_composite_graph_matches_fd():
    rng = np.random.default_rng(17)
    x0 = rng.normal(size=(6, 4))
    _, analytic = run_scalar(_composite_graph, x0)
    numeric = fd_grad(lambda x: run_scalar(_composite_graph, x)[0], x0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_segment_mean_grad_matches_fd():
    seg = np.array([0, 1, 1, 2, 0])

    def graph(tape, x):
        m = segment_mean(tape, x, seg, 3)
        return softmax_cross_entropy(tape, m, np.array([0, 1, 2]))

    rng = np.random.default_rng(19)
    x0 = rng.normal(size=(5, 3))
    _, analytic = run_scalar(graph, x0)
    numeric = fd_grad(lambda x: run_scalar(graph, x)[0], x0)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_tape_none_is_bitwise_identical():
    rng = np.random.default_rng(23)
    x0 = rng.normal(size=(6, 4))
    tape = Tape()
    with_tape = _composite_graph(tape, leaf(x0))
    without = _composite_graph(None, leaf(x0))
    assert with_tape.data.tobytes() == without.data.tobytes()
    assert len(tape) > 0


# ---------------------------------------------------------------------------
# parameter store and optimizer


def test_store_alias_and_duplicates():
    store = ParameterStore()
    store.add("p", np.ones(3))
    with pytest.raises(InputError):
        store.add("p", np.ones(3))
    v = store.var("p")
    v.grad += 2.0
    assert store.get("p").grad[0] == 2.0
    assert store.n_parameters() == 3
    store.zero_grads()
    assert store.get("p").grad.sum() == 0.0


def test_apply_linear_registers_and_runs():
    store = ParameterStore()
    rng = np.random.default_rng(0)
    add_linear_params(store, "fc", 4, 2, rng)
    assert "fc.w" in store and "fc.b" in store
    out = apply_linear(None, store, "fc", leaf(np.ones((3, 4))))
    assert out.shape == (3, 2)
    add_linear_params(store, "zero", 4, 2, rng, zero_init=True)
    assert np.all(store.get("zero.w").data == 0.0)


def adam_reference(x, g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        x = x - lr * mh / (np.sqrt(vh) + eps)
    return x


def test_adam_scalar_oracle():
    store = ParameterStore()
    store.add("x", np.array([2.0]))
    g_seq = [0.5, -1.25, 3.0, 0.0, 0.125]
    for g in g_seq:
        store.get("x").grad[...] = g
        adam_step(store, lr=0.01)
    expect = adam_reference(2.0, g_seq, 0.01)
    np.testing.assert_allclose(store.get("x").data, [expect], atol=1e-12)


def test_adam_zero_grad_no_motion():
    store = ParameterStore()
    store.add("x", np.array([1.5]))
    adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store.get("x").data, [1.5])


def test_adamw_decay_is_decoupled():
    # zero gradient: adamw still shrinks weights by exactly lr*wd*x, adam does not
    store = ParameterStore()
    store.add("x", np.array([2.0]))
    adam_step(store, lr=0.1, weight_decay=0.01, mode="adamw")
    np.testing.assert_allclose(store.get("x").data, [2.0 - 0.1 * 0.01 * 2.0], atol=1e-15)

    store = ParameterStore()
    store.add("x", np.array([2.0]))
    adam_step(store, lr=0.1, weight_decay=0.01, mode="adam")
    # coupled L2: wd*x enters the gradient, so the normalized update has
    # magnitude ~lr (not lr*wd*x)
    assert abs(store.get("x").data[0] - 2.0) > 0.09


def test_adam_mode_validation():
    store = ParameterStore()
    store.add("x", np.zeros(1))
    with pytest.raises(InputError):
        adam_step(store, lr=0.1, mode="sgd")
    with pytest.raises(InputError):
        adam_step(store, lr=0.1, on_nonfinite="ignore")


def test_adam_nonfinite_fail_and_skip():
    store = ParameterStore()
    store.add("bad", np.array([1.0]))
    store.add("good", np.array([1.0]))
    store.get("bad").grad[...] = np.nan
    store.get("good").grad[...] = 1.0
    with pytest.raises(NumericError):
        adam_step(store, lr=0.1, on_nonfinite="fail")
    adam_step(store, lr=0.1, on_nonfinite="skip")
    assert store.get("bad").data[0] == 1.0       # untouched
    assert store.get("good").data[0] != 1.0      # stepped


def test_step_lr_schedule():
    assert step_lr(0, 1e-4) == pytest.approx(1e-4)
    assert step_lr(9, 1e-4) == pytest.approx(1e-4)
    assert step_lr(10, 1e-4) == pytest.approx(9e-5)
    assert step_lr(25, 1e-4) == pytest.approx(8.1e-5)
    with pytest.raises(InputError):
        step_lr(-1, 1e-4)


# ---------------------------------------------------------------------------
# checkpoints


def _tiny_store(seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("a.w", rng.normal(size=(2, 3)))
    store.add("a.b", rng.normal(size=3))
    # give it nontrivial optimizer state
    store.get("a.w").grad[...] = rng.normal(size=(2, 3))
    store.get("a.b").grad[...] = rng.normal(size=3)
    adam_step(store, lr=0.01)
    return store


def test_checkpoint_round_trip(tmp_path):
    store = _tiny_store()
    stem = tmp_path / "ckpt"
    save_checkpoint(stem, store, extra={"note": 1})
    loaded, extra = load_checkpoint(stem)
    assert extra == {"note": 1}
    for name in store.names():
        p, q = store.get(name), loaded.get(name)
        np.testing.assert_allclose(q.data, p.data.astype("<f4"), atol=0)
        np.testing.assert_allclose(q.m, p.m.astype("<f4"), atol=0)
        np.testing.assert_allclose(q.v, p.v.astype("<f4"), atol=0)
        assert q.step == p.step == 1


def test_checkpoint_blob_layout(tmp_path):
    store = _tiny_store()
    stem = tmp_path / "ckpt"
    save_checkpoint(stem, store)
    manifest = json.loads((tmp_path / "ckpt.json").read_text())
    assert manifest["format"] == "unipre3d-checkpoint"
    assert manifest["dtype"] == "<f4"
    blob = np.frombuffer((tmp_path / "ckpt.bin").read_bytes(), dtype="<f4")
    # [data, m, v] per param, element offsets in manifest order
    off = 0
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"]))
        assert entry["offset"] == off
        p = store.get(entry["name"])
        np.testing.assert_array_equal(blob[off:off + size],
                                      p.data.reshape(-1).astype("<f4"))
        np.testing.assert_array_equal(blob[off + size:off + 2 * size],
                                      p.m.reshape(-1).astype("<f4"))
        off += 3 * size
    assert blob.size == off


def test_checkpoint_resave_is_byte_stable(tmp_path):
    # f32 quantization is idempotent: save -> load -> save gives identical bytes
    store = _tiny_store()
    save_checkpoint(tmp_path / "a", store)
    loaded, _ = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", loaded)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_without_optimizer_state(tmp_path):
    store = _tiny_store()
    save_checkpoint(tmp_path / "c", store, include_optimizer=False)
    loaded, _ = load_checkpoint(tmp_path / "c")
    assert np.all(loaded.get("a.w").m == 0.0)
    blob = np.frombuffer((tmp_path / "c.bin").read_bytes(), dtype="<f4")
    assert blob.size == store.n_parameters()


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    store = _tiny_store()
    save_checkpoint(tmp_path / "d", store)
    other = ParameterStore()
    other.add("a.w", np.zeros((9, 9)))
    other.add("a.b", np.zeros(3))
    with pytest.raises(DimensionError):
        load_checkpoint(tmp_path / "d", other)


def test_checkpoint_bad_manifest_rejected(tmp_path):
    (tmp_path / "e.json").write_text(json.dumps({"format": "other"}))
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "e")
