"""Minimal reverse-mode compute layer over NumPy arrays.

A Tape is a flat list of backward closures recorded in execution order;
reversing it is a valid reverse topological traversal because ops only consume
previously created Vars. Gradients accumulate additively into per-Var buffers.
Passing tape=None runs the identical forward math without recording, bitwise.

Parameters live in a ParameterStore; store.var(name) returns a Var whose
data/grad buffers alias the stored arrays, so tape.backward() deposits
gradients exactly where adam_step expects them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetIOError, DimensionError, InputError, NumericError, dim_error

__all__ = [
    "Tape", "Var", "ParameterStore", "leaf", "linear", "relu", "add",
    "concat_channels", "concat_rows", "row_scale", "mean_pool_rows",
    "broadcast_rows", "gather_rows", "segment_mean", "feature_norm", "scale",
    "softmax_cross_entropy", "adam_step", "step_lr", "add_linear_params",
    "apply_linear", "save_checkpoint", "load_checkpoint",
]


class Tape:
    """Ordered record of backward closures; reverse traversal = backprop."""

    def __init__(self) -> None:
        self._ops: list = []

    def record(self, fn) -> None:
        self._ops.append(fn)

    def backward(self) -> None:
        for fn in reversed(self._ops):
            fn()

    def __len__(self) -> int:
        return len(self._ops)


class Var:
    """Array plus gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if grad is None else grad

    @property
    def shape(self):
        return self.data.shape


def leaf(data) -> Var:
    return Var(np.array(data, dtype=np.float64))


def _rec(tape: Tape | None, fn) -> None:
    if tape is not None:
        tape.record(fn)


def linear(tape: Tape | None, x: Var, w: Var, b: Var) -> Var:
    """x (B, C_in) @ w.T + b with w (C_out, C_in), b (C_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"linear: x {x.data.shape} incompatible with w {w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"linear: b {b.data.shape} incompatible with w {w.data.shape}")
    out = Var(x.data @ w.data.T + b.data)

    def back():
        g = out.grad
        x.grad += g @ w.data
        w.grad += g.T @ x.data
        b.grad += g.sum(axis=0)
    _rec(tape, back)
    return out


def relu(tape: Tape | None, x: Var) -> Var:
    out = Var(np.maximum(x.data, 0.0))

    def back():
        x.grad += out.grad * (x.data > 0.0)
    _rec(tape, back)
    return out


def add(tape: Tape | None, a: Var, b: Var) -> Var:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} vs {b.data.shape}")
    out = Var(a.data + b.data)

    def back():
        a.grad += out.grad
        b.grad += out.grad
    _rec(tape, back)
    return out


def scale(tape: Tape | None, x: Var, c: float) -> Var:
    out = Var(x.data * c)

    def back():
        x.grad += out.grad * c
    _rec(tape, back)
    return out


def concat_rows(tape: Tape | None, a: Var, b: Var) -> Var:
    """Stack two (N_i, C) blocks along rows."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"concat_rows: shapes {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[0]
    out = Var(np.concatenate([a.data, b.data], axis=0))

    def back():
        a.grad += out.grad[:na]
        b.grad += out.grad[na:]
    _rec(tape, back)
    return out


def row_scale(tape: Tape | None, x: Var, coef: np.ndarray) -> Var:
    """Multiply each row i of x (N, C) by the constant coef[i]."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (x.data.shape[0],):
        raise DimensionError(f"row_scale: coef {coef.shape} vs rows {x.data.shape}")
    out = Var(x.data * coef[:, None])

    def back():
        x.grad += out.grad * coef[:, None]
    _rec(tape, back)
    return out


def concat_channels(tape: Tape | None, a: Var, b: Var) -> Var:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"concat_channels: shapes {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = Var(np.concatenate([a.data, b.data], axis=1))

    def back():
        a.grad += out.grad[:, :ca]
        b.grad += out.grad[:, ca:]
    _rec(tape, back)
    return out


def mean_pool_rows(tape: Tape | None, x: Var) -> Var:
    """(N, C) -> (1, C) mean over rows."""
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise DimensionError(f"mean_pool_rows: need nonempty (N, C), got {x.data.shape}")
    n = x.data.shape[0]
    out = Var(x.data.mean(axis=0, keepdims=True))

    def back():
        x.grad += out.grad / n
    _rec(tape, back)
    return out


def broadcast_rows(tape: Tape | None, x: Var, n: int) -> Var:
    """(1, C) -> (n, C) by repetition."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise DimensionError(f"broadcast_rows: need (1, C), got {x.data.shape}")
    out = Var(np.repeat(x.data, n, axis=0))

    def back():
        x.grad += out.grad.sum(axis=0, keepdims=True)
    _rec(tape, back)
    return out


def gather_rows(tape: Tape | None, x: Var, idx: np.ndarray) -> Var:
    """out[i] = x[idx[i]], with idx == -1 producing an exact-zero row."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: index must be 1-D, got {idx.shape}")
    if (idx >= x.data.shape[0]).any() or (idx < -1).any():
        raise InputError("gather_rows: index out of range")
    hit = idx >= 0
    out_data = np.zeros((idx.size, x.data.shape[1]))
    out_data[hit] = x.data[idx[hit]]
    out = Var(out_data)

    def back():
        np.add.at(x.grad, idx[hit], out.grad[hit])
    _rec(tape, back)
    return out


def segment_mean(tape: Tape | None, x: Var, seg: np.ndarray, n_segments: int) -> Var:
    """Mean of x rows per segment id; every segment in [0, n_segments) must be hit.

    Backward distributes each segment's gradient uniformly to its members.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (x.data.shape[0],):
        raise DimensionError(f"segment_mean: seg {seg.shape} vs rows {x.data.shape}")
    if seg.size and ((seg < 0).any() or (seg >= n_segments).any()):
        raise InputError("segment_mean: segment id out of range")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if (counts == 0).any():
        raise InputError("segment_mean: empty segment")
    sums = np.zeros((n_segments, x.data.shape[1]))
    np.add.at(sums, seg, x.data)
    out = Var(sums / counts[:, None])

    def back():
        x.grad += out.grad[seg] / counts[seg][:, None]
    _rec(tape, back)
    return out


def feature_norm(tape: Tape | None, x: Var, eps: float = 1e-5) -> Var:
    """Per-channel standardization over rows: y = (x - mean) / sqrt(var + eps).

    Keeps activations bounded under wildly scaled inputs; the stabilizer for
    the point backbone.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"feature_norm: need (N, C), got {x.data.shape}")
    mu = x.data.mean(axis=0, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=0, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (x.data - mu) / sigma
    out = Var(y)

    def back():
        g = out.grad
        gm = g.mean(axis=0, keepdims=True)
        gym = (g * y).mean(axis=0, keepdims=True)
        x.grad += (g - gm - y * gym) / sigma
    _rec(tape, back)
    return out


def softmax_cross_entropy(tape: Tape | None, logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy over rows; labels are int class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = labels.size
    nll = -np.log(np.maximum(p[np.arange(n), labels], 1e-300))
    out = Var(np.array(nll.mean()))

    def back():
        g = p.copy()
        g[np.arange(n), labels] -= 1.0
        logits.grad += out.grad * g / n
    _rec(tape, back)
    return out


def add_linear_params(store: "ParameterStore", name: str, c_in: int, c_out: int,
                      rng: np.random.Generator, zero_init: bool = False) -> None:
    """Register <name>.w and <name>.b; Kaiming-uniform weights, zero biases."""
    if zero_init:
        w = np.zeros((c_out, c_in))
    else:
        lim = np.sqrt(6.0 / c_in)
        w = rng.uniform(-lim, lim, (c_out, c_in))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(c_out))


def apply_linear(tape: Tape | None, store: "ParameterStore", name: str, x: Var) -> Var:
    return linear(tape, x, store.var(f"{name}.w"), store.var(f"{name}.b"))


# ---------------------------------------------------------------------------
# parameters and optimization


@dataclass
class _Param:
    data: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Named dense parameters with per-parameter Adam state."""

    def __init__(self) -> None:
        self._params: dict[str, _Param] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._params:
            raise InputError(f"parameter {name!r} already exists")
        data = np.array(array, dtype=np.float64)
        self._params[name] = _Param(
            data=data, grad=np.zeros_like(data),
            m=np.zeros_like(data), v=np.zeros_like(data))

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def get(self, name: str) -> _Param:
        return self._params[name]

    def var(self, name: str) -> Var:
        return _aliased_var(self._params[name])

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())


def _aliased_var(p: _Param) -> Var:
    v = Var.__new__(Var)
    v.data = p.data
    v.grad = p.grad
    return v


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0, mode: str = "adam",
              on_nonfinite: str = "fail") -> None:
    """Adam / AdamW with bias correction. adamw decouples the decay; adam
    folds weight_decay into the gradient (classic L2 coupling)."""
    if mode not in ("adam", "adamw"):
        raise InputError(f"unknown optimizer mode {mode!r}")
    if on_nonfinite not in ("fail", "skip"):
        raise InputError(f"on_nonfinite must be fail|skip, got {on_nonfinite!r}")
    for name in store.names():
        p = store.get(name)
        g = p.grad
        if not np.isfinite(g).all():
            if on_nonfinite == "fail":
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            continue
        if mode == "adam" and weight_decay != 0.0:
            g = g + weight_decay * p.data
        p.step += 1
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if mode == "adamw" and weight_decay != 0.0:
            update = update + weight_decay * p.data
        p.data -= lr * update


def step_lr(epoch: int, base_lr: float, decay: float = 0.9, every: int = 10) -> float:
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    return base_lr * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.json manifest + <stem>.bin little-endian f32 blob.
# Blob layout: for each manifest entry in order, prod(shape) f32 values of
# data, then (when optimizer_state) the same count for m, then for v.
# `offset` in each entry is the element offset of its data block.


def save_checkpoint(stem: str | Path, store: ParameterStore, extra: dict | None = None,
                    include_optimizer: bool = True) -> None:
    stem = Path(stem)
    entries = []
    blobs = []
    offset = 0
    for name in store.names():
        p = store.get(name)
        size = p.data.size
        entries.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "step": p.step})
        blobs.append(p.data.reshape(-1))
        offset += size
        if include_optimizer:
            blobs.append(p.m.reshape(-1))
            blobs.append(p.v.reshape(-1))
            offset += 2 * size
    manifest = {
        "format": "unipre3d-checkpoint",
        "version": 1,
        "dtype": "<f4",
        "optimizer_state": include_optimizer,
        "params": entries,
        "extra": extra or {},
    }
    try:
        blob = (np.concatenate(blobs) if blobs else np.zeros(0)).astype("<f4")
        stem.with_suffix(stem.suffix + ".json").write_text(json.dumps(manifest, indent=1))
        stem.with_suffix(stem.suffix + ".bin").write_bytes(blob.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint {stem}: {e}") from e


def load_checkpoint(stem: str | Path, store: ParameterStore | None = None
                    ) -> tuple[ParameterStore, dict]:
    """Load into `store` (shapes must match) or build a fresh one."""
    stem = Path(stem)
    try:
        manifest = json.loads(stem.with_suffix(stem.suffix + ".json").read_text())
        blob = np.frombuffer(stem.with_suffix(stem.suffix + ".bin").read_bytes(), dtype="<f4")
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint {stem}: {e}") from e
    if manifest.get("format") != "unipre3d-checkpoint":
        raise InputError(f"not a checkpoint manifest: {stem}")
    has_opt = manifest["optimizer_state"]
    if store is None:
        store = ParameterStore()
        fresh = True
    else:
        fresh = False
    for entry in manifest["params"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        data = blob[off:off + size].astype(np.float64).reshape(shape)
        if fresh:
            store.add(name, data)
        else:
            p = store.get(name)
            if p.data.shape != shape:
                raise dim_error(f"checkpoint param {name}", shape, p.data.shape)
            p.data[...] = data
        p = store.get(name)
        p.step = entry.get("step", 0)
        if has_opt:
            p.m[...] = blob[off + size:off + 2 * size].astype(np.float64).reshape(shape)
            p.v[...] = blob[off + 2 * size:off + 3 * size].astype(np.float64).reshape(shape)
    return store, manifest.get("extra", {})
