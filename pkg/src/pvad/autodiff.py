"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs are tracked on it.
Node ids are assigned in creation order, so the append-only node list is
already topologically sorted and :func:`backward` simply walks it in
decreasing id order.

Only the broadcasting needed by the models is supported: a 1-D bias vector
may be added to (or multiplied into) the rows of a matrix.  Everything else
requires matching shapes; per-sequence vectors are expanded over time with
:func:`expand_time`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DimensionError, LabelError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class Node:
    op: str
    inputs: tuple
    shape: tuple
    dtype: np.dtype
    backward: Optional[Callable] = None


_TAPES: list["Tape"] = []


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, array, name: str | None = None) -> "Tensor":
        """Register ``array`` as a differentiable leaf (a parameter)."""
        data = np.asarray(array)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        node = Node(op="leaf" if name is None else f"leaf:{name}", inputs=(),
                    shape=data.shape, dtype=data.dtype)
        self.nodes.append(node)
        return Tensor(data, self.next_id - 1, self)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.backward is None]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense real array plus an optional handle into a tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: Tape | None = None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        self.data = data
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.tape is tape for t in inputs):
        return Tensor(out)
    ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    tape.nodes.append(Node(op, ids, out.shape, out.dtype, backward))
    return Tensor(out, tape.next_id - 1, tape)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf on ``tape``.

    Leaves the loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
    out: dict[int, np.ndarray] = {}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        node = tape.nodes[nid]
        if node.backward is None:
            out[nid] = g if g is not None else np.zeros(node.shape, node.dtype)
            continue
        if g is None:
            continue
        for i, gi in zip(node.inputs, node.backward(g)):
            if i is None or gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for nid, node in enumerate(tape.nodes[loss.node_id + 1:], start=loss.node_id + 1):
        if node.backward is None:
            out[nid] = np.zeros(node.shape, node.dtype)
    return out


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), bwd)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when ``b`` is a bias vector over the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _sum_rows(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_broadcast("add", a, b)

    def bwd(g):
        return g, (_sum_rows(g) if bias else g)

    return _record("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_broadcast("sub", a, b)

    def bwd(g):
        return g, -(_sum_rows(g) if bias else g)

    return _record("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def bwd(g):
        gb = g * A
        return g * B, (_sum_rows(gb) if bias else gb)

    return _record("mul", A * B, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    return _record("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / _SQRT2))
    out = (X * cdf).astype(X.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return ((g * (cdf + X * pdf)).astype(X.dtype, copy=False),)

    return _record("gelu", out, (x,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _record("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis of ``x`` to zero mean, unit variance, then scale/shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if d < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + X.dtype.type(eps))
    xhat = xc * inv
    G = gain.data

    def bwd(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_rows(g * xhat), _sum_rows(g)

    return _record("layer_norm", xhat * G + bias.data, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {old} -> {shape}") from e
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from e
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", out, tensors, bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    if not 0 <= start < stop <= shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for {shape}")

    def bwd(g):
        full = np.zeros(shape, dtype)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", x.data[..., start:stop], (x,), bwd)


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        full = np.zeros(shape, dtype)
        full[i] = g
        return (full,)

    return _record("index", x.data[i], (x,), bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return _record("stack", out, tensors, lambda g: tuple(g))


def expand_time(x: Tensor, steps: int) -> Tensor:
    """Repeat per-sequence rows ``(B, n)`` over time into ``(B, steps, n)``."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"expand_time expects (B, n), got {x.shape}")
    out = np.repeat(x.data[:, None, :], steps, axis=1)
    return _record("expand_time", out, (x,), lambda g: (g.sum(axis=1),))


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Weighted mean over rows of ``-log softmax(logits)[label]``.

    ``weights`` defaults to one per row; zero-weight rows (padding) may carry
    any label value.  Gradient is ``w * (softmax - onehot) / sum(w)``.
    """
    logits = as_tensor(logits)
    Z = logits.data
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise DimensionError(f"softmax_cross_entropy expects (T, C) logits, got {Z.shape}")
    T, C = Z.shape
    y = np.asarray(labels)
    if y.shape != (T,):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {T} frames")
    w = np.ones(T, Z.dtype) if weights is None else np.asarray(weights, Z.dtype)
    active = w != 0
    bad = np.flatnonzero(active & ((y < 0) | (y >= C)))
    if bad.size:
        raise LabelError(f"label {y[bad[0]]} at frame {bad[0]} outside [0, {C})")
    norm = w.sum()
    if norm <= 0:
        raise LabelError("no frame carries positive weight")
    yc = np.where(active, y, 0).astype(np.int64)
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(T), yc]
    loss = np.asarray((w * nll).sum() / norm, dtype=Z.dtype)

    def bwd(g):
        d = np.exp(logp)
        d[np.arange(T), yc] -= 1
        return (d * (w / norm * g)[:, None],)

    return _record("softmax_cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# recurrent ops; gate order in packed weights is (input, forget, cell, output)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """One LSTM step built from primitive ops.  Rows of ``x`` are sequences."""
    x, h, c, w_ih, w_hh, b = map(as_tensor, (x, h, c, w_ih, w_hh, b))
    H = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 4 * H) or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, "
            f"w_hh {w_hh.shape}, b {b.shape}")
    if c.shape != h.shape:
        raise DimensionError(f"lstm_cell: c {c.shape} vs h {h.shape}")
    z = add(add(matmul(x, w_ih), b), matmul(h, w_hh))
    i = sigmoid(slice_last(z, 0, H))
    f = sigmoid(slice_last(z, H, 2 * H))
    g = tanh(slice_last(z, 2 * H, 3 * H))
    o = sigmoid(slice_last(z, 3 * H, 4 * H))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_step_numpy(zx: np.ndarray, h: np.ndarray, c: np.ndarray, w_hh: np.ndarray):
    """Untaped LSTM step given the precomputed input projection ``zx = x W_ih + b``."""
    H = h.shape[-1]
    z = zx + h @ w_hh
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c + i * g
    h = o * np.tanh(c)
    return h, c


def lstm_recurrence(zx: Tensor, w_hh: Tensor) -> Tensor:
    """Fused LSTM over a batch of sequences from zero initial state.

    ``zx`` is the precomputed input projection ``x W_ih + b`` of shape
    ``(B, T, 4H)``; returns hidden states ``(B, T, H)``.  Backward is full BPTT.
    """
    zx, w_hh = as_tensor(zx), as_tensor(w_hh)
    if zx.data.ndim != 3:
        raise DimensionError(f"lstm_recurrence expects (B, T, 4H), got {zx.shape}")
    B, T, G = zx.shape
    H = G // 4
    if G != 4 * H or w_hh.shape != (H, G):
        raise DimensionError(f"lstm_recurrence: zx {zx.shape} vs w_hh {w_hh.shape}")
    Zx, W = zx.data, w_hh.data
    dt = Zx.dtype
    gates = np.empty((T, B, G), dt)
    cs = np.empty((T + 1, B, H), dt)
    hs = np.empty((T + 1, B, H), dt)
    cs[0] = 0
    hs[0] = 0
    for t in range(T):
        z = Zx[:, t] + hs[t] @ W
        a = gates[t]
        a[:, :H] = _sigmoid(z[:, :H])
        a[:, H:2 * H] = _sigmoid(z[:, H:2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        cs[t + 1] = a[:, H:2 * H] * cs[t] + a[:, :H] * a[:, 2 * H:3 * H]
        hs[t + 1] = a[:, 3 * H:] * np.tanh(cs[t + 1])
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def bwd(g):
        dzx = np.empty((B, T, G), dt)
        dW = np.zeros_like(W)
        dh_next = np.zeros((B, H), dt)
        dc_next = np.zeros((B, H), dt)
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = np.tanh(cs[t + 1])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc * tc)
            dz = dzx[:, t]
            dz[:, :H] = dc * gg * i * (1 - i)
            dz[:, H:2 * H] = dc * cs[t] * f * (1 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1 - o)
            dW += hs[t].T @ dz
            dh_next = dz @ W.T
            dc_next = dc * f
        return dzx, dW

    return _record("lstm_recurrence", out, (zx, w_hh), bwd)
