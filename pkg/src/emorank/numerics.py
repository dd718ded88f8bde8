"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Every operation that participates in training is defined here as a pure
function over :class:`Tensor` values. Forward calls record their inputs on
the output tensor; :meth:`Tensor.backward` replays the implicit graph in
reverse topological order and accumulates gradients into every tensor that
requires them. The op surface is deliberately small: exactly what the
intensity extractor and its losses need, nothing more.

Float64 is the oracle precision (all finite-difference checks run in it);
float32 is supported for training throughput. An op inherits the dtype of
its inputs.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ValueError):
    """A NaN or Inf showed up where only finite values are legal."""


def _promote(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode gradients.

    ``requires_grad`` marks a trainable leaf; tensors produced by ops derive
    the flag from their parents so constant subgraphs cost nothing on the
    backward pass. ``grad`` is populated by :meth:`backward` and has the same
    shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", parents=()):
        self.data = _promote(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def validate_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor from op '{self.op}'")

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor.

        ``seed`` defaults to ones, so calling it on a scalar loss gives plain
        gradients. Visits each graph node exactly once.
        """
        ComputeGraph.trace(self).backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, op={self.op!r})"

    # Operator sugar for the common arithmetic; the named functions below are
    # the canonical surface.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class ComputeGraph:
    """Topologically ordered record of the ops behind one output tensor.

    Invariants: the backward sweep visits each node exactly once, and a
    tensor that does not feed the traced output keeps a zero (None) grad.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order, seen, stack = [], set(), [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor, seed=None):
        if seed is None:
            seed = np.ones_like(root.data)
        _accumulate(root, np.asarray(seed, dtype=root.data.dtype))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data, parents, op, backward):
    out = Tensor(data, op=op, parents=tuple(parents))
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._backward = backward
    else:
        out._parents = ()
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Also accepts a 1-D ``b`` broadcast across the rows of
    a 2-D ``a`` (per-channel vector added over time), the one broadcast the
    extractor needs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (a.data.ndim == 2 and b.shape == a.shape[-1:]):
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    row_broadcast = a.shape != b.shape

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0) if row_broadcast else g)

    return _make(a.data + b.data, (a, b), "add", backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g)

    return _make(a.data + c, (a,), "add_const", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), "neg", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(as_tensor(b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), "scale", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands; 1-D ``a`` acts as a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2:
        raise ValueError(f"matmul expects 1-D/2-D x 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")

    def backward(g):
        if a.data.ndim == 1:
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        else:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), "transpose", backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= a.shape[-1]):
        raise ValueError(f"column slice [{lo}:{hi}] out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        _accumulate(a, full)

    return _make(a.data[..., lo:hi].copy(), (a,), "slice_cols", backward)


def concat_cols(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[-1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, "concat_cols", backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), "relu", backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), "tanh", backward)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # exp on the negative branch only, so large |x| cannot overflow
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = np.asarray(out_data, dtype=x.dtype)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), "sigmoid", backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where nothing clipped."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), "clip", backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: keep with probability 1-p and rescale, so eval mode
    needs no correction. Deterministic given the generator state."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)

    def backward(g):
        _accumulate(a, g * keep)

    return _make(a.data * keep, (a,), "dropout", backward)


# ---------------------------------------------------------------------------
# normalization and attention building blocks


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"log_softmax axis {axis} out of range for {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ValueError(f"layer_norm gain/bias must match last dim of {a.shape}")
    d = a.shape[-1]
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        _accumulate(gain, (g * xhat).sum(axis=0) if a.data.ndim == 2 else g * xhat)
        _accumulate(bias, g.sum(axis=0) if a.data.ndim == 2 else g)
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv_std)

    return _make(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm", backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """1-D convolution over time with "same" zero padding.

    ``x`` is (T, C_in), ``kernel`` is (K, C_in, C_out); output is (T, C_out).
    Implemented as an im2col matmul so BLAS does the heavy lifting.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ValueError(f"conv1d expects (T,Cin) x (K,Cin,Cout), got {x.shape} x {kernel.shape}")
    t_len, c_in = x.shape
    k, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, kernel {kc_in}")
    pad_lo = (k - 1) // 2
    pad_hi = k - 1 - pad_lo
    padded = np.zeros((t_len + k - 1, c_in), dtype=x.data.dtype)
    padded[pad_lo:pad_lo + t_len] = x.data
    # (T, K*Cin): row t holds the K taps around frame t, channel-major per tap
    cols = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)  # (T, Cin, K)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(t_len, k * c_in)
    w2d = kernel.data.reshape(k * c_in, c_out)
    out_data = cols @ w2d
    if bias is not None:
        if bias.shape != (c_out,):
            raise ValueError(f"conv1d bias must be ({c_out},), got {bias.shape}")
        out_data = out_data + bias.data

    def backward(g):
        _accumulate(kernel, (cols.T @ g).reshape(k, c_in, c_out))
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))
        gcols = (g @ w2d.T).reshape(t_len, k, c_in)
        gpad = np.zeros_like(padded)
        for tap in range(k):
            gpad[tap:tap + t_len] += gcols[:, tap, :]
        _accumulate(x, gpad[pad_lo:pad_lo + t_len])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, parents, "conv1d", backward)


def embedding_lookup(table: Tensor, index: int) -> Tensor:
    """Select one row of an embedding table; the gradient scatters back."""
    index = int(index)
    if not 0 <= index < table.shape[0]:
        raise ValueError(f"embedding index {index} out of range for table {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        full[index] = g
        _accumulate(table, full)

    return _make(table.data[index].copy(), (table,), "embedding_lookup", backward)


# ---------------------------------------------------------------------------
# reductions


def mean_over_time(x: Tensor) -> Tensor:
    """Arithmetic mean over axis 0: (T, C) -> (C,)."""
    if x.data.ndim != 2:
        raise ValueError(f"mean_over_time expects a (T, C) matrix, got {x.shape}")
    t_len = x.shape[0]

    def backward(g):
        _accumulate(x, np.broadcast_to(g / t_len, x.shape))

    return _make(x.data.mean(axis=0), (x,), "mean_over_time", backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(), (a,), "sum_all", backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(a.data.mean(), (a,), "mean_all", backward)


def pick(a: Tensor, index: int) -> Tensor:
    """Scalar element of a 1-D tensor, differentiable."""
    if a.data.ndim != 1:
        raise ValueError(f"pick expects a 1-D tensor, got {a.shape}")
    index = int(index)
    if not 0 <= index < a.shape[0]:
        raise ValueError(f"pick index {index} out of range for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _make(a.data[index], (a,), "pick", backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the bias-correction step counter."""

    def __init__(self, params: dict):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction, applied in place.

    ``params`` maps names to Tensors; ``grads`` maps the same names to arrays
    (typically ``tensor.grad``). Raises :class:`NonFiniteError` on a NaN/Inf
    gradient. Returns the mutated ``(params, state)`` pair.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grad(fn, tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued ``fn`` w.r.t. ``tensor``.

    ``fn`` takes no arguments and must read ``tensor.data``; the perturbation
    is applied in place and restored. Independent of the backward pass by
    construction, so it serves as the gradient oracle in tests.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn())
        flat[i] = orig - h
        lo = float(fn())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(tensor.data.shape)
