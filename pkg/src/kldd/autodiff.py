"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the package flows through the Tensor class defined here.
Forward operations append (output, backward_closure) entries to the
active GradTape; GradTape.backward walks the entries in reverse, which
is exactly reverse topological order because entries are recorded in
execution order. Gradients accumulate additively into .grad buffers and
are cleared explicitly.

Broadcasting is intentionally restricted to scalar-tensor combinations
and bias-style adds; everything else must match shapes exactly so that
shape bugs fail loudly.

All forward outputs are checked for NaN/Inf and raise NumericError on
violation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

Array = np.ndarray


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: Array, op: str) -> None:
    # Cheap single-pass probe first: any nan or an unbalanced inf makes the
    # sum non-finite. A finite-looking sum can only hide a problem if values
    # overflow, so the exact scan runs just to confirm a suspicion.
    if np.isfinite(arr.sum()):
        return
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """N-dimensional float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class GradTape:
    """Ordered record of executed ops, replayed backward for adjoints."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[Array], None]]] = []
        self._out_ids: set[int] = set()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward: Callable[[Array], None]) -> None:
        self._entries.append((out, backward))
        self._out_ids.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)=1 and propagate adjoints to every reachable tensor."""
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed; call reset() before reusing it")
        if id(loss) not in self._out_ids:
            raise ValueError("loss tensor was not recorded on this tape")
        self._consumed = True
        _accumulate(loss, np.ones_like(loss.data))
        for out, backward in reversed(self._entries):
            if out.grad is None:
                continue
            backward(out.grad)

    def reset(self) -> None:
        self._entries.clear()
        self._out_ids.clear()
        self._consumed = False


_TAPE_STACK: list[GradTape | None] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def recording(tape: GradTape | None = None):
    """Context manager that makes ops record onto a tape."""
    tape = tape if tape is not None else GradTape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (sampling, metrics)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _from_op(data: Array, op: str, inputs: Sequence, backward: Callable[[Array], None]) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    tape = _active_tape()
    needs = tape is not None and any(
        isinstance(x, Tensor) and x.requires_grad for x in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape.record(out, backward)
    return out


def _tensor_or_const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: Array, shape: tuple) -> Array:
    """Collapse a gradient onto a scalar-shaped operand."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a, b) -> Tensor:
    a, b = _tensor_or_const(a), _tensor_or_const(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.shape))

    return _from_op(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _tensor_or_const(a), _tensor_or_const(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g, b.shape))

    return _from_op(out, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _tensor_or_const(a), _tensor_or_const(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.shape))

    return _from_op(out, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _tensor_or_const(a), _tensor_or_const(b)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _from_op(out, "div", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * s)

    return _from_op(out, "scale", (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + float(s)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g)

    return _from_op(out, "add_scalar", (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _from_op(out, "relu", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * out * (1.0 - out))

    return _from_op(out, "sigmoid", (a,), backward)


def _sigmoid_np(x: Array) -> Array:
    # evaluate in a way that never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _from_op(out, "silu", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out * out))

    return _from_op(out, "tanh", (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _from_op(out, "clip", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            inner = np.sum(g * out, axis=axis, keepdims=True)
            _accumulate(a, (g - inner) * out)

    return _from_op(out, "softmax", (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = np.sum(a.data).reshape(())

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.shape))

    return _from_op(out, "sum_all", (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = (np.sum(a.data) / n).reshape(())

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _from_op(out, "mean_all", (a,), backward)


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum every axis but the first: (N, ...) -> (N,)."""
    if a.ndim < 2:
        raise ValueError("sum_per_sample expects at least 2 dimensions")
    axes = tuple(range(1, a.ndim))
    out = np.sum(a.data, axis=axes)

    def backward(g: Array) -> None:
        if a.requires_grad:
            shape = (a.shape[0],) + (1,) * (a.ndim - 1)
            _accumulate(a, np.broadcast_to(g.reshape(shape), a.shape))

    return _from_op(out, "sum_per_sample", (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = a.size
    out = (np.sum(diff * diff) / n).reshape(())

    def backward(g: Array) -> None:
        coeff = 2.0 * g / n
        if a.requires_grad:
            _accumulate(a, coeff * diff)
        if b.requires_grad:
            _accumulate(b, -coeff * diff)

    return _from_op(out, "mse", (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k)@(k,n), batched (B,m,k)@(B,k,n), or (B,m,k)@(k,n)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ {ad.shape} vs {bd.shape}")
        out = ad @ bd

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, g @ bd.T)
            if b.requires_grad:
                _accumulate(b, ad.T @ g)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"matmul: batched dims differ {ad.shape} vs {bd.shape}")
        out = ad @ bd

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, g @ bd.transpose(0, 2, 1))
            if b.requires_grad:
                _accumulate(b, ad.transpose(0, 2, 1) @ g)

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ {ad.shape} vs {bd.shape}")
        out = ad @ bd

        def backward(g: Array) -> None:
            if a.requires_grad:
                _accumulate(a, g @ bd.T)
            if b.requires_grad:
                _accumulate(b, np.einsum("btk,btn->kn", ad, g))

    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _from_op(out, "matmul", (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ValueError("transpose_last2 needs at least 2 dimensions")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.swapaxes(g, -1, -2))

    return _from_op(out, "transpose_last2", (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: (..., d_in) @ w.T + b with w (d_out, d_in)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight dim {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            gm = g.reshape(-1, g.shape[-1])
            xm = x.data.reshape(-1, x.shape[-1])
            _accumulate(w, gm.T @ xm)
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _from_op(out, "linear", inputs, backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _from_op(out, "reshape", (a,), backward)


def concat_ch(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (N,C_i,H,W) tensors along the channel axis."""
    if not parts:
        raise ValueError("concat_ch: empty input list")
    base = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ValueError("concat_ch: non-channel extents must match")
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def backward(g: Array) -> None:
        pieces = np.split(g, splits, axis=1)
        for p, gp in zip(parts, pieces):
            if p.requires_grad:
                _accumulate(p, gp)

    return _from_op(out, "concat_ch", tuple(parts), backward)


def slice_ch(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 4:
        raise ValueError("slice_ch expects (N,C,H,W)")
    out = a.data[:, start:stop].copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            _accumulate(a, full)

    return _from_op(out, "slice_ch", (a,), backward)


def reverse_ch(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ValueError("reverse_ch expects (N,C,H,W)")
    out = a.data[:, ::-1].copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g[:, ::-1])

    return _from_op(out, "reverse_ch", (a,), backward)


def flatten_tokens(a: Tensor) -> Tensor:
    """(N,C,H,W) -> (N, H*W, C) token layout for attention."""
    if a.ndim != 4:
        raise ValueError("flatten_tokens expects (N,C,H,W)")
    n, c, h, w = a.shape
    out = a.data.transpose(0, 2, 3, 1).reshape(n, h * w, c)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    return _from_op(out, "flatten_tokens", (a,), backward)


def tokens_to_map(a: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N,C,H,W), inverse of flatten_tokens."""
    if a.ndim != 3 or a.shape[1] != h * w:
        raise ValueError("tokens_to_map: token count does not match h*w")
    n, _, c = a.shape
    out = a.data.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g.transpose(0, 2, 3, 1).reshape(n, h * w, c))

    return _from_op(out, "tokens_to_map", (a,), backward)


# ---------------------------------------------------------------------------
# channel/bias broadcast helpers
# ---------------------------------------------------------------------------


def add_channel_map(x: Tensor, s: Tensor) -> Tensor:
    """x (N,C,H,W) + s (N,C) broadcast over space."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ValueError(f"add_channel_map: shapes {x.shape} and {s.shape} do not conform")
    out = x.data + s.data[:, :, None, None]

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g)
        if s.requires_grad:
            _accumulate(s, g.sum(axis=(2, 3)))

    return _from_op(out, "add_channel_map", (x, s), backward)


def mul_channel_map(x: Tensor, s: Tensor) -> Tensor:
    """x (N,C,H,W) * s (N,C) broadcast over space."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ValueError(f"mul_channel_map: shapes {x.shape} and {s.shape} do not conform")
    out = x.data * s.data[:, :, None, None]

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g * s.data[:, :, None, None])
        if s.requires_grad:
            _accumulate(s, (g * x.data).sum(axis=(2, 3)))

    return _from_op(out, "mul_channel_map", (x, s), backward)


def mul_channel_const(x: Tensor, v: Array) -> Tensor:
    """x (N,K,H,W) * constant v (K,); no gradient flows to v."""
    v = _as_f64(v)
    if x.ndim != 4 or v.shape != (x.shape[1],):
        raise ValueError("mul_channel_const: v must be (C,) for x (N,C,H,W)")
    vb = v[None, :, None, None]
    out = x.data * vb

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g * vb)

    return _from_op(out, "mul_channel_const", (x,), backward)


def per_sample_scale(x: Tensor, v: Array) -> Tensor:
    """x (N, ...) * constant v (N,) broadcast over trailing axes."""
    v = _as_f64(v)
    if v.shape != (x.shape[0],):
        raise ValueError("per_sample_scale: v must be (N,)")
    vb = v.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    out = x.data * vb

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g * vb)

    return _from_op(out, "per_sample_scale", (x,), backward)


def mul_scalar_t(x: Tensor, s: Tensor) -> Tensor:
    """x * s where s is a learnable scalar tensor (shape () or (1,))."""
    if s.size != 1:
        raise ValueError("mul_scalar_t: s must hold a single value")
    sv = float(s.data.reshape(-1)[0])
    out = x.data * sv

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g * sv)
        if s.requires_grad:
            _accumulate(s, np.sum(g * x.data).reshape(s.shape))

    return _from_op(out, "mul_scalar_t", (x, s), backward)


def cumsum_ch(a: Tensor) -> Tensor:
    """Cumulative sum along the channel axis of (N,C,H,W)."""
    if a.ndim != 4:
        raise ValueError("cumsum_ch expects (N,C,H,W)")
    out = np.cumsum(a.data, axis=1)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.cumsum(g[:, ::-1], axis=1)[:, ::-1])

    return _from_op(out, "cumsum_ch", (a,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (N,C,H,W) with per-channel affine."""
    if x.ndim != 4:
        raise ValueError("group_norm expects (N,C,H,W)")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: gamma/beta must be (C,)")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g: Array) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(g * xhat, axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, np.sum(g, axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xh).sum(axis=2, keepdims=True)
            dx = (dxhat - s1 / m - xh * s2 / m) * inv
            _accumulate(x, dx.reshape(n, c, h, w))

    return _from_op(out, "group_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) or (C,H,W) input with (O,C,kh,kw) kernels."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    squeeze = x.ndim == 3
    xin = reshape(x, (1,) + x.shape) if squeeze else x
    if xin.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = xin.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {cw}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias must be ({o},), got {b.shape}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xin.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xin.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # Lay taps-by-channels along GEMM rows and batch-by-space along columns
    # so forward and both backward contractions are single 2-D GEMMs that
    # reuse this one packed buffer.
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(
        c * kh * kw, n * ho * wo
    )
    wm = w.data.reshape(o, c * kh * kw)
    out2 = wm @ cols
    if b is not None:
        out2 += b.data[:, None]
    out = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g: Array) -> None:
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        if b is not None and b.requires_grad:
            _accumulate(b, gm.sum(axis=1))
        if w.requires_grad:
            _accumulate(w, (gm @ cols.T).reshape(o, c, kh, kw))
        if xin.requires_grad:
            dcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                hi = i + stride * ho
                for j in range(kw):
                    wj = j + stride * wo
                    dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            _accumulate(xin, dx)

    inputs = (xin, w) if b is None else (xin, w, b)
    res = _from_op(out, "conv2d", inputs, backward)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (N,C,H,W)."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2: needs even spatial extents, got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def backward(g: Array) -> None:
        if not x.requires_grad:
            return
        dx = np.zeros_like(blocks)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(2):
            for j in range(2):
                sl = blocks[:, :, :, i, :, j]
                hit = (sl == out) & ~taken
                dx[:, :, :, i, :, j] = g * hit
                taken |= hit
        _accumulate(x, dx.reshape(n, c, h, w))

    return _from_op(out, "max_pool2", (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on (N,C,H,W)."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"avg_pool2: needs even spatial extents, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g: Array) -> None:
        if x.requires_grad:
            gd = np.broadcast_to(
                (g * 0.25)[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2)
            ).reshape(n, c, h, w)
            _accumulate(x, gd)

    return _from_op(out, "avg_pool2", (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial maximum."""
    if x.ndim != 4:
        raise ValueError("global_max_pool expects (N,C,H,W)")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g: Array) -> None:
        if x.requires_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
            _accumulate(x, dflat.reshape(x.shape))

    return _from_op(out, "global_max_pool", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects (N,C,H,W)")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _from_op(out, "global_avg_pool", (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (N,C,H,W)."""
    if x.ndim != 4:
        raise ValueError("upsample2 expects (N,C,H,W)")
    n, c, h, w = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)
    ).reshape(n, c, 2 * h, 2 * w)

    def backward(g: Array) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _from_op(out, "upsample2", (x,), backward)


def _pool3(x: Tensor, mode: str) -> Tensor:
    """3x3 stride-1 min/max pool; borders use the valid neighborhood only."""
    if x.ndim != 4:
        raise ValueError(f"pool3_{mode} expects (N,C,H,W)")
    n, c, h, w = x.shape
    fill = -np.inf if mode == "max" else np.inf
    reducer = np.maximum if mode == "max" else np.minimum
    xp = np.full((n, c, h + 2, w + 2), fill)
    xp[:, :, 1:-1, 1:-1] = x.data
    out = None
    for di in range(3):
        for dj in range(3):
            sl = xp[:, :, di:di + h, dj:dj + w]
            out = sl.copy() if out is None else reducer(out, sl, out=out)

    def backward(g: Array) -> None:
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp)
        taken = np.zeros(out.shape, dtype=bool)
        for di in range(3):
            for dj in range(3):
                sl = xp[:, :, di:di + h, dj:dj + w]
                hit = (sl == out) & ~taken
                dxp[:, :, di:di + h, dj:dj + w] += g * hit
                taken |= hit
        _accumulate(x, dxp[:, :, 1:-1, 1:-1])

    return _from_op(out, f"pool3_{mode}", (x,), backward)


def pool3_max(x: Tensor) -> Tensor:
    return _pool3(x, "max")


def pool3_min(x: Tensor) -> Tensor:
    return _pool3(x, "min")


# ---------------------------------------------------------------------------
# sampling at fractional coordinates
# ---------------------------------------------------------------------------


def bilinear_sample(feature: Tensor, coords) -> Tensor:
    """Sample (C,H,W) features at fractional (row, col) points -> (C, n).

    Out-of-bounds coordinates are clamped to the valid grid before
    interpolation. coords may be a plain sequence of (row, col) pairs or
    a Tensor of shape (n, 2); in the latter case gradients flow to the
    coordinates as well as to the feature map.

    Args:
        feature: (C,H,W) tensor.
        coords: sequence of (row, col) or Tensor (n, 2).

    Returns:
        (C, n) tensor of interpolated values.
    """
    if feature.ndim != 3:
        raise ValueError("bilinear_sample expects a (C,H,W) feature map")
    c, h, w = feature.shape
    coord_t = coords if isinstance(coords, Tensor) else None
    pts = coords.data if coord_t is not None else _as_f64(list(coords)).reshape(-1, 2)
    if pts.size == 0:
        return _from_op(np.zeros((c, 0)), "bilinear_sample", (feature,), lambda g: None)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("bilinear_sample: coords must be (n, 2) pairs")
    if not np.all(np.isfinite(pts)):
        raise NumericError("bilinear_sample: non-finite coordinate")

    rows = np.clip(pts[:, 0], 0.0, h - 1.0)
    cols = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0

    f = feature.data
    v00 = f[:, r0, c0]
    v01 = f[:, r0, c1]
    v10 = f[:, r1, c0]
    v11 = f[:, r1, c1]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g: Array) -> None:
        if feature.requires_grad:
            dflat = np.zeros((c, h * w))
            np.add.at(dflat, (slice(None), r0 * w + c0), g * w00)
            np.add.at(dflat, (slice(None), r0 * w + c1), g * w01)
            np.add.at(dflat, (slice(None), r1 * w + c0), g * w10)
            np.add.at(dflat, (slice(None), r1 * w + c1), g * w11)
            _accumulate(feature, dflat.reshape(c, h, w))
        if coord_t is not None and coord_t.requires_grad:
            drow = ((1 - fc) * (v10 - v00) + fc * (v11 - v01)) * g
            dcol = ((1 - fr) * (v01 - v00) + fr * (v11 - v10)) * g
            rmask = (pts[:, 0] > 0.0) & (pts[:, 0] < h - 1.0)
            cmask = (pts[:, 1] > 0.0) & (pts[:, 1] < w - 1.0)
            dpts = np.stack(
                [drow.sum(axis=0) * rmask, dcol.sum(axis=0) * cmask], axis=1
            )
            _accumulate(coord_t, dpts)

    inputs = (feature,) if coord_t is None else (feature, coord_t)
    return _from_op(out, "bilinear_sample", inputs, backward)


def line_gather(feat: Tensor, coord: Tensor, shifts, deform_axis: str) -> Tensor:
    """Gather deformable line-kernel taps from a batched feature map.

    For each tap k the sample point has one integer along-axis shift
    (shifts[k]) and one fractional cross-axis coordinate (coord). With
    deform_axis "row" the float coordinate is the row and the column is
    x + shifts[k]; "col" swaps the roles. Both coordinates clamp to the
    border, and interpolation is linear along the deformed axis (exactly
    bilinear sampling when one coordinate is integral).

    Args:
        feat: (N,C,H,W) features.
        coord: (N,K,H,W) absolute fractional coordinates on the deformed axis.
        shifts: K integer along-axis offsets.
        deform_axis: "row" or "col", the axis coord refers to.

    Returns:
        (N,C,K,H,W) gathered values.
    """
    if feat.ndim != 4 or coord.ndim != 4:
        raise ValueError("line_gather expects feat (N,C,H,W) and coord (N,K,H,W)")
    n, c, h, w = feat.shape
    k = coord.shape[1]
    if coord.shape != (n, k, h, w):
        raise ValueError(f"line_gather: coord shape {coord.shape} does not match feature grid")
    shifts = np.asarray(shifts, dtype=np.int64)
    if shifts.shape != (k,):
        raise ValueError("line_gather: shifts must have one entry per tap")
    if deform_axis not in ("row", "col"):
        raise ValueError("line_gather: deform_axis must be 'row' or 'col'")

    extent = h if deform_axis == "row" else w
    cc = np.clip(coord.data, 0.0, extent - 1.0)
    i0 = np.floor(cc).astype(np.int64)
    i1 = np.minimum(i0 + 1, extent - 1)
    frac = cc - i0

    if deform_axis == "row":
        sx = np.clip(np.arange(w)[None, :] + shifts[:, None], 0, w - 1)  # (K,W)
        idx0 = i0 * w + sx[None, :, None, :]
        idx1 = i1 * w + sx[None, :, None, :]
    else:
        sy = np.clip(np.arange(h)[None, :] + shifts[:, None], 0, h - 1)  # (K,H)
        idx0 = sy[None, :, :, None] * w + i0
        idx1 = sy[None, :, :, None] * w + i1

    flat = feat.data.reshape(n, c, h * w)
    khw = k * h * w
    take0 = np.take_along_axis(flat, idx0.reshape(n, 1, khw), axis=2)
    take1 = np.take_along_axis(flat, idx1.reshape(n, 1, khw), axis=2)
    diff = (take1 - take0).reshape(n, c, k, h, w)
    v0 = take0.reshape(n, c, k, h, w)
    fb = frac[:, None]
    out = v0 + fb * diff

    def backward(g: Array) -> None:
        if feat.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            gidx0 = (idx0.reshape(n, 1, khw) + base).ravel()
            gidx1 = (idx1.reshape(n, 1, khw) + base).ravel()
            g5 = g.reshape(n, c, k, h, w)
            w0 = (1.0 - frac)[:, None] * g5
            dflat = np.bincount(gidx0, weights=w0.ravel(), minlength=n * c * h * w)
            w1 = fb * g5
            dflat += np.bincount(gidx1, weights=w1.ravel(), minlength=n * c * h * w)
            _accumulate(feat, dflat.reshape(n, c, h, w))
        if coord.requires_grad:
            dcoord = (g.reshape(n, c, k, h, w) * diff).sum(axis=1)
            inside = (coord.data > 0.0) & (coord.data < extent - 1.0)
            _accumulate(coord, dcoord * inside)

    return _from_op(out, "line_gather", (feat, coord), backward)


def tap_contract(gathered: Tensor, tap_w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Contract gathered taps (N,C,K,H,W) against weights (O,C,K) -> (N,O,H,W)."""
    if gathered.ndim != 5 or tap_w.ndim != 3:
        raise ValueError("tap_contract expects (N,C,K,H,W) and (O,C,K)")
    n, c, k, h, w = gathered.shape
    o, cw, kw = tap_w.shape
    if (cw, kw) != (c, k):
        raise ValueError(f"tap_contract: weight dims {tap_w.shape} do not match taps {(c, k)}")
    if bias is not None and bias.shape != (o,):
        raise ValueError("tap_contract: bias must be (O,)")
    g2 = gathered.data.reshape(n, c * k, h * w)
    wm = tap_w.data.reshape(o, c * k)
    out = np.matmul(wm, g2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, o, h, w)

    def backward(g: Array) -> None:
        gm = g.reshape(n, o, h * w)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gm.sum(axis=(0, 2)))
        if tap_w.requires_grad:
            dwm = np.tensordot(gm, g2, axes=([0, 2], [0, 2]))
            _accumulate(tap_w, dwm.reshape(o, c, k))
        if gathered.requires_grad:
            dg2 = np.matmul(wm.T, gm)
            _accumulate(gathered, dg2.reshape(n, c, k, h, w))

    inputs = (gathered, tap_w) if bias is None else (gathered, tap_w, bias)
    return _from_op(out, "tap_contract", inputs, backward)


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float | Tensor], x: Tensor, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function at x.

    Args:
        f: deterministic scalar-valued function of one tensor.
        x: evaluation point; not modified.
        h: step size (> 0).

    Returns:
        Tensor of d f / d x_i, same shape as x.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")

    def evaluate(arr: Array) -> float:
        with no_grad():
            val = f(Tensor(arr))
        out = val.item() if isinstance(val, Tensor) else float(val)
        if not np.isfinite(out):
            raise NumericError("finite_diff_grad: non-finite function value")
        return out

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
