"""Dense numpy tensors with a reverse-mode tape.

Only the operations the enhancement model needs are provided. Each op is a
single graph node with a hand-written vector-Jacobian product; the heavy ones
(GRU over a whole sequence, biased attention) are fused so that the Python
overhead stays proportional to the sequence length rather than to the number
of elementwise operations.

A tape is only recorded when at least one input requires a gradient, so
tensors built under :func:`no_grad` (or from plain arrays) carry no graph and
can be shared freely between threads for inference.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class InputTooShortError(ValueError):
    pass


class KernelConfigError(ValueError):
    pass


_grad_enabled = contextvars.ContextVar("avse_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based (Philox-4x64) generator keyed by a tuple of integers.

    The same key tuple yields the same stream on every platform numpy supports,
    which is what the training loop relies on for resumable determinism.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Create the output of an op. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap scalars/arrays, matching the dtype of whichever side is already a tensor."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- graph traversal -----------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so calling this twice
    without zeroing doubles them.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss or an explicit grad, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# -- elementwise & shape ops --------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor.from_op(np.where(keep, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * keep,), "relu")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |a|
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (np.where(inside, g, 0.0),), "clip")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(np.array(x.data[idx]), (x,), bw, "getitem")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return Tensor.from_op(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor.from_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear expects last extent {w.shape[1]}, got input {x.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ w.data.T
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ flat
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, parents, bw, "linear")


# -- convolution -------------------------------------------------------

def _as_tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, Iterable):
        t = tuple(int(i) for i in v)
        if len(t) != n:
            raise DimensionError(f"expected {n} values, got {t}")
        return t
    return (int(v),) * n


def conv(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Valid cross-correlation in N spatial dims (after optional zero padding).

    ``x`` is (B, C_in, *spatial), ``w`` is (C_out, C_in, *kernel).
    """
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise DimensionError(f"conv: input {x.shape} incompatible with weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv: input channels {x.shape[1]} != weight channels {w.shape[1]} "
                             f"(input {x.shape}, weight {w.shape})")
    ks = w.shape[2:]
    st = _as_tuple(stride, nd)
    pd = _as_tuple(padding, nd)
    if any(s < 1 for s in st):
        raise KernelConfigError(f"stride must be positive, got {st}")
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pd]) if any(pd) else x.data
    sp = xp.shape[2:]
    if any(n < k for n, k in zip(sp, ks)):
        raise InputTooShortError(f"conv: input extent {sp} shorter than kernel {ks}")
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(sp, ks, st))
    sp_axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, ks, axis=sp_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in st)]
    k_axes = list(range(2 + nd, 2 + 2 * nd))
    out = np.tensordot(win, w.data, axes=([1] + k_axes, [1] + list(range(2, 2 + nd))))
    out = np.moveaxis(out, -1, 1)

    def bw(g):
        g_sp = [0] + list(range(2, 2 + nd))
        gw = np.tensordot(g, win, axes=(g_sp, g_sp))
        dwin = np.tensordot(g, w.data, axes=([1], [0]))  # (B, *out, C_in, *k)
        dwin = np.moveaxis(dwin, 1 + nd, 1)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for kidx in itertools.product(*(range(k) for k in ks)):
            sl = tuple(slice(k0, k0 + s * (o - 1) + 1, s) for k0, s, o in zip(kidx, st, out_sp))
            dxp[(slice(None), slice(None)) + sl] += dwin[(Ellipsis,) + kidx]
        if any(pd):
            dxp = dxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pd, x.shape[2:]))]
        return dxp, gw

    return Tensor.from_op(np.ascontiguousarray(out), (x, w), bw, f"conv{nd}d")


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D correlation: output length ``(T - K) // stride + 1``."""
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[2] < w.shape[2]:
        raise InputTooShortError(f"conv1d: input length {x.shape[2]} < kernel {w.shape[2]}")
    return conv(x, w, stride=stride)


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d`. ``w`` is (C_in, C_out, K); output length ``(T-1)*stride + K``.

    Passing the very weight array used by ``conv1d`` gives the exact adjoint.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv_transpose1d: input {x.shape} incompatible with weight {w.shape}")
    if stride < 1:
        raise KernelConfigError(f"stride must be positive, got {stride}")
    B, _, T = x.shape
    _, c_out, K = w.shape
    t_out = (T - 1) * stride + K
    y = np.tensordot(x.data, w.data, axes=([1], [0]))  # (B, T, C_out, K)
    y = np.moveaxis(y, 1, 2)  # (B, C_out, T, K)
    out = np.zeros((B, c_out, t_out), dtype=np.result_type(x.dtype, w.dtype))
    for k in range(K):
        out[:, :, k:k + stride * (T - 1) + 1:stride] += y[..., k]

    def bw(g):
        win = sliding_window_view(g, K, axis=2)[:, :, ::stride]  # (B, C_out, T, K)
        gx = np.moveaxis(np.tensordot(win, w.data, axes=([1, 3], [1, 2])), -1, 1)
        gw = np.tensordot(x.data, win, axes=([0, 2], [0, 2]))
        return gx, gw

    return Tensor.from_op(out, (x, w), bw, "conv_transpose1d")


# -- recurrent ----------------------------------------------------------

def _gru_step(xi, h, w_hh, b_hh, H):
    gh = h @ w_hh.T + b_hh
    r = _sigmoid(xi[:, :H] + gh[:, :H])
    z = _sigmoid(xi[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(xi[:, 2 * H:] + r * ghn)
    return (1.0 - z) * n + z * h, r, z, n, ghn


def _gru_step_grad(g, h, r, z, n, ghn):
    """Gradients w.r.t. the input-side and hidden-side pre-activations and h_prev."""
    dn = g * (1.0 - z)
    dz = g * (h - n)
    dh = g * z
    dan = dn * (1.0 - n * n)
    dar = dan * ghn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgi = np.concatenate([dar, daz, dan], axis=1)
    dgh = np.concatenate([dar, daz, dan * r], axis=1)
    return dgi, dgh, dh


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU update with gate order (reset, update, candidate).

    r = s(W_ir x + b_ir + W_hr h + b_hr), z likewise,
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn)), h' = (1 - z) n + z h.
    """
    H = w_hh.shape[1]
    if w_ih.shape[0] != 3 * H or x.shape[1] != w_ih.shape[1] or h.shape[1] != H:
        raise DimensionError(f"gru_cell: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    xi = x.data @ w_ih.data.T + b_ih.data
    out, r, z, n, ghn = _gru_step(xi, h.data, w_hh.data, b_hh.data, H)

    def bw(g):
        dgi, dgh, dh = _gru_step_grad(g, h.data, r, z, n, ghn)
        return (dgi @ w_ih.data, dh + dgh @ w_hh.data, dgi.T @ x.data, dgh.T @ h.data,
                dgi.sum(axis=0), dgh.sum(axis=0))

    return Tensor.from_op(out, (x, h, w_ih, w_hh, b_ih, b_hh), bw, "gru_cell")


def gru_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Run a GRU from a zero state over axis 1 of ``x`` (N, L, D); returns all states (N, L, H).

    Equivalent to chaining :func:`gru_cell`, but as a single graph node.
    """
    N, L, D = x.shape
    H = w_hh.shape[1]
    if w_ih.shape != (3 * H, D):
        raise DimensionError(f"gru_sequence: input dim {D} vs w_ih {w_ih.shape}")
    xi = (x.data.reshape(N * L, D) @ w_ih.data.T + b_ih.data).reshape(N, L, 3 * H)
    hs = np.zeros((N, L + 1, H), dtype=xi.dtype)
    keep = grad_enabled() and (x.requires_grad or w_ih.requires_grad or w_hh.requires_grad)
    cache = []
    for t in range(L):
        hs[:, t + 1], r, z, n, ghn = _gru_step(xi[:, t], hs[:, t], w_hh.data, b_hh.data, H)
        if keep:
            cache.append((r, z, n, ghn))
    out = hs[:, 1:]

    def bw(g):
        dgi = np.empty((N, L, 3 * H), dtype=g.dtype)
        dgh = np.empty((N, L, 3 * H), dtype=g.dtype)
        carry = np.zeros((N, H), dtype=g.dtype)
        for t in range(L - 1, -1, -1):
            r, z, n, ghn = cache[t]
            dgi[:, t], dgh[:, t], dh = _gru_step_grad(g[:, t] + carry, hs[:, t], r, z, n, ghn)
            carry = dh + dgh[:, t] @ w_hh.data
        gi2 = dgi.reshape(N * L, 3 * H)
        gh2 = dgh.reshape(N * L, 3 * H)
        gx = (gi2 @ w_ih.data).reshape(N, L, D)
        return (gx, gi2.T @ x.data.reshape(N * L, D), gh2.T @ hs[:, :-1].reshape(N * L, H),
                gi2.sum(axis=0), gh2.sum(axis=0))

    return Tensor.from_op(np.ascontiguousarray(out), (x, w_ih, w_hh, b_ih, b_hh), bw, "gru_sequence")


# -- normalisation / attention -------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Standardise over the last axis, then apply a learnable scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.from_op(out, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the exact identity when ``training`` is false."""
    if not 0.0 <= p < 1.0:
        raise KernelConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise KernelConfigError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              scale: float | None = None, return_weights: bool = False):
    """softmax(q k^T * scale + bias) v over the last two axes.

    ``bias`` has shape (..., T_k) and is added to every query row. Fused for
    memory: only the unnormalised exponentials and their row sums are kept,
    and normalisation is applied to the (small) output instead of the
    T x T matrix.
    """
    dh = q.shape[-1]
    if k.shape[-1] != dh or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(dh)
    scale = q.dtype.type(scale)
    if bias is not None and bias.shape[-1] != k.shape[-2]:
        raise DimensionError(f"attention bias {bias.shape} does not match key length {k.shape[-2]}")
    # non-finite inputs are reported below rather than through numpy warnings
    with np.errstate(invalid="ignore", over="ignore"):
        e = (q.data * scale) @ np.swapaxes(k.data, -1, -2)
        if bias is not None:
            e += bias.data[..., None, :]
        e -= e.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
        z = e.sum(axis=-1, keepdims=True)
        out = (e @ v.data) / z
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("attention produced non-finite values (non-finite inputs?)")

    def bw(g):
        gz = g / z
        gv = np.swapaxes(e, -1, -2) @ gz
        ds = gz @ np.swapaxes(v.data, -1, -2)
        c = np.einsum("...ij,...ij->...i", ds, e)[..., None] / z
        ds -= c
        ds *= e
        gbias = _unbroadcast(ds.sum(axis=-2), bias.shape) if bias is not None else None
        gq = (ds @ k.data) * scale
        gk = np.swapaxes(ds, -1, -2) @ (q.data * scale)
        return (_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape), gbias)

    parents = (q, k, v, bias) if bias is not None else (q, k, v)
    res = Tensor.from_op(out, parents, (lambda g: bw(g)[:len(parents)]), "attention")
    return (res, e / z) if return_weights else res


# -- finite-difference checking -----------------------------------------

def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``arr`` (mutated in place and restored).

    Entries not listed in ``indices`` are left as NaN.
    """
    g = np.full(arr.shape, np.nan)
    idxs = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in idxs:
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def gradcheck(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape and central-difference gradients.

    The error is taken per tensor as ``max|a - n| / max(max|a|, max|n|)`` over
    the checked entries; with ``max_entries`` a seeded random subset of each
    tensor is checked instead of every entry.
    """
    for t in tensors:
        t.zero_grad()
    out = f()
    out.backward()
    rng = make_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]

        def scalar():
            with no_grad():
                return float(f().data)

        num = numerical_grad(scalar, t.data, eps, all_idx)
        sel = tuple(np.array(all_idx).T)
        a, n = analytic[sel], num[sel]
        denom = max(np.abs(a).max(), np.abs(n).max())
        if denom == 0.0:
            continue
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst
