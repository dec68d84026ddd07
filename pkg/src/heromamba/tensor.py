"""Dense tensors with define-by-run reverse-mode autodiff.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` topologically sorts the reachable nodes into a
:class:`ComputationGraph` and replays the closures in reverse.

Images and feature maps use the N x C x H x W layout throughout.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(ValueError, FloatingPointError):
    """An operation was handed NaN or infinite values."""


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------


class ComputationGraph:
    """Reachable differentiable ops of ``root`` in topological order.

    Inputs always precede the ops that consume them; :meth:`run` walks the
    list in reverse and visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def run(self, seed: np.ndarray, retain_graph: bool = False) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()


def backward(loss: Tensor, retain_graph: bool = False) -> ComputationGraph:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    graph = ComputationGraph(loss)
    graph.run(np.ones_like(loss.data), retain_graph=retain_graph)
    return graph


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(out, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(x: Tensor) -> Tensor:
    # sign(0) = 0 gives the zero subgradient at ties
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (x,), bw, "silu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            # basic indexing selects each element at most once
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(x.data, axis))
    return _make(out, (x,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s along axis 1."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(
                f"concat_channels {name} mismatch: {a.shape[axis]} vs {b.shape[axis]}"
            )
    return concat([a, b], axis=1)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is in x out."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win  # N, C, Ho, Wo, kh, kw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``weight`` has shape ``out_ch x (in_ch / groups) x kH x kW``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    oc, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"invalid conv2d geometry stride={stride} padding={padding} groups={groups}")
    if c % groups or oc % groups:
        raise ValueError(f"channels in={c} out={oc} not divisible by groups={groups}")
    if c // groups != cg:
        raise ValueError(
            f"conv2d input channel mismatch: input has {c} channels, weight expects {cg * groups}"
        )
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv2d bias must have shape ({oc},), got {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    wd = weight.data
    depthwise = groups == c and oc == c
    if groups == 1:
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    elif depthwise:
        out = np.einsum("nchwij,cij->nchw", win, wd[:, 0])
    else:
        og = oc // groups
        out = np.empty((n, oc, ho, wo), dtype=np.result_type(x.data, wd))
        for gi in range(groups):
            wsl = win[:, gi * cg:(gi + 1) * cg]
            out[:, gi * og:(gi + 1) * og] = np.tensordot(
                wsl, wd[gi * og:(gi + 1) * og], axes=([1, 4, 5], [1, 2, 3])
            ).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        # grad w.r.t. the window tensor, then scatter back (col2im)
        if groups == 1:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gwin = np.tensordot(g, wd, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            gwin = gwin.transpose(0, 3, 1, 2, 4, 5)
        elif depthwise:
            gw = np.einsum("nchw,nchwij->cij", g, win)[:, None]
            gwin = g[:, :, :, :, None, None] * wd[:, 0][None, :, None, None, :, :]
        else:
            og = oc // groups
            gw = np.empty_like(wd)
            gwin = np.empty(win.shape, dtype=g.dtype)
            for gi in range(groups):
                gsl = g[:, gi * og:(gi + 1) * og]
                wsl = win[:, gi * cg:(gi + 1) * cg]
                gw[gi * og:(gi + 1) * og] = np.tensordot(gsl, wsl, axes=([0, 2, 3], [0, 2, 3]))
                gwin[:, gi * cg:(gi + 1) * cg] = np.tensordot(
                    gsl, wd[gi * og:(gi + 1) * og], axes=([1], [0])
                ).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        span_h = stride * (ho - 1) + 1
        span_w = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += gwin[..., i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw.astype(wd.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    if x.ndim != 4:
        raise ValueError(f"upsample expects NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_nearest2x")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics normalise ``x`` (population
    variance) and the running buffers are updated in place with the unbiased
    variance. In eval mode the running buffers are used.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d channel mismatch: input has {c}, gamma {gamma.shape}, beta {beta.shape}")
    count = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running_mean is not None:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise ValueError("eval-mode batch_norm2d needs running statistics")
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (gxhat - s1 / count - xhat * s2 / count) * inv[None, :, None, None]
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm2d")


def layer_norm_channels(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the channel axis independently at every pixel."""
    c = x.shape[1]
    if weight.shape != (c,):
        raise ValueError(f"layer norm expects {c} channels, got weight {weight.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    wv = weight.data[None, :, None, None]
    out = xhat * wv + bias.data[None, :, None, None]

    def bw(g):
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * wv
        gx = (gxhat - gxhat.mean(axis=1, keepdims=True)
              - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)) * inv
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "layer_norm")

