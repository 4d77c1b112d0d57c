"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the data; every differentiable op wires a backward closure onto
its output so that ``backward()`` can replay the tape in reverse topological
order. Float64 is the default element type, float32 is selectable for faster
training runs.

Convolution uses the cross-correlation convention (no kernel flip), like
every modern deep learning framework; the naive reference in the test suite
uses the same convention.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError, StateError

DEFAULT_DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is a row-major numpy array (float32 or float64). ``grad`` stays
    ``None`` until a backward pass deposits something; accumulation across
    fan-out is additive, so callers must ``zero_grads`` between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: Sequence["Tensor"] = ()):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[], None] = _noop
        self._backward_ran = False

    # --- basics ---
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        """NaN/Inf is an explicit checkable error state, never silent."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what} (op={self.op!r}, shape={self.shape})")
        return self

    def _accum(self, g: np.ndarray, owned: bool = False) -> None:
        # owned means the closure allocated g itself and shares it with nobody,
        # so it is safe to adopt without a defensive copy
        if self.grad is None:
            if owned and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # --- backward pass ---
    def backward(self) -> None:
        """Reverse-mode pass from a scalar. One pass per forward per loss."""
        backward(self)

    # --- elementwise arithmetic ---
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out = _result(self.data + other.data, "add", (self, other))

        def _back():
            g = out.grad
            if self.requires_grad:
                gg = _unbroadcast(g, self.shape)
                self._accum(gg, owned=gg is not g)
            if other.requires_grad:
                gg = _unbroadcast(g, other.shape)
                other._accum(gg, owned=gg is not g)
        out._backward = _back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out = _result(self.data * other.data, "mul", (self, other))

        def _back():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape), owned=True)
        out._backward = _back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) + (-self)

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        out = _result(self.data / other.data, "div", (self, other))

        def _back():
            g = out.grad
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape), owned=True)
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data * other.data), other.shape), owned=True)
        out._backward = _back
        return out

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = _result(self.data ** p, "pow", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * p * self.data ** (p - 1), owned=True)
        out._backward = _back
        return out

    # --- shape manipulation ---
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _result(self.data.reshape(shape), "reshape", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad.reshape(self.shape))
        out._backward = _back
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        out = _result(np.transpose(self.data, axes), "transpose", (self,))
        inverse = np.argsort(axes)

        def _back():
            if self.requires_grad:
                self._accum(np.transpose(out.grad, inverse))
        out._backward = _back
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx) -> "Tensor":
        out = _result(self.data[idx], "getitem", (self,))

        def _back():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accum(g)
        out._backward = _back
        return out

    # --- reductions ---
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), "sum", (self,))

        def _back():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape))
        out._backward = _back
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # --- elementwise nonlinearities ---
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = _result(y, "exp", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * y, owned=True)
        out._backward = _back
        return out

    def log(self) -> "Tensor":
        out = _result(np.log(self.data), "log", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad / self.data, owned=True)
        out._backward = _back
        return out

    def sigmoid(self) -> "Tensor":
        # numerically symmetric form, no overflow for large |x|
        y = np.where(self.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(self.data))),
                     np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))
        y = y.astype(self.dtype, copy=False)
        out = _result(y, "sigmoid", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * y * (1.0 - y), owned=True)
        out._backward = _back
        return out

    def silu(self) -> "Tensor":
        s = _sigmoid_arr(self.data)
        out = _result(self.data * s, "silu", (self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * (s * (1.0 + self.data * (1.0 - s))), owned=True)
        out._backward = _back
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = _result(np.clip(self.data, lo, hi), "clip", (self,))
        mask = (self.data >= lo) & (self.data <= hi)

        def _back():
            if self.requires_grad:
                self._accum(out.grad * mask, owned=True)
        out._backward = _back
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def matmul(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def conv2d(self, kernel: "Tensor", stride: int = 1, padding: int = 0,
               groups: int = 1) -> "Tensor":
        return conv2d(self, kernel, stride, padding, groups)


def _noop() -> None:
    return None


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor]) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents)


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    e = np.exp(-ax)
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- graph and backward pass ---

class Graph:
    """Ordered record of the primitive ops behind one output tensor.

    Nodes are listed in topological order: every input precedes its
    consumer. A graph drives exactly one backward pass.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.used = False

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op name, input tensor ids, output tensor id) per node."""
        return [(n.op, tuple(id(p) for p in n._parents), id(n)) for n in self.nodes]


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be scalar. Accumulation across fan-out is additive;
    frozen tensors (requires_grad False) receive no grad.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_ran:
        raise ContractError("backward already ran for this loss; rebuild the graph")
    if graph is None:
        graph = Graph.trace(loss)
    if graph.used:
        raise ContractError("this graph already drove a backward pass")
    graph.used = True
    loss._backward_ran = True
    loss._accum(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node.requires_grad and node.grad is not None:
            node._backward()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --- linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy-style batch broadcasting on leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, "matmul", (a, b))

    def _back():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), owned=True)
    out._backward = _back
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _back():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])
    out._backward = _back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, "softmax", (x,))

    def _back():
        if x.requires_grad:
            g = out.grad
            x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)), owned=True)
    out._backward = _back
    return out


def silu(x: Tensor) -> Tensor:
    return x.silu()


# --- convolution ---

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation over NCHW input.

    kernel is O x (C/groups) x kh x kw. Output spatial side is
    floor((H + 2*padding - kh) / stride) + 1. Three compute paths share one
    contract: plain matmul for 1x1 kernels, im2col + BLAS for dense kernels,
    and per-tap shift-and-add for grouped/depthwise kernels.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ContractError(f"bad conv2d hyperparameters stride={stride} padding={padding} groups={groups}")
    n, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    if c % groups or o % groups:
        raise DimensionError(f"channels {c} and filters {o} must be divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"kernel expects {cg} channels per group, input provides {c // groups}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}")
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (w + 2 * padding - kw) // stride + 1

    if groups == 1 and kh == 1 and kw == 1:
        return _conv1x1(x, kernel, stride, padding, hp, wp)
    if groups == 1:
        return _conv_im2col(x, kernel, stride, padding, hp, wp)
    return _conv_grouped(x, kernel, stride, padding, groups, hp, wp)


def _conv1x1(x: Tensor, kernel: Tensor, stride: int, padding: int, hp: int, wp: int) -> Tensor:
    n, c, h, w = x.shape
    o = kernel.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xs = xp[:, :, ::stride, ::stride] if stride > 1 else xp
    cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)  # (N*H'*W', C)
    kmat = kernel.data.reshape(o, c)
    y = (cols @ kmat.T).reshape(n, hp, wp, o).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(y), "conv2d", (x, kernel))

    def _back():
        g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(-1, o)
        if kernel.requires_grad:
            kernel._accum((g2.T @ cols).reshape(kernel.shape), owned=True)
        if x.requires_grad:
            gx_cols = (g2 @ kmat).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            if stride == 1 and padding == 0:
                x._accum(np.ascontiguousarray(gx_cols), owned=True)
            else:
                gxp = np.zeros_like(xp)
                gxp[:, :, ::stride, ::stride] = gx_cols
                x._accum(gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp, owned=not padding)
    out._backward = _back
    return out


def _conv_im2col(x: Tensor, kernel: Tensor, stride: int, padding: int, hp: int, wp: int) -> Tensor:
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, H', W', C*kh*kw) contiguous patch matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * hp * wp, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    y = (cols @ kmat.T).reshape(n, hp, wp, o).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(y), "conv2d", (x, kernel))

    def _back():
        g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(n * hp * wp, o)
        if kernel.requires_grad:
            kernel._accum((g2.T @ cols).reshape(kernel.shape), owned=True)
        if x.requires_grad:
            gcols = (g2 @ kmat).reshape(n, hp, wp, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * hp:stride, j:j + stride * wp:stride] += gcols[:, :, i, j]
            x._accum(gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp, owned=not padding)
    out._backward = _back
    return out


def _conv_grouped(x: Tensor, kernel: Tensor, stride: int, padding: int, groups: int,
                  hp: int, wp: int) -> Tensor:
    n, c, h, w = x.shape
    o, cg, kh, kw = kernel.shape
    og = o // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xg = xp.reshape(n, groups, cg, *xp.shape[2:])
    kg = kernel.data.reshape(groups, og, cg, kh, kw)
    y = np.zeros((n, groups, og, hp, wp), dtype=x.dtype)
    taps = []  # (i, j, input view) reused by both gradient closures
    for i in range(kh):
        for j in range(kw):
            xv = xg[:, :, :, i:i + stride * hp:stride, j:j + stride * wp:stride]
            taps.append((i, j, xv))
            y += np.einsum("ngcxy,goc->ngoxy", xv, kg[:, :, :, i, j])
    out = _result(np.ascontiguousarray(y.reshape(n, o, hp, wp)), "conv2d", (x, kernel))

    def _back():
        g = out.grad.reshape(n, groups, og, hp, wp)
        if kernel.requires_grad:
            gk = np.empty_like(kg)
            for i, j, xv in taps:
                gk[:, :, :, i, j] = np.einsum("ngoxy,ngcxy->goc", g, xv)
            kernel._accum(gk.reshape(kernel.shape), owned=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gxp_g = gxp.reshape(n, groups, cg, *xp.shape[2:])
            for i, j, _ in taps:
                gxp_g[:, :, :, i:i + stride * hp:stride, j:j + stride * wp:stride] += \
                    np.einsum("ngoxy,goc->ngcxy", g, kg[:, :, :, i, j])
            x._accum(gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp, owned=not padding)
    out._backward = _back
    return out


# --- batch normalization ---

class BatchNormState:
    """Per-channel running statistics plus the momentum/eps constants."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE, initialized: bool = False,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = initialized
        self.momentum = momentum
        self.eps = eps

    @classmethod
    def identity(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        """Ready-for-eval state: mean 0, variance 1."""
        return cls(channels, dtype=dtype, initialized=True)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype,
                           initialized=self.initialized, momentum=self.momentum, eps=self.eps)
        s.running_mean[:] = self.running_mean
        s.running_var[:] = self.running_var
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes with batch statistics and updates the running
    stats; eval mode uses the running stats only. A train-mode batch with a
    single element per channel falls back to the running stats to avoid
    zero-variance collapse.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    count = n * h * w
    if count < 1:
        raise DimensionError("batch_norm needs at least one element per channel")
    use_batch_stats = mode == "train" and count > 1
    if not use_batch_stats and not state.initialized:
        raise StateError("batch_norm running statistics are uninitialized; run a train-mode batch first")

    axes = (0, 2, 3)
    if use_batch_stats:
        m = x.data.mean(axis=axes)
        xm = x.data - m[None, :, None, None]
        v = np.einsum("nchw,nchw->c", xm, xm) / count
        state.running_mean[:] = state.momentum * state.running_mean + (1 - state.momentum) * m
        state.running_var[:] = state.momentum * state.running_var + (1 - state.momentum) * v
        state.initialized = True
    else:
        m = state.running_mean.astype(x.dtype, copy=False)
        v = state.running_var.astype(x.dtype, copy=False)
        xm = x.data - m[None, :, None, None]

    inv = 1.0 / np.sqrt(v + state.eps)
    xhat = xm * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _result(y, "batch_norm", (x, gamma, beta))

    def _back():
        g = out.grad
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes), owned=True)
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes), owned=True)
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if use_batch_stats:
                inv4 = inv[None, :, None, None]
                dvar = (gxhat * xm).sum(axis=axes) * (-0.5) * inv ** 3
                dmean = -(gxhat.sum(axis=axes)) * inv
                gx = (gxhat * inv4
                      + dvar[None, :, None, None] * 2.0 * xm / count
                      + dmean[None, :, None, None] / count)
                x._accum(gx, owned=True)
            else:
                x._accum(gxhat * inv[None, :, None, None], owned=True)
    out._backward = _back
    return out


# --- gradient checking ---

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be scalar-valued and deterministic. The relative error
    denominator is max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    if eps <= 0:
        raise ContractError("grad_check eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(probe.data.copy(), dtype=x.dtype)).item()
        flat[i] = orig - eps
        lo = f(Tensor(probe.data.copy(), dtype=x.dtype)).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- initializers ---

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=DEFAULT_DTYPE, requires_grad: bool = True) -> Tensor:
    """Fan-in scaled normal init for conv and FC weights."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
