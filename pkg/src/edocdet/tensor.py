"""Dense float tensors with reverse-mode automatic differentiation.

Storage is float32 by default; building a graph from float64 arrays keeps
float64 throughout, which is how the 64-bit gradient-checking mode works.
Every forward op validates that its output is finite and records a backward
closure when any input requires gradients. Gradients accumulate with ``+=``
and are cleared only by an explicit call (``zero_grads`` / optimizer).
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """Operation parameters are invalid (bad groups, empty axis set, ...)."""


class GraphError(RuntimeError):
    """The autograd graph was used incorrectly (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """N-dimensional float array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
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
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data outside the graph (no copy)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._prev = ()
        out._backward = None
        out._op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; each node visited exactly once."""
        if self.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; the free functions below are the primary API.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self.dtype))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value, dtype) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _node(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward=None) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    grad_inputs = tuple(t for t in inputs if t.requires_grad)
    out.requires_grad = bool(grad_inputs)
    out._prev = grad_inputs
    out._backward = backward if grad_inputs else None
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    """Equal shapes, or equal ndim with singleton axes expanding."""
    if sa == sb:
        return True
    if len(sa) != len(sb):
        return False
    return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    return g.sum(axis=axes, keepdims=True)


def _normalize_axes(axes, ndim: int, op: str) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(axes) == 0:
        raise ConfigError(f"{op}: empty axis set")
    if len(set(axes)) != len(axes) or any(a >= ndim for a in axes):
        raise ConfigError(f"{op}: invalid axes {axes} for ndim {ndim}")
    return axes


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), "mul", backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    data = a.data * s

    def backward(g):
        a.accumulate_grad(g * s)

    return _node(data, (a,), "scale", backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ConfigError(f"elementwise: unknown kind '{kind}'")
    return ops[kind](a, b)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        a.accumulate_grad(g * np.sign(a.data))

    return _node(data, (a,), "abs", backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _node(data, (a,), "reshape", backward)


def take_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along axis 1 of an NxCxHxW tensor."""
    if a.ndim != 4:
        raise ShapeError(f"take_channels: expected 4-D tensor, got {a.shape}")
    if not 0 <= start < stop <= a.shape[1]:
        raise ConfigError(f"take_channels: bad range [{start}, {stop}) for C={a.shape[1]}")
    data = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a.accumulate_grad(full)

    return _node(data, (a,), "take_channels", backward)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return _node(data, (a,), "relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backward(g):
        a.accumulate_grad(g * data * (1 - data))

    return _node(data, (a,), "sigmoid", backward)


def h_swish(a: Tensor) -> Tensor:
    """x * min(max(0, x + 3), 6) / 6 with the matching piecewise derivative."""
    x = a.data
    data = x * np.clip(x + 3, 0, 6) / 6

    def backward(g):
        dx = np.where(x <= -3, 0.0, np.where(x >= 3, 1.0, (2 * x + 3) / 6)).astype(x.dtype)
        a.accumulate_grad(g * dx)

    return _node(data, (a,), "h_swish", backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "h_swish": h_swish}


def activation(a: Tensor, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ConfigError(f"activation: unknown kind '{kind}'")
    return _ACTIVATIONS[kind](a)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


# ---------------------------------------------------------------------------
# reductions and normalizers


def reduce(a: Tensor, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, a.ndim, "reduce") if a.ndim else ()
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if kind == "sum":
        data = a.data.sum(axis=axes, keepdims=keepdims)
    elif kind == "mean":
        data = a.data.mean(axis=axes, keepdims=keepdims)
    elif kind == "abs_mean":
        data = np.abs(a.data).mean(axis=axes, keepdims=keepdims)
    else:
        raise ConfigError(f"reduce: unknown kind '{kind}'")

    def backward(g):
        gk = g if keepdims or not axes else np.expand_dims(g, axes)
        if kind == "sum":
            a.accumulate_grad(np.broadcast_to(gk, a.shape).copy())
        elif kind == "mean":
            a.accumulate_grad(np.broadcast_to(gk / count, a.shape).copy())
        else:
            a.accumulate_grad(np.broadcast_to(gk / count, a.shape) * np.sign(a.data))

    return _node(data, (a,), f"reduce_{kind}", backward)


def softmax_over(a: Tensor, axes) -> Tensor:
    """Softmax normalized jointly over the given axes, with max-subtraction."""
    axes = _normalize_axes(axes, a.ndim, "softmax_over")
    shifted = a.data - a.data.max(axis=axes, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=axes, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axes, keepdims=True)
        a.accumulate_grad(data * (g - dot))

    return _node(data, (a,), "softmax", backward)


def log_softmax_over(a: Tensor, axes) -> Tensor:
    axes = _normalize_axes(axes, a.ndim, "log_softmax_over")
    shifted = a.data - a.data.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axes, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        a.accumulate_grad(g - soft * g.sum(axis=axes, keepdims=True))

    return _node(data, (a,), "log_softmax", backward)


def layer_norm(a: Tensor, num_axes: int = 1, eps: float = 1e-5,
               gain: Optional[Tensor] = None, bias: Optional[Tensor] = None) -> Tensor:
    """Zero-mean unit-variance over the last ``num_axes`` axes, then optional affine."""
    if not 1 <= num_axes <= a.ndim:
        raise ConfigError(f"layer_norm: cannot normalize {num_axes} axes of ndim {a.ndim}")
    axes = tuple(range(a.ndim - num_axes, a.ndim))
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n < 1:
        raise ConfigError("layer_norm: empty normalized extent")
    norm_shape = a.shape[a.ndim - num_axes:]
    for t, label in ((gain, "gain"), (bias, "bias")):
        if t is not None and t.shape != norm_shape:
            raise ShapeError(f"layer_norm: {label} shape {t.shape} != normalized shape {norm_shape}")
    lead = tuple(range(a.ndim - num_axes))
    mu = a.data.mean(axis=axes, keepdims=True)
    var = a.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    y = (a.data - mu) * inv
    data = y
    if gain is not None:
        data = data * gain.data
    if bias is not None:
        data = data + bias.data

    def backward(g):
        gy = g * gain.data if gain is not None else g
        if gain is not None and gain.requires_grad:
            gain.accumulate_grad((g * y).sum(axis=lead) if lead else g * y)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=lead) if lead else g.copy())
        if a.requires_grad:
            m1 = gy.mean(axis=axes, keepdims=True)
            m2 = (gy * y).mean(axis=axes, keepdims=True)
            a.accumulate_grad(inv * (gy - m1 - y * m2))

    inputs = tuple(t for t in (a, gain, bias) if t is not None)
    return _node(data, inputs, "layer_norm", backward)


def global_avg_pool(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NxCxHxW, got {a.shape}")
    n, c, h, w = a.shape
    data = a.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g / (h * w), a.shape).copy())

    return _node(data, (a,), "global_avg_pool", backward)


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of rows: (N, D_in) @ (D_out, D_in)^T + bias."""
    _check_same_dtype(x, weight, "linear")
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        data = data + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _node(data, inputs, "linear", backward)


# ---------------------------------------------------------------------------
# convolution


def _conv_windows(xp: np.ndarray, L: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(xp, (n, ho, wo, c, L, L),
                      (s[0], s[2] * stride, s[3] * stride, s[1], s[2], s[3]))


def _conv_group_forward(xp_g: np.ndarray, k_g: np.ndarray, stride: int, ho: int, wo: int):
    n = xp_g.shape[0]
    og, cg, L, _ = k_g.shape
    cols = _conv_windows(xp_g, L, stride, ho, wo).reshape(n * ho * wo, cg * L * L)
    out = cols @ k_g.reshape(og, -1).T
    return out.reshape(n, ho, wo, og).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation. groups=C_in with C_out=C_in is depthwise; 1x1 is pointwise.

    Grouped evaluation runs the same per-group kernel as a groups=1 call on the
    sliced channels, so a depthwise conv is bit-identical to composing
    independent single-channel convs.
    """
    _check_same_dtype(x, kernel, "conv2d")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, c_ker, L, L2 = kernel.shape
    if L != L2:
        raise ShapeError(f"conv2d: kernel must be square, got {L}x{L2}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride/padding {stride}/{padding}")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ConfigError(f"conv2d: groups={groups} does not divide channels {c_in}->{c_out}")
    if c_ker != c_in // groups:
        raise ShapeError(f"conv2d: kernel expects {c_ker} channels per group, input has {c_in // groups}")
    ho = (h + 2 * padding - L) // stride + 1
    wo = (w + 2 * padding - L) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {L} too large for input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cg = c_in // groups
    og = c_out // groups
    outs = []
    saved_cols = []
    for gi in range(groups):
        out_g, cols_g = _conv_group_forward(xp[:, gi * cg:(gi + 1) * cg],
                                            kernel.data[gi * og:(gi + 1) * og],
                                            stride, ho, wo)
        outs.append(out_g)
        saved_cols.append(cols_g if (x.requires_grad or kernel.requires_grad) else None)
    data = outs[0] if groups == 1 else np.concatenate(outs, axis=1)

    def backward(g):
        gx_pad = np.zeros_like(xp) if x.requires_grad else None
        for gi in range(groups):
            g_g = g[:, gi * og:(gi + 1) * og]
            gcols = g_g.transpose(0, 2, 3, 1).reshape(n * ho * wo, og)
            if kernel.requires_grad:
                gk = (gcols.T @ saved_cols[gi]).reshape(og, cg, L, L)
                kernel.accumulate_grad(_pad_channel_grad(gk, kernel.shape, gi * og))
            if x.requires_grad:
                gc = (gcols @ kernel.data[gi * og:(gi + 1) * og].reshape(og, -1))
                gc = gc.reshape(n, ho, wo, cg, L, L)
                dst = gx_pad[:, gi * cg:(gi + 1) * cg]
                for u in range(L):
                    for v in range(L):
                        dst[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                            gc[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        if x.requires_grad:
            if padding:
                x.accumulate_grad(gx_pad[:, :, padding:padding + h, padding:padding + w])
            else:
                x.accumulate_grad(gx_pad)

    return _node(data, (x, kernel), "conv2d", backward)


def _pad_channel_grad(gk: np.ndarray, full_shape: tuple, offset: int) -> np.ndarray:
    if gk.shape == full_shape:
        return gk
    out = np.zeros(full_shape, dtype=gk.dtype)
    out[offset:offset + gk.shape[0]] = gk
    return out


# ---------------------------------------------------------------------------
# classification losses (kept as primitives for numerical stability)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy from raw logits; targets carry no gradient."""
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits: shapes {logits.shape} != {targets.shape}")
    x, z = logits.data, targets.data
    per = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    data = np.asarray(per.mean(), dtype=logits.dtype)

    def backward(g):
        logits.accumulate_grad(g * (_sigmoid_np(x) - z) / x.size)

    return _node(data, (logits,), "bce_with_logits", backward)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
