"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a contiguous float32/float64 numpy array plus an optional
gradient buffer. Operations record a closure-based backward graph; calling
``backward()`` on a scalar loss topologically sweeps the graph once and
accumulates gradients into every ``requires_grad`` leaf.

Broadcasting is deliberately restricted to the two cases this codebase
needs: a scalar against anything, and a per-channel vector ``(C,)`` against
a leading-channel tensor ``(C, ...)``. Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NumericsError",
    "no_grad",
    "debug_checks",
    "set_debug_checks",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "square",
    "softplus",
    "exp",
    "log",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "stack",
    "select",
    "conv3d",
    "conv_transpose3d",
    "instance_norm3d",
    "global_avg_pool",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class GraphError(RuntimeError):
    """Misuse of the backward graph (non-scalar loss, consumed graph, ...)."""


class NumericsError(ArithmeticError):
    """Non-finite values detected at an operation boundary."""


_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf checks at op boundaries; returns the previous setting."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = bool(enabled)
    return prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    prev = set_debug_checks(enabled)
    try:
        yield
    finally:
        set_debug_checks(prev)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float tensor with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._spent = False

    # -- basic introspection ------------------------------------------------

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op!r})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from this scalar.

        The graph is single-use: interior nodes are marked consumed and their
        closures dropped, so a second ``backward()`` through them raises.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._spent:
            raise GraphError("backward() already called on this graph; rebuild it before differentiating again")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._spent:
                raise GraphError(f"graph already consumed at op '{node._op}'")
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._spent = True
                node._backward = None
                node._parents = ()
                node.grad = None
        self._spent = True

    # -- operator sugar -----------------------------------------------------

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
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


# -- graph plumbing ----------------------------------------------------------


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
             make_backward: Callable[[], Callable[[np.ndarray], None]] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._spent = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = make_backward()
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if _debug_checks:
        _check_finite(data, op)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_views(a: Tensor, b: Tensor, op: str) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Position both operands for numpy broadcasting under the restricted rules.

    Returns (a_view, b_view, result_shape). Raises ShapeError for anything
    outside {equal shapes, scalar, per-channel vector vs leading channel}.
    """
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return a.data, b.data, sa
    if a.data.size == 1:
        return a.data.reshape(()), b.data, sb
    if b.data.size == 1:
        return a.data, b.data.reshape(()), sa
    if len(sb) == 1 and len(sa) > 1 and sb[0] == sa[0]:
        return a.data, b.data.reshape(sb + (1,) * (len(sa) - 1)), sa
    if len(sa) == 1 and len(sb) > 1 and sa[0] == sb[0]:
        return a.data.reshape(sa + (1,) * (len(sb) - 1)), b.data, sb
    raise ShapeError(
        f"op '{op}' cannot broadcast shapes {sa} and {sb}: "
        "shapes must match, or one operand must be a scalar or per-channel vector"
    )


def _unbroadcast(g: np.ndarray, operand_shape: tuple[int, ...], result_shape: tuple[int, ...]) -> np.ndarray:
    if operand_shape == result_shape:
        return g
    if int(np.prod(operand_shape, dtype=np.int64)) == 1:
        return g.sum().reshape(operand_shape)
    # per-channel vector: sum out everything but the leading axis
    return g.sum(axis=tuple(range(1, g.ndim))).reshape(operand_shape)


# -- elementwise binary ops ---------------------------------------------------


def _binary(a, b, op: str, fwd, grad_a, grad_b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"op '{op}' needs at least one Tensor operand")
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    va, vb, out_shape = _broadcast_views(a, b, op)
    data = fwd(va, vb)

    def make_backward():
        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(grad_a(g, va, vb, data), a.data.shape, out_shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(grad_b(g, va, vb, data), b.data.shape, out_shape))
        return backward

    return _from_op(data, (a, b), op, make_backward)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y, o: g,
                   lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y, o: g * y,
                   lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


# -- elementwise unary ops ----------------------------------------------------


def _unary(x: Tensor, op: str, data: np.ndarray, grad) -> Tensor:
    def make_backward():
        def backward(g: np.ndarray) -> None:
            _accumulate(x, grad(g))
        return backward
    return _from_op(data, (x,), op, make_backward)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, "neg", -x.data, lambda g: -g)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, "tanh", y, lambda g: g * (1.0 - y * y))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _unary(x, "sigmoid", y, lambda g: g * y * (1.0 - y))


def leaky_relu(x, negative_slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    mask = x.data >= 0
    y = np.where(mask, x.data, x.data * negative_slope)
    return _unary(x, "leaky_relu", y, lambda g: g * np.where(mask, 1.0, negative_slope))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, "square", x.data * x.data, lambda g: g * 2.0 * x.data)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated in log-sum-exp stabilized form."""
    x = _as_tensor(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _unary(x, "softplus", y, lambda g: g * _stable_sigmoid(x.data))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, "exp", y, lambda g: g * y)


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _unary(x, "log", np.log(x.data), lambda g: g / x.data)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_ELEMENTWISE_UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "square": square,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name. Binary kinds require ``b``."""
    if kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' is binary and needs two operands")
        return _ELEMENTWISE_BINARY[kind](a, b)
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' is unary")
        return _ELEMENTWISE_UNARY[kind](a)
    raise ValueError(f"unknown elementwise op '{kind}'")


# -- reductions ---------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _unary(x, "sum", data, lambda g: np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))


def tmean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _unary(x, "mean", data, lambda g: np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False))


# -- shape ops ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)
    return _unary(x, "reshape", data, lambda g: g.reshape(x.data.shape))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_backward():
        def backward(g: np.ndarray) -> None:
            index = [slice(None)] * g.ndim
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])
        return backward

    return _from_op(data, tuple(ts), "concat", make_backward)


def stack(tensors: Iterable[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of zero tensors")
    base = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != base:
            raise ShapeError(f"stack requires equal shapes, got {base} and {t.data.shape}")
    data = np.stack([t.data for t in ts], axis=0)

    def make_backward():
        def backward(g: np.ndarray) -> None:
            for i, t in enumerate(ts):
                _accumulate(t, g[i])
        return backward

    return _from_op(data, tuple(ts), "stack", make_backward)


def select(x: Tensor, index: int) -> Tensor:
    """Pick one slice along the leading axis."""
    x = _as_tensor(x)
    data = x.data[index].copy()

    def make_backward():
        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(x.data)
            full[index] = g
            _accumulate(x, full)
        return backward

    return _from_op(data, (x,), "select", make_backward)


# -- 3D convolution kernels ----------------------------------------------------


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    cin, d, h, w = x.shape
    xp = np.zeros((cin, d + 2 * p, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p:p + d, p:p + h, p:p + w] = x
    return xp


def _im2col(xp: np.ndarray, kernel: tuple[int, int, int], stride: int,
            out_sp: tuple[int, int, int]) -> np.ndarray:
    # one strided view + reshape-copy; col[(ci,kz,ky,kx), (z,y,x)] =
    # xp[ci, z*stride+kz, y*stride+ky, x*stride+kx]
    cin = xp.shape[0]
    kd, kh, kw = kernel
    od, oh, ow = out_sp
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(cin, kd, kh, kw, od, oh, ow),
        strides=(s0, s1, s2, s3, stride * s1, stride * s2, stride * s3),
        writeable=False)
    return view.reshape(cin * kd * kh * kw, od * oh * ow)


def _col2im(gcol: np.ndarray, padded_shape: tuple[int, ...], kernel: tuple[int, int, int],
            stride: int, out_sp: tuple[int, int, int]) -> np.ndarray:
    cin = padded_shape[0]
    kd, kh, kw = kernel
    od, oh, ow = out_sp
    g6 = gcol.reshape(cin, kd, kh, kw, od, oh, ow)
    gxp = np.zeros(padded_shape, dtype=gcol.dtype)
    for iz in range(kd):
        for iy in range(kh):
            for ix in range(kw):
                gxp[:, iz:iz + stride * od:stride,
                    iy:iy + stride * oh:stride,
                    ix:ix + stride * ow:stride] += g6[:, iz, iy, ix]
    return gxp


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """3D convolution over a (C_in, D, H, W) tensor.

    weight: (C_out, C_in, kd, kh, kw); bias: (C_out,) or None.
    Output spatial extent per axis: (extent + 2*padding - kernel) // stride + 1.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, D, H, W), got {x.shape}")
    if weight.data.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-D, got {weight.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv3d stride must be 1 or 2, got {stride}")
    cin, d, h, w = x.data.shape
    cout, cin_w, kd, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d channel mismatch: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv3d bias must be ({cout},), got {bias.shape}")
    out_sp = tuple(_conv_out_extent(e, k, stride, padding) for e, k in ((d, kd), (h, kh), (w, kw)))
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d input {x.shape} too small for kernel {(kd, kh, kw)} at stride {stride}")

    xp = _pad3(x.data, padding)
    cols = _im2col(xp, (kd, kh, kw), stride, out_sp)
    w2 = weight.data.reshape(cout, -1)
    out2 = w2 @ cols
    if bias is not None:
        out2 += bias.data[:, None]
    data = out2.reshape((cout,) + out_sp)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def make_backward():
        def backward(g: np.ndarray) -> None:
            g2 = g.reshape(cout, -1)
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g2.sum(axis=1))
            if weight.requires_grad:
                _accumulate(weight, (g2 @ cols.T).reshape(weight.data.shape))
            if x.requires_grad:
                gcol = w2.T @ g2
                gxp = _col2im(gcol, xp.shape, (kd, kh, kw), stride, out_sp)
                if padding:
                    gxp = gxp[:, padding:padding + d, padding:padding + h, padding:padding + w]
                _accumulate(x, gxp)
        return backward

    return _from_op(data, parents, "conv3d", make_backward)


def conv_transpose3d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2x2 kernel; doubles each spatial extent.

    weight: (C_in, C_out, 2, 2, 2). Kernel equals stride, so scatter blocks
    never overlap.
    """
    x = _as_tensor(x)
    if stride != 2:
        raise ShapeError(f"conv_transpose3d supports stride 2 only, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose3d input must be (C, D, H, W), got {x.shape}")
    if weight.data.ndim != 5 or weight.data.shape[2:] != (2, 2, 2):
        raise ShapeError(f"conv_transpose3d weight must be (C_in, C_out, 2, 2, 2), got {weight.shape}")
    cin, d, h, w = x.data.shape
    cin_w, cout = weight.data.shape[:2]
    if cin != cin_w:
        raise ShapeError(f"conv_transpose3d channel mismatch: input has {cin} channels, weight expects {cin_w}")

    data = np.empty((cout, 2 * d, 2 * h, 2 * w), dtype=x.data.dtype)
    for iz in range(2):
        for iy in range(2):
            for ix in range(2):
                tap = weight.data[:, :, iz, iy, ix]
                data[:, iz::2, iy::2, ix::2] = np.tensordot(tap, x.data, axes=([0], [0]))

    def make_backward():
        def backward(g: np.ndarray) -> None:
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                for iz in range(2):
                    for iy in range(2):
                        for ix in range(2):
                            tap = weight.data[:, :, iz, iy, ix]
                            gx += np.tensordot(tap, g[:, iz::2, iy::2, ix::2], axes=([1], [0]))
                _accumulate(x, gx)
            if weight.requires_grad:
                gw = np.zeros_like(weight.data)
                for iz in range(2):
                    for iy in range(2):
                        for ix in range(2):
                            gw[:, :, iz, iy, ix] = np.tensordot(
                                x.data, g[:, iz::2, iy::2, ix::2], axes=([1, 2, 3], [1, 2, 3]))
                _accumulate(weight, gw)
        return backward

    return _from_op(data, (x, weight), "conv_transpose3d", make_backward)


# -- normalization and pooling --------------------------------------------------


def instance_norm3d(x: Tensor, eps: float = 1e-5,
                    scale: Tensor | None = None, shift: Tensor | None = None) -> Tensor:
    """Per-channel standardization over the spatial axes of a (C, D, H, W) tensor.

    Uses the biased variance; an all-constant channel maps to all-zero because
    eps keeps the denominator positive. ``scale``/``shift`` are optional
    per-channel affine parameters, both or neither.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm3d input must be (C, D, H, W), got {x.shape}")
    if eps <= 0:
        raise ValueError(f"instance_norm3d eps must be > 0, got {eps}")
    if (scale is None) != (shift is None):
        raise ValueError("instance_norm3d affine needs both scale and shift")
    c = x.data.shape[0]
    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if scale is not None:
        if scale.data.shape != (c,) or shift.data.shape != (c,):
            raise ShapeError(f"instance_norm3d affine params must be ({c},)")
        data = scale.data.reshape(c, 1, 1, 1) * xhat + shift.data.reshape(c, 1, 1, 1)
        parents = (x, scale, shift)
    else:
        data = xhat
        parents = (x,)

    def make_backward():
        def backward(g: np.ndarray) -> None:
            if scale is not None:
                if scale.requires_grad:
                    _accumulate(scale, (g * xhat).sum(axis=axes))
                if shift.requires_grad:
                    _accumulate(shift, g.sum(axis=axes))
                gh = g * scale.data.reshape(c, 1, 1, 1)
            else:
                gh = g
            if x.requires_grad:
                m1 = gh.mean(axis=axes, keepdims=True)
                m2 = np.mean(gh * xhat, axis=axes, keepdims=True)
                _accumulate(x, inv * (gh - m1 - xhat * m2))
        return backward

    return _from_op(data, parents, "instance_norm3d", make_backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing three (spatial) axes; keeps all leading axes."""
    x = _as_tensor(x)
    if x.data.ndim < 4:
        raise ShapeError(f"global_avg_pool input must have >= 4 dims (...,D,H,W), got {x.shape}")
    sp = x.data.shape[-3:]
    n = sp[0] * sp[1] * sp[2]
    data = x.data.mean(axis=(-3, -2, -1))

    def make_backward():
        def backward(g: np.ndarray) -> None:
            expanded = np.broadcast_to((g / n)[..., None, None, None], x.data.shape)
            _accumulate(x, expanded.astype(x.data.dtype, copy=False))
        return backward

    return _from_op(data, (x,), "global_avg_pool", make_backward)
