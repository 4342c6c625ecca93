"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive used by the models, losses and optimizer lives
here. Feature maps are channels-last (``B x H x W x C`` or ``H x W x C``).

A forward pass records each executed primitive on its output tensor. Calling
:meth:`Tensor.backward` walks that record once in reverse topological order and
then marks it consumed; a second backward over the same record raises
:class:`~cracknet.errors.GraphError` instead of silently double counting.
Gradients are stored on leaf tensors (tensors created by the user) and
accumulate across records until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from . import _kernels
from .errors import ContractError, DimensionError, GraphError

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "computation_record", "custom_op",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "relu", "gelu",
    "sigmoid", "clip", "elementwise", "sum", "mean", "matmul", "linear",
    "reshape", "transpose", "concat", "split", "slice_axis", "roll", "softmax",
    "layer_norm", "conv2d", "transposed_conv2d", "max_pool2d",
    "bilinear_upsample", "grad_check",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None and not self._consumed

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- backward ------------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("this computation record was already consumed by backward()")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        order = computation_record(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._consumed:
                raise GraphError("computation record contains an already consumed node")
            if node._backward is None:
                if g is not None:
                    g = g.astype(node.data.dtype, copy=False)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def computation_record(root):
    """Recorded nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def custom_op(data, parents, backward, op="custom"):
    """Create an output tensor with a hand-written backward.

    ``backward(g)`` receives the gradient of the output and returns one array
    (or ``None``) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        for p in parents:
            if p._consumed:
                raise GraphError("cannot build on a consumed computation record")
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ------------------------------------------------

def add(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return custom_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return custom_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return custom_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward, "div")


# -- unary elementwise -------------------------------------------------

def neg(x):
    return custom_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x):
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    out = np.sqrt(x.data)
    return custom_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x):
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                     lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return custom_op(out, (x,), backward, "gelu")


def sigmoid(x):
    out = expit(x.data)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(x, lo, hi):
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return custom_op(out, (x,), lambda g: (g * inside,), "clip")


_UNARY = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(x, fn, other=None):
    """Dispatch a pointwise primitive by name.

    ``fn`` is one of ``relu``, ``gelu``, ``sigmoid`` (unary), ``add``, ``mul``
    (binary, ``other`` is a tensor or scalar) or ``scale`` (``other`` is a
    constant factor).
    """
    if fn in _UNARY:
        return _UNARY[fn](x)
    if fn in _BINARY:
        if other is None:
            raise ContractError(f"{fn} needs a second operand")
        return _BINARY[fn](x, other)
    if fn == "scale":
        return mul(x, float(other))
    raise ContractError(f"unknown elementwise function {fn!r}")


# -- reductions --------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return custom_op(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes, with batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return custom_op(out, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` applied over the last axis of ``x`` (fused for speed)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return custom_op(out.reshape(lead + (w.shape[1],)), parents, backward, "linear")


# -- data movement -----------------------------------------------------

def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {ax}: shapes {[t.shape for t in tensors]} disagree off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(lo, hi)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return tuple(grads)

    return custom_op(out, tensors, backward, "concat")


def slice_axis(x, axis, start, stop):
    ax = _norm_axes(axis, x.ndim)[0]
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return custom_op(x.data[idx], (x,), backward, "slice")


def split(x, sizes, axis=0):
    """Split into consecutive pieces of the given extents along ``axis``."""
    ax = _norm_axes(axis, x.ndim)[0]
    if builtins.sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not add up to extent {x.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, ax, start, start + s))
        start += s
    return out


def roll(x, shift, axes):
    """Cyclic roll; ``shift`` and ``axes`` are tuples of equal length."""
    shift, axes = tuple(shift), tuple(axes)
    back = tuple(-s for s in shift)
    return custom_op(np.roll(x.data, shift, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


# -- normalisation -----------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stable softmax (the per-slice max is subtracted first)."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match extent {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return custom_op(out, (x, gamma, beta), backward, "layer_norm")


# -- convolution -------------------------------------------------------

def _as_batched(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected an H x W x C or B x H x W x C map, got {x.shape}")
    return x, False


def _same_padding(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + pt + pb or kw > w + pl + pr or ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    return ho, wo, (pt, pb, pl, pr)


def conv2d(x, w, b=None, stride=1, padding="same"):
    """2-D cross-correlation; ``w`` is ``kh x kw x Cin x Cout``.

    ``same`` padding gives ``ceil(H / stride)`` outputs and pads
    symmetrically, with the odd extra pixel on the bottom/right.
    """
    if stride < 1:
        raise ContractError("stride must be positive")
    xb, squeeze = _as_batched(x)
    bsz, h, wd, cin = xb.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} but kernel expects {wcin}")
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, wd, kh, kw, stride, padding)
    w2 = w.data.reshape(kh * kw * cin, cout)

    if kh == 1 and kw == 1 and stride == 1:
        cols = xb.data.reshape(-1, cin)
        hp, wp = h, wd
    else:
        xp = xb.data
        if pt or pb or pl or pr:
            xp = np.pad(xp, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        hp, wp = xp.shape[1], xp.shape[2]
        cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)
    parents = (xb, w) if b is None else (xb, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if xb.requires_grad:
            gcols = g2 @ w2.T
            if kh == 1 and kw == 1 and stride == 1:
                gx = gcols.reshape(xb.shape)
            else:
                gxp = _kernels.col2im(gcols, bsz, hp, wp, cin, kh, kw, stride, ho, wo)
                gx = gxp[:, pt:pt + h, pl:pl + wd, :]
        return (gx, gw) if b is None else (gx, gw, gb)

    result = custom_op(out, parents, backward, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def transposed_conv2d(x, w, b=None, stride=2):
    """Adjoint of a ``same``-padded strided :func:`conv2d`; output is ``H*stride``.

    ``w`` is ``kh x kw x Cin x Cout`` with ``Cin`` the channels of ``x``.
    """
    if stride < 1:
        raise ContractError("stride must be positive")
    xb, squeeze = _as_batched(x)
    bsz, h, wd, cin = xb.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise DimensionError(f"transposed_conv2d: input channels {cin} but kernel expects {wcin}")
    ho, wo = h * stride, wd * stride
    _, _, (pt, pb, pl, pr) = _conv_geometry(ho, wo, kh, kw, stride, "same")
    hp, wp = ho + pt + pb, wo + pl + pr
    # (Cin, kh*kw*Cout): rows are input channels, columns follow im2col order
    wt = np.transpose(w.data, (2, 0, 1, 3)).reshape(cin, kh * kw * cout)
    x2 = xb.data.reshape(-1, cin)
    cols = x2 @ wt
    outp = _kernels.col2im(cols, bsz, hp, wp, cout, kh, kw, stride, h, wd)
    out = np.ascontiguousarray(outp[:, pt:pt + ho, pl:pl + wo, :])
    if b is not None:
        out += b.data
    parents = (xb, w) if b is None else (xb, w, b)

    def backward(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else g
        gcols = _kernels.im2col(gp, kh, kw, stride, h, wd)
        if xb.requires_grad:
            gx = (gcols @ wt.T).reshape(xb.shape)
        if w.requires_grad:
            gwt = x2.T @ gcols
            gw = np.transpose(gwt.reshape(cin, kh, kw, cout), (1, 2, 0, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    result = custom_op(out, parents, backward, "transposed_conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def max_pool2d(x):
    """2x2 max pooling with stride 2; ties share the gradient equally."""
    xb, squeeze = _as_batched(x)
    bsz, h, wd, c = xb.shape
    if h % 2 or wd % 2:
        raise DimensionError(f"max_pool2d needs even extents, got {h}x{wd}")
    r = xb.data.reshape(bsz, h // 2, 2, wd // 2, 2, c)
    out = r.max(axis=(2, 4))

    def backward(g):
        hit = r == out[:, :, None, :, None, :]
        share = hit / hit.sum(axis=(2, 4), keepdims=True)
        return ((share * g[:, :, None, :, None, :]).reshape(xb.shape).astype(xb.dtype, copy=False),)

    result = custom_op(out, (xb,), backward, "max_pool2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def _interp_matrix(n, factor, dtype):
    """Half-pixel bilinear interpolation weights, ``(n*factor) x n``."""
    m = np.zeros((n * factor, n), dtype=dtype)
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def _apply_axis(x, mat, axis):
    mat_t = np.ascontiguousarray(mat.T)

    def fwd(arr, m):
        moved = np.moveaxis(arr, axis, -1)
        return np.moveaxis(moved @ m.T, -1, axis)

    out = fwd(x.data, mat)
    return custom_op(np.ascontiguousarray(out), (x,), lambda g: (fwd(g, mat_t),), "resample")


def bilinear_upsample(x, factor=2):
    """Bilinear upsampling of the two spatial axes by an integer factor."""
    if factor < 1:
        raise ContractError("factor must be a positive integer")
    if x.ndim not in (3, 4):
        raise DimensionError(f"bilinear_upsample expects a feature map, got {x.shape}")
    if factor == 1:
        return x
    h_ax, w_ax = x.ndim - 3, x.ndim - 2
    y = _apply_axis(x, _interp_matrix(x.shape[h_ax], factor, x.dtype), h_ax)
    return _apply_axis(y, _interp_matrix(x.shape[w_ax], factor, x.dtype), w_ax)


# -- verification ------------------------------------------------------

def grad_check(fn, inputs, h=1e-4, max_elements=None, seed=0):
    """Compare analytic gradients with central finite differences.

    ``fn(*inputs)`` must return a scalar tensor. Returns the largest
    ``|analytic - numeric| / max(1, |analytic|)`` over the checked elements.
    ``max_elements`` caps the number of elements probed per input (chosen at
    random with ``seed``); ``None`` checks every element.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise ContractError("function value is not finite")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ContractError("grad_check needs contiguous input arrays")
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, size=max_elements, replace=False)
            af = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(*inputs).data)
                flat[i] = orig - h
                fm = float(fn(*inputs).data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ContractError("function value is not finite under perturbation")
                num = (fp - fm) / (2.0 * h)
                err = abs(af[i] - num) / max(1.0, abs(af[i]))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
