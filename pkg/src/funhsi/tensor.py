"""Tape-based reverse-mode autodiff on dense numpy arrays.

Every differentiable op returns a DiffTensor holding the forward value and,
while gradients are enabled, a backward closure plus links to its parents.
Calling .backward() on a scalar replays the closures in reverse creation
order; creation order is already topological, so no explicit sort pass is
needed beyond ordering by tensor id.

Conventions:
  - arrays are row-major and channel-last; spatial ops take [H,W,C] or [B,H,W,C]
  - float32 is the working precision, float64 is what the oracle tests use
  - convolutions are cross-correlations, no kernel flip

Multiply-accumulate accounting (feeds the complexity benchmark): matmul,
linear and the convolutions count exact MACs; elementwise mul/div and softmax
count one per output element and layer_norm two; additions, activations and
reductions are free.
"""

import contextlib
import itertools
import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand extents are incompatible with the op's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated (non-scalar loss, bad eps, ...)."""


_tids = itertools.count()

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _EngineState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.macs = None


_state = _EngineState()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        n = int(n)
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of ops run inside the block."""
    counter = MacCounter()
    prev = _state.macs
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = prev


def _macs(op, n):
    if _state.macs is not None:
        _state.macs.add(op, n)


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "tid", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tid = next(_tids)
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return DiffTensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return "DiffTensor(shape=%r, dtype=%s%s)" % (tuple(self.shape), self.data.dtype, tag)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_ensure(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_ensure(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _ensure(x, like=None):
    if isinstance(x, DiffTensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return DiffTensor(np.asarray(x, dtype=dtype))


def _attach(out, op, parents, backward_fn):
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_data(a, b, opname):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            "%s: shapes %r and %r do not broadcast" % (opname, tuple(a.shape), tuple(b.shape))
        ) from None


def _check_axis(ndim, axis, opname):
    if not -ndim <= axis < ndim:
        raise ShapeError("%s: axis %d invalid for %d-d input" % (opname, axis, ndim))
    return axis % ndim


# ---------------------------------------------------------------- pointwise


def add(a, b):
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "add")
    out = DiffTensor(a.data + b.data)

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _attach(out, "add", (a, b), backward_fn)


def sub(a, b):
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "sub")
    out = DiffTensor(a.data - b.data)

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _attach(out, "sub", (a, b), backward_fn)


def mul(a, b):
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "mul")
    data = a.data * b.data
    _macs("mul", data.size)
    out = DiffTensor(data)

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _attach(out, "mul", (a, b), backward_fn)


def div(a, b):
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "div")
    data = a.data / b.data
    _macs("div", data.size)
    out = DiffTensor(data)

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / np.square(b.data), b.data.shape))

    return _attach(out, "div", (a, b), backward_fn)


def neg(x):
    x = _ensure(x)
    out = DiffTensor(-x.data)

    def backward_fn():
        _accum(x, -out.grad)

    return _attach(out, "neg", (x,), backward_fn)


def power(x, p):
    """x**p for a Python float exponent."""
    x = _ensure(x)
    p = float(p)
    data = np.power(x.data, p)
    out = DiffTensor(data)

    def backward_fn():
        _accum(x, out.grad * p * np.power(x.data, p - 1.0))

    return _attach(out, "power", (x,), backward_fn)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first operand."""
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "maximum")
    mask = a.data >= b.data
    out = DiffTensor(np.where(mask, a.data, b.data))

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _attach(out, "maximum", (a, b), backward_fn)


def minimum(a, b):
    a = _ensure(a, b if isinstance(b, DiffTensor) else None)
    b = _ensure(b, a)
    _broadcast_data(a, b, "minimum")
    mask = a.data <= b.data
    out = DiffTensor(np.where(mask, a.data, b.data))

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * mask, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~mask, b.data.shape))

    return _attach(out, "minimum", (a, b), backward_fn)


def texp(x):
    x = _ensure(x)
    data = np.exp(x.data)
    out = DiffTensor(data)

    def backward_fn():
        _accum(x, out.grad * data)

    return _attach(out, "exp", (x,), backward_fn)


def tlog(x):
    x = _ensure(x)
    out = DiffTensor(np.log(x.data))

    def backward_fn():
        _accum(x, out.grad / x.data)

    return _attach(out, "log", (x,), backward_fn)


def tsqrt(x):
    x = _ensure(x)
    data = np.sqrt(x.data)
    out = DiffTensor(data)

    def backward_fn():
        _accum(x, out.grad * 0.5 / data)

    return _attach(out, "sqrt", (x,), backward_fn)


def gelu(x):
    """Exact-erf GeLU: x * Phi(x)."""
    x = _ensure(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = DiffTensor(x.data * cdf)

    def backward_fn():
        pdf = np.exp(-0.5 * np.square(x.data)) * _INV_SQRT_2PI
        _accum(x, out.grad * (cdf + x.data * pdf))

    return _attach(out, "gelu", (x,), backward_fn)


def sigmoid(x):
    x = _ensure(x)
    y = expit(x.data)
    out = DiffTensor(y)

    def backward_fn():
        _accum(x, out.grad * y * (1.0 - y))

    return _attach(out, "sigmoid", (x,), backward_fn)


def softplus(x):
    """log(1 + exp(x)), computed stably; its derivative is sigmoid(x)."""
    x = _ensure(x)
    out = DiffTensor(np.logaddexp(0.0, x.data))

    def backward_fn():
        _accum(x, out.grad * expit(x.data))

    return _attach(out, "softplus", (x,), backward_fn)


def softmax(x, axis=-1):
    x = _ensure(x)
    ax = _check_axis(x.ndim, axis, "softmax")
    z = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)
    _macs("softmax", y.size)
    out = DiffTensor(y)

    def backward_fn():
        g = out.grad
        dot = np.sum(g * y, axis=ax, keepdims=True)
        _accum(x, y * (g - dot))

    return _attach(out, "softmax", (x,), backward_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive, got %r" % eps)
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            "layer_norm: gamma/beta must be shape (%d,), got %r and %r"
            % (c, tuple(gamma.shape), tuple(beta.shape))
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(np.square(xc), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    _macs("layer_norm", 2 * x.data.size)
    out = DiffTensor(xhat * gamma.data + beta.data)

    def backward_fn():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            _accum(beta, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
            _accum(x, inv * (gh - m1 - xhat * m2))

    return _attach(out, "layer_norm", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = _ensure(x)
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(
            "reshape: cannot view %r as %r" % (tuple(x.shape), shape)
        ) from None
    out = DiffTensor(data)

    def backward_fn():
        _accum(x, out.grad.reshape(x.data.shape))

    return _attach(out, "reshape", (x,), backward_fn)


def transpose(x, axes):
    x = _ensure(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose: axes %r invalid for %d-d input" % (axes, x.ndim))
    out = DiffTensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def backward_fn():
        _accum(x, np.transpose(out.grad, inv))

    return _attach(out, "transpose", (x,), backward_fn)


def concat(xs, axis=0):
    xs = [_ensure(x) for x in xs]
    if not xs:
        raise ContractError("concat: need at least one tensor")
    ax = _check_axis(xs[0].ndim, axis, "concat")
    try:
        data = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError:
        raise ShapeError(
            "concat: shapes %r do not align on axis %d"
            % ([tuple(x.shape) for x in xs], ax)
        ) from None
    out = DiffTensor(data)
    bounds = np.cumsum([0] + [x.data.shape[ax] for x in xs])

    def backward_fn():
        g = out.grad
        sl = [slice(None)] * g.ndim
        for x, start, stop in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl[ax] = slice(int(start), int(stop))
                _accum(x, g[tuple(sl)])

    return _attach(out, "concat", tuple(xs), backward_fn)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = _ensure(x)
    ax = _check_axis(x.ndim, axis, "narrow")
    if start < 0 or start + length > x.data.shape[ax]:
        raise ShapeError(
            "narrow: [%d, %d) outside extent %d" % (start, start + length, x.data.shape[ax])
        )
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    out = DiffTensor(x.data[sl].copy())

    def backward_fn():
        dx = np.zeros_like(x.data)
        dx[sl] = out.grad
        _accum(x, dx)

    return _attach(out, "narrow", (x,), backward_fn)


def take(x, idx):
    """Gather rows along axis 0 (duplicate indices allowed)."""
    x = _ensure(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError("take: index out of range for extent %d" % x.data.shape[0])
    out = DiffTensor(x.data[idx])

    def backward_fn():
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, out.grad)
        _accum(x, dx)

    return _attach(out, "take", (x,), backward_fn)


# ------------------------------------------------------------- contractions


def matmul(a, b):
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            "matmul: inner extents differ, %r vs %r" % (tuple(a.shape), tuple(b.shape))
        )
    data = np.matmul(a.data, b.data)
    _macs("matmul", data.size * a.data.shape[-1])
    out = DiffTensor(data)

    def backward_fn():
        g = out.grad
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(da, a.data.shape))
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(db, b.data.shape))

    return _attach(out, "matmul", (a, b), backward_fn)


def linear(x, w, b=None):
    """Affine map over the last axis: x[..., Cin] @ w[Cin, Cout] + b[Cout]."""
    x, w = _ensure(x), _ensure(w)
    if w.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            "linear: input extent %r does not match weight %r"
            % (tuple(x.shape), tuple(w.shape))
        )
    cin, cout = w.data.shape
    data = np.matmul(x.data, w.data)
    parents = [x, w]
    if b is not None:
        b = _ensure(b, x)
        if b.data.shape != (cout,):
            raise ShapeError("linear: bias must be shape (%d,), got %r" % (cout, tuple(b.shape)))
        data = data + b.data
        parents.append(b)
    _macs("linear", data.size * cin)
    out = DiffTensor(data)

    def backward_fn():
        g = out.grad
        if x.requires_grad:
            _accum(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            x2 = x.data.reshape(-1, cin)
            g2 = g.reshape(-1, cout)
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, cout).sum(axis=0))

    return _attach(out, "linear", tuple(parents), backward_fn)


# ------------------------------------------------------------- convolutions


def _as_batched(x, opname):
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ShapeError("%s: input must be [H,W,C] or [B,H,W,C], got %r" % (opname, tuple(x.shape)))


def _unbatch(data, had_batch):
    return data if had_batch else data[0]


def conv2d(x, k, stride=1, padding=0):
    """Cross-correlation. x: [.., H, W, Cin], k: [kh, kw, Cin, Cout].

    H' = floor((H + 2p - kh) / stride) + 1, likewise for W'.
    """
    x, k = _ensure(x), _ensure(k)
    xd, batched = _as_batched(x, "conv2d")
    if k.ndim != 4:
        raise ShapeError("conv2d: kernel must be [kh,kw,Cin,Cout], got %r" % (tuple(k.shape),))
    kh, kw, cin, cout = k.data.shape
    bsz, h, w, cx = xd.shape
    if cx != cin:
        raise ShapeError("conv2d: input channels %d != kernel Cin %d" % (cx, cin))
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride >= 1 and padding >= 0 required")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            "conv2d: kernel %dx%d larger than padded input %dx%d" % (kh, kw, hp, wp)
        )
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: [B, ho, wo, Cin, kh, kw] -> cols [B*ho*wo, kh*kw*Cin]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    data = (cols @ kmat).reshape(bsz, ho, wo, cout)
    _macs("conv2d", data.size * kh * kw * cin)
    out = DiffTensor(_unbatch(data, batched))

    def backward_fn():
        g = out.grad if batched else out.grad[None]
        if k.requires_grad:
            g2 = g.reshape(bsz * ho * wo, cout)
            _accum(k, (cols.T @ g2).reshape(kh, kw, cin, cout))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride, :] += np.matmul(
                        g, k.data[i, j].T
                    )
            dx = dxp[:, padding : padding + h, padding : padding + w, :]
            _accum(x, _unbatch(dx, batched))

    return _attach(out, "conv2d", (x, k), backward_fn)


def depthwise_conv2d(x, k):
    """Per-channel 'same' convolution. x: [.., H, W, C], k: [kh, kw, C], odd kernels.

    Padding replicates the border rows/columns, so a constant input stays
    constant under unit-sum kernels everywhere, not only in the interior;
    the context-pyramid semantics rely on this.
    """
    x, k = _ensure(x), _ensure(k)
    xd, batched = _as_batched(x, "depthwise_conv2d")
    if k.ndim != 3:
        raise ShapeError("depthwise_conv2d: kernel must be [kh,kw,C], got %r" % (tuple(k.shape),))
    kh, kw, c = k.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("depthwise_conv2d: 'same' padding needs odd kernel extents")
    bsz, h, w, cx = xd.shape
    if cx != c:
        raise ShapeError("depthwise_conv2d: input channels %d != kernel channels %d" % (cx, c))
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B,H,W,C,kh,kw]
    data = np.einsum("bhwcij,ijc->bhwc", win, k.data)
    _macs("depthwise_conv2d", data.size * kh * kw)
    out = DiffTensor(_unbatch(data, batched))

    def backward_fn():
        g = out.grad if batched else out.grad[None]
        if k.requires_grad:
            _accum(k, np.einsum("bhwcij,bhwc->ijc", win, g))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + h, j : j + w, :] += g * k.data[i, j]
            # fold the replicated borders back onto the edge rows/cols
            rows = dxp[:, ph : ph + h, :, :]
            if ph:
                rows[:, 0] += dxp[:, :ph].sum(axis=1)
                rows[:, -1] += dxp[:, ph + h :].sum(axis=1)
            cols = rows[:, :, pw : pw + w, :].copy()
            if pw:
                cols[:, :, 0] += rows[:, :, :pw].sum(axis=2)
                cols[:, :, -1] += rows[:, :, pw + w :].sum(axis=2)
            _accum(x, _unbatch(cols, batched))

    return _attach(out, "depthwise_conv2d", (x, k), backward_fn)


def transposed_conv2d(x, k, stride=2):
    """Fractionally-strided upsampling. x: [.., H, W, Cin], k: [kh, kw, Cout, Cin].

    Output spatial extent is (H-1)*stride + kh. For a fixed kernel this is the
    adjoint of conv2d with that kernel read as [kh, kw, Cout(=its Cin), Cin(=its Cout)],
    so <conv2d(x,k), y> == <x, transposed_conv2d(y,k)> with no padding.
    """
    x, k = _ensure(x), _ensure(k)
    xd, batched = _as_batched(x, "transposed_conv2d")
    if k.ndim != 4:
        raise ShapeError(
            "transposed_conv2d: kernel must be [kh,kw,Cout,Cin], got %r" % (tuple(k.shape),)
        )
    kh, kw, cout, cin = k.data.shape
    bsz, h, w, cx = xd.shape
    if cx != cin:
        raise ShapeError("transposed_conv2d: input channels %d != kernel Cin %d" % (cx, cin))
    stride = int(stride)
    if stride < 1:
        raise ContractError("transposed_conv2d: stride >= 1 required")
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    data = np.zeros((bsz, ho, wo, cout), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            data[:, i : i + (h - 1) * stride + 1 : stride,
                 j : j + (w - 1) * stride + 1 : stride, :] += np.matmul(xd, k.data[i, j].T)
    _macs("transposed_conv2d", xd.size * kh * kw * cout)
    out = DiffTensor(_unbatch(data, batched))

    def backward_fn():
        g = out.grad if batched else out.grad[None]
        if x.requires_grad:
            # gather per tap, mirroring the forward scatter
            dx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    dx += np.matmul(
                        g[:, i : i + (h - 1) * stride + 1 : stride,
                          j : j + (w - 1) * stride + 1 : stride, :],
                        k.data[i, j],
                    )
            _accum(x, _unbatch(dx, batched))
        if k.requires_grad:
            win = sliding_window_view(g, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * w, kh * kw * cout)
            x2 = xd.reshape(bsz * h * w, cin)
            dk = cols.T @ x2  # [kh*kw*cout, cin]
            _accum(k, dk.reshape(kh, kw, cout, cin))

    return _attach(out, "transposed_conv2d", (x, k), backward_fn)


def global_avg_pool(x):
    """Mean over the two spatial axes: [.., H, W, C] -> [.., C]."""
    x = _ensure(x)
    xd, batched = _as_batched(x, "global_avg_pool")
    bsz, h, w, c = xd.shape
    data = xd.mean(axis=(1, 2))
    out = DiffTensor(data if batched else data[0])

    def backward_fn():
        g = out.grad if batched else out.grad[None]
        dx = np.broadcast_to(g[:, None, None, :] / (h * w), xd.shape)
        _accum(x, _unbatch(dx.copy(), batched))

    return _attach(out, "global_avg_pool", (x,), backward_fn)


# -------------------------------------------------------------- reductions


def _norm_axes(ndim, axis, opname):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_check_axis(ndim, a, opname) for a in axis))


def tsum(x, axis=None, keepdims=False):
    x = _ensure(x)
    axes = _norm_axes(x.ndim, axis, "sum")
    out = DiffTensor(x.data.sum(axis=axes, keepdims=keepdims))

    def backward_fn():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _attach(out, "sum", (x,), backward_fn)


def tmean(x, axis=None, keepdims=False):
    x = _ensure(x)
    axes = _norm_axes(x.ndim, axis, "mean")
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out = DiffTensor(x.data.mean(axis=axes, keepdims=keepdims))

    def backward_fn():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(x, np.broadcast_to(g / count, x.data.shape).copy())

    return _attach(out, "mean", (x,), backward_fn)


# ----------------------------------------------------------------- backward


def _topo(root):
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        n = stack.pop()
        if n._backward is None or n.tid in seen:
            continue
        seen.add(n.tid)
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n.tid)
    return nodes


def backward(loss):
    """Populate .grad for every requires_grad tensor reachable from loss.

    Leaf gradients accumulate across calls (zero them between optimizer
    steps); interior node gradients are reset on every call.
    """
    if loss.data.size != 1:
        raise ContractError("backward: loss must be scalar, got shape %r" % (tuple(loss.shape),))
    nodes = _topo(loss)
    for n in nodes:
        n.grad = None
    if loss._backward is None:
        if loss.requires_grad:
            _accum(loss, np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    for n in reversed(nodes):
        if n.grad is None:
            continue
        n._backward()


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
