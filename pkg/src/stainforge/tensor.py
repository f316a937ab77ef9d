"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the calling thread's
active :class:`Tape`. :func:`backward` replays that tape in reverse, which is
a valid reverse topological order because nodes are recorded in execution
order. Leaf tensors created with ``requires_grad=True`` accumulate into
``.grad`` until :meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "NumericError",
    "TapeError",
    "Tensor",
    "Tape",
    "tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "grad_enabled",
    "current_tape",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "silu",
    "square",
    "sqrt",
    "absolute",
    "matmul",
    "linear",
    "conv2d",
    "group_norm",
    "reduce",
    "reshape",
    "concat",
    "upsample_nearest",
    "scale_shift",
]


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (non-scalar loss, consumed tape)."""


_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    old = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = old


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


def _check_finite(arr: np.ndarray, what: str) -> None:
    # A single reduction is much cheaper than an elementwise isfinite pass and
    # propagates any NaN/Inf present in the array.
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by {what}")


class Tape:
    """Ordered record of differentiable operations executed on one thread."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable, name: str) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, parents, fn, name))

    def clear(self) -> None:
        for out, _, _, _ in self.nodes:
            out._tape = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn, name in reversed(self.nodes[: loss._index + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, f"backward of {name}")
                if p._tape is None:
                    p._accumulate(pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        self.consumed = True
        self.clear()
        if getattr(_local, "tape", None) is self:
            _local.tape = Tape()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = _local.tape = Tape()
    return tape


class Tensor:
    """n-dimensional float array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "name")
    __array_ufunc__ = None  # make ``ndarray op Tensor`` dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- gradients -----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        backward(self)

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._tape is None:
        raise TapeError("tape already consumed (or loss never recorded)")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._index = -1
    out.name = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        current_tape().record(out, parents, fn, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), fn, "mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _wrap(a, like), _wrap(b, like)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def fn(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _result(out, (a,), fn, "silu")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (g * (2.0 * x),), "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


_UNARY = {"neg": neg, "silu": silu, "square": square, "sqrt": sqrt, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``silu``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](_wrap(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


def scale_shift(a: Tensor, scale: float, shift: float) -> Tensor:
    """``a * scale + shift`` with python scalars, as one node."""
    return _result(a.data * scale + shift, (a,), lambda g: (g * scale,), "scale_shift")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "linear")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, shape=(n, c, kh, kw, ho, wo), strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    return win.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation over an [N, C, H, W] batch.

    ``padding`` defaults to ``kh // 2`` so odd 3x3 stride-1 kernels keep the
    spatial size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects input [N,C,H,W] and weight [Cout,Cin,kh,kw]")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd size")
    if padding is None:
        padding = kh // 2
    if stride == 1 and kh == kw and padding == kh // 2 and kh > 1:
        return _conv_same(x, weight, bias)
    p = padding
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d output would be empty")
    wd = weight.data
    wm = wd.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and p == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def fn(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wm.T, g3)
            if pointwise:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "conv2d")


def _conv_same(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    # Stride-1 "same" convolution without an im2col buffer: the zero-padded
    # batch is laid out channel-major as [C, N*Hp*Wp], so each kernel offset
    # (i, j) is a constant shift i*Wp + j along the flat axis. Output is
    # computed on the padded grid and cropped.
    n, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    L = n * hp * wp
    margin = (k - 1) * wp + (k - 1)
    dt = x.dtype
    xf = np.zeros((c, L + margin), dtype=dt)
    xf[:, :L].reshape(c, n, hp, wp)[:, :, p : p + h, p : p + w] = x.data.transpose(1, 0, 2, 3)
    wd = weight.data
    offs = [i * wp + j for i in range(k) for j in range(k)]
    y = (wd.transpose(2, 3, 0, 1).reshape(k * k * cout, c) @ xf).reshape(k * k, cout, L + margin)
    acc = y[0, :, :L].copy()
    for idx in range(1, k * k):
        acc += y[idx, :, offs[idx] : offs[idx] + L]
    del y
    out = acc.reshape(cout, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[:, None, None]
    else:
        out = np.ascontiguousarray(out)

    def fn(g):
        gfull = np.zeros((cout, n, hp, wp), dtype=g.dtype)
        gfull[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(cout, L)
        gx = gw = gb = None
        if weight.requires_grad:
            gwk = np.empty((k, k, cout, c), dtype=g.dtype)
            for idx, off in enumerate(offs):
                gwk[idx // k, idx % k] = gfull @ xf[:, off : off + L].T
            gw = np.ascontiguousarray(gwk.transpose(2, 3, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            z = (wd.transpose(2, 3, 1, 0).reshape(k * k * c, cout) @ gfull).reshape(k * k, c, L)
            gxf = np.zeros((c, L + margin), dtype=g.dtype)
            for idx, off in enumerate(offs):
                gxf[:, off : off + L] += z[idx]
            gx = np.ascontiguousarray(gxf[:, :L].reshape(c, n, hp, wp)[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "conv2d")


# ---------------------------------------------------------------------------
# normalization and reductions
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel group) to zero mean, unit variance."""
    if x.ndim < 2:
        raise ValueError("group_norm expects [N, C, ...]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels are not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xhat_full = xhat.reshape(x.shape)
    out = xhat_full
    if gain is not None:
        out = out * gain.data.reshape(bshape)
    if shift is not None:
        out = out + shift.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def fn(g):
        gg = gs = gx = None
        if gain is not None and gain.requires_grad:
            gg = (g * xhat_full).sum(axis=red)
        if shift is not None and shift.requires_grad:
            gs = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gain.data.reshape(bshape) if gain is not None else g
            dxhat = dxhat.reshape(n, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
            gx = (inv * (dxhat - m1 - xhat * m2)).reshape(x.shape)
        res = [gx]
        if gain is not None:
            res.append(gg)
        if shift is not None:
            res.append(gs)
        return tuple(res)

    parents = tuple(t for t in (x, gain, shift) if t is not None)
    return _result(out, parents, fn, "group_norm")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} is invalid for a {ndim}-D tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError("repeated axis")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with ``sum``, ``mean`` or ``max``."""
    a = _wrap(a)
    ax = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in ax else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in ax])) if ax else 1
    if kind == "sum":
        out = a.data.sum(axis=ax, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(g.reshape(kept), shape),)
    elif kind == "mean":
        out = a.data.mean(axis=ax, keepdims=keepdims)
        fn = lambda g: (np.broadcast_to(g.reshape(kept) / count, shape),)
    elif kind == "max":
        full = a.data.max(axis=ax, keepdims=True)
        out = full if keepdims else full.reshape([n for i, n in enumerate(shape) if i not in ax])
        mask = a.data == full
        ties = mask.sum(axis=ax, keepdims=True)

        def fn(g):
            return (mask * (g.reshape(kept) / ties),)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _result(np.asarray(out, dtype=a.dtype), (a,), fn, f"reduce_{kind}")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), fn, "concat")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing spatial axes."""
    x = a.data
    *lead, h, w = x.shape
    out = np.broadcast_to(x[..., :, None, :, None], (*lead, h, factor, w, factor)).reshape(*lead, h * factor, w * factor)

    def fn(g):
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return _result(np.ascontiguousarray(out), (a,), fn, "upsample")
