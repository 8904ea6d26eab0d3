"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a read-only numpy float32/float64 buffer. Running an op from
the registry records a node on the implicit tape (node ids are allocated in
execution order, so sorting by id is a topological order). ``backward`` walks
the recorded subgraph once, accumulating gradients by sum where a value fans
out; running it a second time over the same nodes raises.

The op set is closed: everything differentiable in this package is composed
from the registry below. Ops validate shapes and domains up front and check
their results for non-finite values, so a NaN or inf can never propagate
silently.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

REAL32 = np.dtype(np.float32)
REAL64 = np.dtype(np.float64)
_ALLOWED_DTYPES = (REAL32, REAL64)

_ids = itertools.count(1)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes or ranks."""


class DomainError(ValueError):
    """Raised when op inputs violate a domain precondition (log, div)."""


class NonFiniteError(ArithmeticError):
    """Raised when an op would produce NaN or infinity."""


class TapeError(RuntimeError):
    """Raised on invalid tape use, e.g. a second backward without a forward."""


class Tensor:
    """Immutable dense array, optionally tracked by the autodiff tape.

    Leaves created with ``requires_grad=True`` are parameters: ``backward``
    reports gradients for them and for nothing else. Tensors produced by ops
    carry their tape node (op name, parents, saved context) internally.
    """

    __slots__ = ("data", "requires_grad", "tid", "op", "parents", "_ctx", "_spent")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
                raise TypeError(f"Tensor data must be real-valued, got dtype {arr.dtype}")
            arr = arr.astype(REAL64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)
        self.op: Optional[str] = None
        self.parents: tuple = ()
        self._ctx = None
        self._spent = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal fast path: arr is freshly allocated by an op, no copy needed.
        t = cls.__new__(cls)
        arr = np.asarray(arr)  # 0-d arithmetic yields numpy scalars
        if not arr.flags.owndata:
            # ascontiguousarray would promote 0-d to 1-d, so copy those.
            arr = arr.copy() if arr.ndim == 0 else np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.tid = next(_ids)
        t.op = None
        t.parents = ()
        t._ctx = None
        t._spent = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The underlying buffer (read-only view, no copy)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """Same values as a fresh leaf outside the tape."""
        return Tensor._wrap(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype), requires_grad=False)

    # -- op sugar ---------------------------------------------------------

    def __add__(self, other):
        return apply("add", self, other)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply("mul", self, other)
        return apply("scalar_mul", self, value=float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __neg__(self):
        return apply("scalar_mul", self, value=-1.0)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sigmoid(self):
        return apply("sigmoid", self)

    def relu(self):
        return apply("relu", self)

    def sum(self, axes=None):
        return apply("sum", self, axes=axes)

    def mean(self, axes=None):
        return apply("mean", self, axes=axes)

    def max(self, axes=None):
        return apply("max", self, axes=axes)

    def reshape(self, shape):
        return apply("reshape", self, shape=tuple(shape))

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        via = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{via})"


# -- op registry ------------------------------------------------------------

# forward(arrays, attrs) -> (out_array, ctx); backward(ctx, grad) -> grads per
# input (None where an input is absent, e.g. the optional conv bias).
@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[[Sequence[np.ndarray], dict], tuple]
    backward: Callable[[Any, np.ndarray], list]
    attrs: frozenset
    arity: tuple  # (min_inputs, max_inputs); max None = variadic
    example: Callable[[np.random.Generator], tuple]  # -> (input tensors, attrs)


def _fmt_shapes(arrays) -> str:
    return ", ".join(str(tuple(a.shape)) for a in arrays)


def _require_same_shape(op: str, arrays) -> None:
    first = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != first:
            raise ShapeError(f"{op}: operand shapes must match, got {_fmt_shapes(arrays)}")


def _norm_axes(op: str, axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(a) for a in axes)
    if not axes and ndim > 0:
        raise ShapeError(f"{op}: empty axes (pass None to reduce everything)")
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"{op}: axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"{op}: repeated axes {axes}")
    return tuple(sorted(out))


def _pair(op: str, v, what: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        v = (int(v), int(v))
    v = tuple(int(x) for x in v)
    if len(v) != 2 or any(x < 0 for x in v) or (what != "pad" and any(x < 1 for x in v)):
        raise ShapeError(f"{op}: bad {what} {v!r}")
    return v


# elementwise binary ---------------------------------------------------------

def _fwd_add(arrays, attrs):
    _require_same_shape("add", arrays)
    return arrays[0] + arrays[1], None


def _bwd_add(ctx, g):
    return [g, g]


def _fwd_sub(arrays, attrs):
    _require_same_shape("sub", arrays)
    return arrays[0] - arrays[1], None


def _bwd_sub(ctx, g):
    return [g, -g]


def _fwd_mul(arrays, attrs):
    _require_same_shape("mul", arrays)
    a, b = arrays
    return a * b, (a, b)


def _bwd_mul(ctx, g):
    a, b = ctx
    return [g * b, g * a]


def _fwd_div(arrays, attrs):
    _require_same_shape("div", arrays)
    a, b = arrays
    if (b == 0).any():
        raise DomainError("div: zero divisor")
    out = a / b
    return out, (b, out)


def _bwd_div(ctx, g):
    b, out = ctx
    gb = -(g * out) / b
    return [g / b, gb]


def _fwd_scalar_mul(arrays, attrs):
    try:
        v = float(attrs["value"])
    except (TypeError, ValueError):
        raise DomainError(f"scalar_mul: value must be a number, got {attrs['value']!r}") from None
    if not math.isfinite(v):
        raise DomainError(f"scalar_mul: value must be finite, got {v!r}")
    a = arrays[0]
    return a * a.dtype.type(v), v


def _bwd_scalar_mul(ctx, g):
    return [g * g.dtype.type(ctx)]


# elementwise unary ----------------------------------------------------------

def _fwd_exp(arrays, attrs):
    out = np.exp(arrays[0])
    return out, out


def _bwd_exp(ctx, g):
    return [g * ctx]


def _fwd_log(arrays, attrs):
    a = arrays[0]
    if (a <= 0).any():
        raise DomainError("log: non-positive input")
    return np.log(a), a


def _bwd_log(ctx, g):
    return [g / ctx]


def _fwd_sigmoid(arrays, attrs):
    x = arrays[0]
    # Two-sided form: exp() only ever sees non-positive arguments.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def _bwd_sigmoid(ctx, g):
    return [g * ctx * (1.0 - ctx)]


def _fwd_relu(arrays, attrs):
    x = arrays[0]
    keep = x > 0
    return np.where(keep, x, x.dtype.type(0)), keep


def _bwd_relu(ctx, g):
    return [g * ctx]


# reductions -----------------------------------------------------------------

def _fwd_sum(arrays, attrs):
    a = arrays[0]
    axes = _norm_axes("sum", attrs.get("axes"), a.ndim)
    return a.sum(axis=axes), (a.shape, axes)


def _expand_reduced(g, in_shape, axes):
    shape = list(in_shape)
    for ax in axes:
        shape[ax] = 1
    return np.broadcast_to(g.reshape(shape), in_shape)


def _bwd_sum(ctx, g):
    in_shape, axes = ctx
    return [np.ascontiguousarray(_expand_reduced(g, in_shape, axes))]


def _fwd_mean(arrays, attrs):
    a = arrays[0]
    axes = _norm_axes("mean", attrs.get("axes"), a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over axes {axes} of shape {a.shape}")
    return a.mean(axis=axes), (a.shape, axes, count)


def _bwd_mean(ctx, g):
    in_shape, axes, count = ctx
    return [np.ascontiguousarray(_expand_reduced(g, in_shape, axes)) / g.dtype.type(count)]


def _fwd_max(arrays, attrs):
    a = arrays[0]
    axes = _norm_axes("max", attrs.get("axes"), a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError(f"max: empty reduction over axes {axes} of shape {a.shape}")
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    # Reduced axes move to the back in their original order, so argmax picks
    # the lowest original flat index among ties.
    perm = kept + axes
    moved = a.transpose(perm)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(int(np.prod(kept_shape, dtype=np.int64)) if kept_shape else 1, -1)
    idx = flat.argmax(axis=1)
    out = flat[np.arange(flat.shape[0]), idx].reshape(kept_shape)
    return out, (a.shape, perm, kept_shape, flat.shape, idx)


def _bwd_max(ctx, g):
    in_shape, perm, kept_shape, flat_shape, idx = ctx
    gflat = np.zeros(flat_shape, dtype=g.dtype)
    gflat[np.arange(flat_shape[0]), idx] = g.reshape(-1)
    moved_shape = tuple(in_shape[p] for p in perm)
    inv = np.argsort(perm)
    return [np.ascontiguousarray(gflat.reshape(moved_shape).transpose(inv))]


# linear algebra -------------------------------------------------------------

def _fwd_matmul(arrays, attrs):
    a, b = arrays
    ta = bool(attrs.get("transpose_a", False))
    tb = bool(attrs.get("transpose_b", False))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: rank-2 operands required, got {_fmt_shapes(arrays)}")
    am = a.T if ta else a
    bm = b.T if tb else b
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, got {_fmt_shapes(arrays)} "
            f"with transpose_a={ta}, transpose_b={tb}"
        )
    return am @ bm, (a, b, ta, tb)


def _bwd_matmul(ctx, g):
    a, b, ta, tb = ctx
    am = a.T if ta else a
    bm = b.T if tb else b
    dam = g @ bm.T
    dbm = am.T @ g
    da = dam.T if ta else dam
    db = dbm.T if tb else dbm
    return [np.ascontiguousarray(da), np.ascontiguousarray(db)]


def _fwd_conv2d(arrays, attrs):
    x, w = arrays[0], arrays[1]
    b = arrays[2] if len(arrays) == 3 else None
    sh, sw = _pair("conv2d", attrs.get("stride", 1), "stride")
    ph, pw = _pair("conv2d", attrs.get("pad", 0), "pad")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: input [N,C,H,W] and kernel [O,C,kh,kw] required, got {_fmt_shapes(arrays)}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{wd + 2 * pw})")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    return out, (cols, w, x.shape, b is not None, (sh, sw), (ph, pw), (ho, wo))


def _bwd_conv2d(ctx, g):
    cols, w, x_shape, has_bias, (sh, sw), (ph, pw), (ho, wo) = ctx
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0) if has_bias else None
    # col2im: per-tap strided accumulation into the padded input
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, :, i, j]
    dx = dxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else dxp
    out = [np.ascontiguousarray(dx), dw]
    if has_bias:
        out.append(db)
    return out


def _fwd_maxpool2d(arrays, attrs):
    x = arrays[0]
    kh, kw = _pair("maxpool2d", attrs["kernel"], "kernel")
    sh, sw = _pair("maxpool2d", attrs.get("stride", attrs["kernel"]), "stride")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input [N,C,H,W] required, got {x.shape}")
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"maxpool2d: window ({kh},{kw}) larger than input ({h},{w})")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = np.ascontiguousarray(win).reshape(n, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=-1)  # first max = lowest flat index within the window
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, idx, (kh, kw), (sh, sw), (ho, wo))


def _bwd_maxpool2d(ctx, g):
    x_shape, idx, (kh, kw), (sh, sw), (ho, wo) = ctx
    dx = np.zeros(x_shape, dtype=g.dtype)
    # Each output cell routes its gradient to exactly one input position.
    for p in range(kh * kw):
        mask = idx == p
        if not mask.any():
            continue
        i, j = divmod(p, kw)
        dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * mask
    return [dx]


# structure ------------------------------------------------------------------

def _fwd_reshape(arrays, attrs):
    a = arrays[0]
    shape = tuple(int(s) for s in attrs["shape"])
    if any(s < 0 for s in shape):
        raise ShapeError(f"reshape: negative extent in {shape}")
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} ({a.size} values) to {shape}")
    return a.reshape(shape), a.shape


def _bwd_reshape(ctx, g):
    return [np.ascontiguousarray(g.reshape(ctx))]


def _fwd_concat(arrays, attrs):
    axis = int(attrs.get("axis", 0))
    ndim = arrays[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for a in arrays[1:]:
        if a.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch, got {_fmt_shapes(arrays)}")
        for d in range(ndim):
            if d != axis and a.shape[d] != arrays[0].shape[d]:
                raise ShapeError(f"concat: shapes {_fmt_shapes(arrays)} disagree off axis {axis}")
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (axis, sizes)


def _bwd_concat(ctx, g):
    axis, sizes = ctx
    splits = np.cumsum(sizes[:-1])
    return [np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis)]


# task-specific --------------------------------------------------------------

NORM_GUARD = 1e-12


def _fwd_normalize(arrays, attrs):
    """Scale vectors along one axis to unit Euclidean norm.

    Norms at or below the guard are replaced by the guard, which keeps the
    op defined (and linear) on near-zero vectors.
    """
    a = arrays[0]
    axis = int(attrs.get("axis", 0))
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"normalize: axis {axis} out of range for rank {a.ndim}")
    axis %= a.ndim
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, a.dtype.type(NORM_GUARD))
    out = a / denom
    active = (norm > NORM_GUARD).astype(a.dtype)
    return out, (out, denom, active, axis)


def _bwd_normalize(ctx, g):
    out, denom, active, axis = ctx
    dot = (out * g).sum(axis=axis, keepdims=True)
    # Guarded locations are plain scaling by 1/guard; live ones get the
    # tangential projection of g.
    return [(g - out * dot * active) / denom]


def _fwd_inner(arrays, attrs):
    _require_same_shape("inner", arrays)
    a, b = arrays
    return np.asarray((a * b).sum(), dtype=a.dtype), (a, b)


def _bwd_inner(ctx, g):
    a, b = ctx
    return [g * b, g * a]


# gradcheck input factories ---------------------------------------------------

def _rnd(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _rnd_gapped(rng, shape):
    # Values with pairwise gaps well above the finite-difference step, for ops
    # with kinks at ties (max, maxpool).
    n = int(np.prod(shape))
    vals = rng.permutation(n) * 0.2 + rng.uniform(0.0, 0.05, n)
    return Tensor(vals.reshape(shape), dtype=np.float64)


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin + np.abs(x), x)
    return Tensor(x, dtype=np.float64)


def _ex_add(rng):
    return [_rnd(rng, (3, 4)), _rnd(rng, (3, 4))], {}


def _ex_sub(rng):
    return [_rnd(rng, (3, 4)), _rnd(rng, (3, 4))], {}


def _ex_mul(rng):
    return [_rnd(rng, (2, 3, 4)), _rnd(rng, (2, 3, 4))], {}


def _ex_div(rng):
    num = _rnd(rng, (3, 4))
    den = Tensor(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.3, 1.3, (3, 4)), dtype=np.float64)
    return [num, den], {}


def _ex_scalar_mul(rng):
    return [_rnd(rng, (3, 4))], {"value": float(rng.uniform(-2.0, 2.0))}


def _ex_exp(rng):
    return [Tensor(rng.uniform(-3.0, 3.0, (3, 4)), dtype=np.float64)], {}


def _ex_log(rng):
    return [Tensor(rng.uniform(0.1, 2.0, (3, 4)), dtype=np.float64)], {}


def _ex_sigmoid(rng):
    return [Tensor(rng.uniform(-4.0, 4.0, (3, 4)), dtype=np.float64)], {}


def _ex_relu(rng):
    return [_away_from_zero(rng, (3, 4))], {}


def _ex_sum(rng):
    return [_rnd(rng, (2, 3, 4))], {"axes": (0, 2)}


def _ex_mean(rng):
    return [_rnd(rng, (2, 3, 4))], {"axes": (1,)}


def _ex_max(rng):
    return [_rnd_gapped(rng, (3, 4, 5))], {"axes": (0, 2)}


def _ex_matmul(rng):
    ta = bool(rng.integers(2))
    tb = bool(rng.integers(2))
    a = _rnd(rng, (4, 3) if ta else (3, 4))
    b = _rnd(rng, (5, 4) if tb else (4, 5))
    return [a, b], {"transpose_a": ta, "transpose_b": tb}


def _ex_conv2d(rng):
    x = _rnd(rng, (2, 2, 5, 6))
    w = _rnd(rng, (3, 2, 3, 3))
    b = _rnd(rng, (3,))
    return [x, w, b], {"stride": (2, 1), "pad": (1, 1)}


def _ex_maxpool2d(rng):
    return [_rnd_gapped(rng, (2, 2, 6, 5))], {"kernel": (2, 2), "stride": (2, 2)}


def _ex_reshape(rng):
    return [_rnd(rng, (3, 4))], {"shape": (2, 6)}


def _ex_concat(rng):
    return [_rnd(rng, (2, 3)), _rnd(rng, (2, 3)), _rnd(rng, (2, 3))], {"axis": 1}


def _ex_normalize(rng):
    return [_rnd(rng, (4, 3, 3))], {"axis": 0}


def _ex_inner(rng):
    return [_rnd(rng, (3, 4)), _rnd(rng, (3, 4))], {}


OPS: dict = {}


def _register(name, fwd, bwd, example, attrs=(), arity=(1, 1)):
    OPS[name] = OpDef(name, fwd, bwd, frozenset(attrs), arity, example)


_register("add", _fwd_add, _bwd_add, _ex_add, arity=(2, 2))
_register("sub", _fwd_sub, _bwd_sub, _ex_sub, arity=(2, 2))
_register("mul", _fwd_mul, _bwd_mul, _ex_mul, arity=(2, 2))
_register("div", _fwd_div, _bwd_div, _ex_div, arity=(2, 2))
_register("scalar_mul", _fwd_scalar_mul, _bwd_scalar_mul, _ex_scalar_mul, attrs=("value",))
_register("exp", _fwd_exp, _bwd_exp, _ex_exp)
_register("log", _fwd_log, _bwd_log, _ex_log)
_register("sigmoid", _fwd_sigmoid, _bwd_sigmoid, _ex_sigmoid)
_register("relu", _fwd_relu, _bwd_relu, _ex_relu)
_register("sum", _fwd_sum, _bwd_sum, _ex_sum, attrs=("axes",))
_register("mean", _fwd_mean, _bwd_mean, _ex_mean, attrs=("axes",))
_register("max", _fwd_max, _bwd_max, _ex_max, attrs=("axes",))
_register("matmul", _fwd_matmul, _bwd_matmul, _ex_matmul, attrs=("transpose_a", "transpose_b"), arity=(2, 2))
_register("conv2d", _fwd_conv2d, _bwd_conv2d, _ex_conv2d, attrs=("stride", "pad"), arity=(2, 3))
_register("maxpool2d", _fwd_maxpool2d, _bwd_maxpool2d, _ex_maxpool2d, attrs=("kernel", "stride"))
_register("reshape", _fwd_reshape, _bwd_reshape, _ex_reshape, attrs=("shape",))
_register("concat", _fwd_concat, _bwd_concat, _ex_concat, attrs=("axis",), arity=(1, None))
_register("normalize", _fwd_normalize, _bwd_normalize, _ex_normalize, attrs=("axis",))
_register("inner", _fwd_inner, _bwd_inner, _ex_inner, arity=(2, 2))


def apply(op_name: str, *inputs, **attrs) -> Tensor:
    """Run a registered op, recording it on the tape if any input is tracked."""
    opdef = OPS.get(op_name)
    if opdef is None:
        raise ValueError(f"unknown op {op_name!r}; registered: {sorted(OPS)}")
    lo, hi = opdef.arity
    if len(inputs) < lo or (hi is not None and len(inputs) > hi):
        span = str(lo) if hi == lo else f"{lo}..{hi if hi is not None else 'n'}"
        raise ShapeError(f"{op_name}: takes {span} inputs, got {len(inputs)}")
    tensors = []
    for x in inputs:
        if not isinstance(x, Tensor):
            raise TypeError(f"{op_name}: inputs must be Tensors, got {type(x).__name__}")
        tensors.append(x)
    unknown = set(attrs) - set(opdef.attrs)
    if unknown:
        raise ValueError(f"{op_name}: unknown attrs {sorted(unknown)}")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{op_name}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    arrays = [t.data for t in tensors]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = opdef.forward(arrays, attrs)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op_name}: non-finite values in result")
    needs_grad = any(t.requires_grad for t in tensors)
    result = Tensor._wrap(np.asarray(out), requires_grad=needs_grad)
    if needs_grad:
        result.op = op_name
        result.parents = tuple(tensors)
        result._ctx = ctx
    return result


# -- backward ----------------------------------------------------------------

class GradMap:
    """Gradients keyed by parameter, as returned by :func:`backward`."""

    def __init__(self, by_id: dict):
        self._by_id = by_id

    def __contains__(self, t: Tensor) -> bool:
        return t.tid in self._by_id

    def __getitem__(self, t: Tensor) -> Tensor:
        try:
            return Tensor._wrap(self._by_id[t.tid])
        except KeyError:
            raise KeyError(
                f"no gradient for tensor id {t.tid}; it is not a requires_grad "
                "leaf reachable from the loss"
            ) from None

    def __len__(self) -> int:
        return len(self._by_id)


def backward(loss: Tensor) -> GradMap:
    """Reverse-mode sweep from a scalar loss over the recorded tape.

    Gradients of values that fan out accumulate by sum. Only leaves with
    ``requires_grad=True`` appear in the result. The visited tape nodes are
    consumed: a second backward over them raises TapeError.
    """
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward: expected a Tensor, got {type(loss).__name__}")
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.op is None:
        raise TapeError("backward: empty tape (loss is a leaf, no ops recorded)")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.tid in seen or t.op is None:
            continue
        seen.add(t.tid)
        nodes.append(t)
        stack.extend(t.parents)
    spent = [t for t in nodes if t._spent]
    if spent:
        raise TapeError(
            f"backward: tape already consumed ({len(spent)} node(s) reused); "
            "rerun the forward pass before differentiating again"
        )
    # Creation ids are a topological order: inputs always precede consumers.
    nodes.sort(key=lambda t: t.tid, reverse=True)

    grads = {loss.tid: np.ones((), dtype=loss.dtype)}
    param_grads: dict = {}
    for node in nodes:
        node._spent = True
        g = grads.pop(node.tid, None)
        if g is None:
            continue
        gins = OPS[node.op].backward(node._ctx, g)
        node._ctx = None  # free saved activations as we go
        for parent, gin in zip(node.parents, gins):
            if gin is None or not parent.requires_grad:
                continue
            if parent.op is None:
                bucket = param_grads
            else:
                bucket = grads
            if parent.tid in bucket:
                bucket[parent.tid] = bucket[parent.tid] + gin
            else:
                bucket[parent.tid] = gin
    return GradMap(param_grads)


# -- finite-difference checking ------------------------------------------------

def grad_check(f: Callable, inputs: Sequence[Tensor], fd_epsilon: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map the given tensors to a scalar tensor built from registered
    ops. Inputs must be real64; real32 rounding would drown the comparison.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not inputs:
        raise ValueError("grad_check: at least one input tensor required")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"grad_check: inputs must be Tensors, got {type(t).__name__}")
        if t.dtype != REAL64:
            raise TypeError(f"grad_check: real64 inputs required, got {t.dtype}")
    if not (0 < fd_epsilon < 1e-2):
        raise ValueError(f"grad_check: unreasonable fd_epsilon {fd_epsilon}")

    leaves = [Tensor(t.data, dtype=np.float64, requires_grad=True) for t in inputs]
    out = f(*leaves)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ValueError("grad_check: function must return a scalar Tensor")
    if out.op is None:
        raise ValueError("grad_check: function output is not on the tape (no differentiable ops)")
    grads = backward(out)
    analytic = [
        grads[leaf].data if leaf in grads else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def eval_at(k: int, flat_index: int, delta: float) -> float:
        probe = [t.data for t in leaves]
        bumped = probe[k].copy()
        bumped.reshape(-1)[flat_index] += delta
        probe = [Tensor._wrap(arr if i != k else bumped) for i, arr in enumerate(probe)]
        return f(*probe).item()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        an = analytic[k].reshape(-1)
        for j in range(leaf.size):
            fp = eval_at(k, j, +fd_epsilon)
            fm = eval_at(k, j, -fd_epsilon)
            fd = (fp - fm) / (2.0 * fd_epsilon)
            denom = max(abs(an[j]), abs(fd), 1e-8)
            worst = max(worst, abs(an[j] - fd) / denom)
    return worst


@dataclass(frozen=True)
class OpCheck:
    op: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def gradcheck_suite(tolerance: float = 1e-5, fd_epsilon: float = 1e-6, seed: int = 0, ops=None):
    """Finite-difference check of every registered op's backward rule.

    Returns one OpCheck per op. The output is reduced to a scalar through a
    fixed random-weight inner product so positional errors cannot cancel.
    """
    registry = OPS if ops is None else ops
    if not registry:
        raise ValueError("gradcheck_suite: empty op registry")
    rng = np.random.default_rng(seed)
    results = []
    for name in sorted(registry):
        opdef = registry[name]
        inputs, attrs = opdef.example(rng)
        probe = apply(name, *inputs, **attrs)
        weight = Tensor(rng.standard_normal(probe.shape), dtype=np.float64)

        def scalar_fn(*xs, _name=name, _attrs=attrs, _w=weight):
            return apply("inner", apply(_name, *xs, **_attrs), _w)

        err = grad_check(scalar_fn, inputs, fd_epsilon=fd_epsilon)
        results.append(OpCheck(name, err, tolerance))
    return results
