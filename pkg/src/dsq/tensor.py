"""Dense tensors with a minimal reverse-mode differentiation engine.

Every learnable operation in the package is built from the primitives here.
Layout convention throughout the repo: feature-first matrices, i.e. a
sequence of N hidden vectors of size d is a (d, N) array, matching the
column-vector algebra of the model equations. Ops accept extra leading batch
axes wherever numpy broadcasting makes that free.

Two numeric modes exist:

* ``verify``  -- float64, finite-checks on every op output. All gradient
  verification and acceptance tests run in this mode.
* ``fast``    -- float32, finite checks off. Training throughput mode.

The graph is recorded implicitly: each op output keeps references to its
parent tensors and a backward closure. ``tape(root)`` materializes the
executed-primitive record in topological order; ``backward`` replays it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .kernels import (
    layer_norm_rows,
    layer_norm_rows_backward,
    softmax_rows,
    softmax_rows_backward,
)

NEG_INF = -1e30  # finite stand-in for -inf so masked logits stay checkable
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NumericError(ArithmeticError):
    """Non-finite value produced by a forward op, or a NaN gradient."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (double backward, detached loss...)."""


class _State:
    __slots__ = ("dtype", "finite_checks", "grad_enabled")

    def __init__(self):
        self.dtype = np.float64
        self.finite_checks = True
        self.grad_enabled = True


_state = _State()

_MODES = {
    "verify": (np.float64, True),
    "fast": (np.float32, False),
}


def set_mode(name: str) -> None:
    """Switch numeric mode: 'verify' (float64, checked) or 'fast' (float32)."""
    try:
        _state.dtype, _state.finite_checks = _MODES[name]
    except KeyError:
        raise ValueError(f"unknown mode {name!r}; expected 'verify' or 'fast'")


def mode() -> str:
    return "verify" if _state.dtype == np.float64 else "fast"


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def using_mode(name: str):
    prev = mode()
    set_mode(name)
    try:
        yield
    finally:
        set_mode(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / decoding)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check(data: np.ndarray, op: str) -> None:
    if _state.finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array plus the graph bookkeeping needed for backward().

    ``grad`` is lazily allocated and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_bwd", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self._parents: tuple = ()
        self._bwd: Optional[Callable[[np.ndarray], None]] = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}{tag}, rg={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- gradient plumbing ---------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate dSelf/dLeaf on every tracked tensor under this scalar."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise GraphError("loss is detached from any tracked tensor")
        if self._done:
            raise GraphError("backward() already ran for this tensor; "
                             "build a fresh graph or reset grads first")
        self._done = True
        order = tape(self)
        self.grad = np.ones_like(self.data)
        # overflow surfaces as the finite check below, not a warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for node in reversed(order):
                if node._bwd is not None and node.grad is not None:
                    g = node.grad
                    if _state.finite_checks and not np.all(np.isfinite(g)):
                        raise NumericError(f"non-finite gradient at op '{node.op}'")
                    node._bwd(g)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swap_last2(self):
        return swap_last2(self)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          bwd: Callable[[np.ndarray], None]) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out.op = op
        out._parents = ()
        out._bwd = None
    return out


def tape(root: Tensor) -> list:
    """Executed-primitive record under ``root`` in topological order.

    Every node's parents precede it; backward replay visits each node once.
    """
    order: list[Tensor] = []
    seen = set()
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
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and linear algebra primitives -------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + b
        return _make(data, "add_const", (a,), lambda g, a=a: a._accum(g))
    data = a.data + b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s
    return _make(data, "scale", (a,), lambda g, a=a, s=s: a._accum(g * s))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _make(data, "matmul", (a, b), bwd)


def swap_last2(a: Tensor) -> Tensor:
    data = np.swapaxes(a.data, -1, -2)
    return _make(data, "swap_last2", (a,),
                 lambda g, a=a: a._accum(np.swapaxes(g, -1, -2)))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)
    return _make(data, "reshape", (a,),
                 lambda g, a=a, old=old: a._accum(g.reshape(old)))


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; fancy indexing is not differentiable here."""
    parts = idx if isinstance(idx, tuple) else (idx,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None))):
            raise ShapeError("take() supports basic indexing only")
    data = a.data[idx]
    if data.base is not None:
        data = data.copy()

    def bwd(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        full[idx] += g
        a._accum(full)

    return _make(data, "take", (a,), bwd)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bwd(g, ts=tuple(ts), sizes=tuple(sizes), axis=axis):
        off = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(off, off + s)
                t._accum(g[tuple(sl)])
            off += s

    return _make(data, "concat", tuple(ts), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, a=a, axis=axis, keepdims=keepdims):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))

    return _make(data, "sum", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g, a=a, y=y: a._accum(g * (1.0 - y * y)))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g, a=a, y=y: a._accum(g * y))


def log(a: Tensor) -> Tensor:
    # domain errors surface through the finite check, not numpy warnings
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.log(a.data)
    return _make(y, "log", (a,), lambda g, a=a: a._accum(g / a.data))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    y = np.maximum(a.data, floor)

    def bwd(g, a=a, floor=floor):
        a._accum(g * (a.data >= floor))

    return _make(y, "clamp_min", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = a.data
    phi = ndtr(x)
    y = (x * phi).astype(x.dtype, copy=False)

    def bwd(g, a=a, phi=phi):
        x = a.data
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accum(g * (phi + x * pdf))

    return _make(y, "gelu", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    ax = axis % a.data.ndim if a.data.ndim else 0
    moved = np.moveaxis(a.data, ax, -1)
    shp = moved.shape
    flat = np.ascontiguousarray(moved).reshape(-1, shp[-1])
    out = np.empty_like(flat)
    softmax_rows(flat, out)
    y = np.moveaxis(out.reshape(shp), -1, ax)

    def bwd(g, a=a, out=out, shp=shp, ax=ax):
        gmoved = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(-1, shp[-1])
        gx = np.empty_like(gmoved)
        softmax_rows_backward(out, gmoved, gx)
        a._accum(np.moveaxis(gx.reshape(shp), -1, ax))

    return _make(y, "softmax", (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each feature vector (axis -2 of a (..., d, N) tensor).

    Zero mean, unit variance (biased, eps added to variance), then affine.
    gain/bias have shape (d, 1).
    """
    if a.ndim < 2:
        raise ShapeError("layer_norm expects (..., d, N)")
    d = a.data.shape[-2]
    moved = np.moveaxis(a.data, -2, -1)          # (..., N, d)
    shp = moved.shape
    x2 = np.ascontiguousarray(moved).reshape(-1, d)
    out2 = np.empty_like(x2)
    mean = np.empty(x2.shape[0], dtype=x2.dtype)
    rstd = np.empty(x2.shape[0], dtype=x2.dtype)
    g1 = np.ascontiguousarray(gain.data.reshape(-1))
    b1 = np.ascontiguousarray(bias.data.reshape(-1))
    layer_norm_rows(x2, g1, b1, eps, out2, mean, rstd)
    y = np.moveaxis(out2.reshape(shp), -1, -2)

    def bwd(g, a=a, gain=gain, bias=bias, x2=x2, g1=g1, mean=mean, rstd=rstd,
            shp=shp, d=d):
        gy2 = np.ascontiguousarray(np.moveaxis(g, -2, -1)).reshape(-1, d)
        gx2 = np.empty_like(gy2)
        ggain = np.zeros(d, dtype=gy2.dtype)
        gbias = np.zeros(d, dtype=gy2.dtype)
        layer_norm_rows_backward(x2, g1, mean, rstd, gy2, gx2, ggain, gbias)
        if a.requires_grad:
            a._accum(np.moveaxis(gx2.reshape(shp), -1, -2))
        if gain.requires_grad:
            gain._accum(ggain.reshape(gain.data.shape))
        if bias.requires_grad:
            bias._accum(gbias.reshape(bias.data.shape))

    return _make(y, "layer_norm", (a, gain, bias), bwd)


def embedding_cols(table: Tensor, ids) -> Tensor:
    """Columns table[:, ids] for a (d, V) embedding table; scatter-add backward."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("ids must be a nonempty 1-D sequence")
    if ids.min() < 0 or ids.max() >= table.data.shape[1]:
        raise ShapeError("token id out of vocabulary range")
    data = table.data[:, ids].copy()

    def bwd(g, table=table, ids=ids):
        full = np.zeros_like(table.data)
        np.add.at(full, (slice(None), ids), g)
        table._accum(full)

    return _make(data, "embedding", (table,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when rate == 0 or not training."""
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep /= (1.0 - rate)
    data = a.data * keep
    return _make(data, "dropout", (a,), lambda g, a=a, keep=keep: a._accum(g * keep))


# -- convolution front-end primitives ----------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    # xp: (..., C, Hp, Wp) zero-padded input; windows stacked as rows.
    lead = xp.shape[:-3]
    C = xp.shape[-3]
    s = xp.strides
    shape = lead + (C, kh, kw, H, W)
    strides = s[:-3] + (s[-3], s[-2], s[-1], s[-2], s[-1])
    cols = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)
    return np.ascontiguousarray(cols).reshape(lead + (C * kh * kw, H * W))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded stride-1 2-D convolution.

    x: (..., C_in, H, W); w: (C_out, C_in, kh, kw) with odd kh, kw; b: (C_out,).
    """
    Cout, Cin, kh, kw = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d supports odd kernel sizes only")
    if x.data.shape[-3] != Cin:
        raise ShapeError("conv2d channel mismatch")
    H, W = x.data.shape[-2], x.data.shape[-1]
    ph, pw = kh // 2, kw // 2
    lead = x.data.shape[:-3]
    pad = [(0, 0)] * len(lead) + [(0, 0), (ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad)
    cols = _im2col(xp, kh, kw, H, W)                     # (..., K, H*W)
    w2 = w.data.reshape(Cout, -1)
    out = np.matmul(w2, cols) + b.data.reshape(-1, 1)    # (..., Cout, H*W)
    out = out.reshape(lead + (Cout, H, W))

    def bwd(g, x=x, w=w, b=b, cols=cols, w2=w2, lead=lead,
            H=H, W=W, kh=kh, kw=kw, ph=ph, pw=pw, Cin=Cin, Cout=Cout):
        g2 = g.reshape(lead + (Cout, H * W))
        if w.requires_grad:
            gw2 = np.matmul(g2, np.swapaxes(cols, -1, -2))
            gw2 = _unbroadcast(gw2, (Cout, Cin * kh * kw))
            w._accum(gw2.reshape(w.data.shape))
        if b.requires_grad:
            gb = g2.sum(axis=-1)
            b._accum(_unbroadcast(gb, (Cout,)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)                  # (..., K, H*W)
            gcols = gcols.reshape(lead + (Cin, kh, kw, H, W))
            gxp = np.zeros(lead + (Cin, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[..., i:i + H, j:j + W] += gcols[..., i, j, :, :]
            gx = gxp[..., ph:ph + H, pw:pw + W] if (ph or pw) else gxp
            x._accum(gx)

    return _make(out, "conv2d", (x, w, b), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling over the last two axes, ceil mode."""
    H, W = x.data.shape[-2], x.data.shape[-1]
    Ho, Wo = -(-H // 2), -(-W // 2)
    lead = x.data.shape[:-2]
    padded = np.pad(x.data, [(0, 0)] * len(lead) + [(0, 2 * Ho - H), (0, 2 * Wo - W)],
                    constant_values=NEG_INF)
    win = padded.reshape(lead + (Ho, 2, Wo, 2))
    win = np.moveaxis(win, -3, -2).reshape(lead + (Ho, Wo, 4))
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g, x=x, idx=idx, lead=lead, H=H, W=W, Ho=Ho, Wo=Wo):
        gwin = np.zeros(lead + (Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gpad = np.moveaxis(gwin.reshape(lead + (Ho, Wo, 2, 2)), -2, -3)
        gpad = gpad.reshape(lead + (2 * Ho, 2 * Wo))
        x._accum(gpad[..., :H, :W])

    return _make(y, "maxpool2x2", (x,), bwd)
