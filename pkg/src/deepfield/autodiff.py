"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an ndarray. While a `Tape` is active, every op that touches
a gradient-requiring tensor appends one node (inputs, saved forwards, vjp
closure) to the tape in execution order. `Tape.backward(loss)` walks the node
list in reverse, accumulating vector-Jacobian products into leaf `.grad`
buffers, then the tape is freed. One tape per training step.

Two precision modes are supported: float32 for training and float64 for
verification (finite-difference checks are only meaningful in float64).
`set_default_dtype` switches what new tensors are created as; ops follow the
dtype of their inputs.

Parallelism model: ops are internally data-parallel through numpy/BLAS, but a
tape has a single logical owner. Nothing here locks; do not share an active
tape across threads.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64,
           "float32": np.float32, "float64": np.float64}

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with ('f32' or 'f64')."""
    global _default_dtype
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Dense array plus gradient metadata.

    `grad` is only populated on leaves (tensors not produced by an op on the
    current tape) that have `requires_grad=True`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_creator")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._creator = None  # Node that produced this tensor, if any

    # -- basic introspection ------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype},"
                f" requires_grad={self.requires_grad})")

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that the optimizer will update."""
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=True)


class Node:
    """One recorded op: inputs, output, and the vjp closure."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple, out: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_tape_stack: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Per-step op recording. Use as a context manager; call backward once."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        self.free()
        return False

    def free(self) -> None:
        for node in self.nodes:
            node.out._creator = None
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into leaf.grad for every leaf reached."""
        if loss.size != 1:
            raise ValueError("backward expects a scalar loss")
        pending: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                if inp._creator is not None:
                    k = id(inp)
                    prev = pending.get(k)
                    pending[k] = gi if prev is None else prev + gi
                elif inp.requires_grad:
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                    else:
                        inp.grad += gi


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval-time rendering)."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _record(op: str, inputs: Iterable[Tensor], out_data: np.ndarray,
            vjp: Callable) -> Tensor:
    inputs = tuple(inputs)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out._creator = None
    if needs:
        node = Node(op, inputs, out, vjp)
        out._creator = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _record("mul", (a, b), out, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * ad / (bd * bd), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return _record("div", (a, b), out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x maps to inf, then 1/inf = 0: exact.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, vjp)


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out = a.data * sig
    ad = a.data

    def vjp(g):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return _record("silu", (a,), out, vjp)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record("sum", (a,), np.asarray(out), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    n = a.size if axis is None else np.prod(
        [in_shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record("mean", (a,), np.asarray(out), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    in_shape = a.shape

    def vjp(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (a,), out, vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    in_shape = a.shape

    def vjp(g):
        return (_unbroadcast(g, in_shape),)

    return _record("broadcast", (a,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(parts, tensors))

    return _record("concat", tensors, out, vjp)


def _scatter_add_rows(buf: np.ndarray, idx: np.ndarray,
                      vals: np.ndarray) -> None:
    """buf[idx[k]] += vals[k] over leading rows, duplicates accumulated.

    One bincount pass over flattened (row, element) bins; np.add.at does
    the same job an order of magnitude slower.
    """
    n = buf.shape[0]
    c = int(np.prod(buf.shape[1:], dtype=np.int64)) if buf.ndim > 1 else 1
    flat = idx.astype(np.int64, copy=False) * c
    if c > 1:
        flat = (flat[:, None] + np.arange(c, dtype=np.int64)).ravel()
    acc = np.bincount(flat, weights=np.asarray(vals, dtype=np.float64).ravel(),
                      minlength=n * c)
    buf += acc.reshape(buf.shape).astype(buf.dtype, copy=False)


def index_gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows: out[k] = a[idx[k]]. Backward scatter-adds."""
    idx = np.asarray(idx)
    out = a.data[idx]
    in_shape = a.shape

    def vjp(g):
        buf = np.zeros(in_shape, dtype=g.dtype)
        if idx.ndim == 1:
            _scatter_add_rows(buf, idx, g)
        else:
            np.add.at(buf, idx, g)
        return (buf,)

    return _record("index_gather", (a,), out, vjp)


def index_scatter(a: Tensor, idx: np.ndarray, rows: int) -> Tensor:
    """Inverse of gather: out has `rows` rows, out[idx[k]] = a[k], zeros
    elsewhere. Indices must be unique. Backward gathers."""
    idx = np.asarray(idx)
    out = np.zeros((rows,) + a.shape[1:], dtype=a.dtype)
    out[idx] = a.data

    def vjp(g):
        return (g[idx],)

    return _record("index_scatter", (a,), out, vjp)


# ---------------------------------------------------------------------------
# convolution / upsampling / normalization
# ---------------------------------------------------------------------------

def _im2col2d(xp: np.ndarray, k: int, ho: int, wo: int) -> np.ndarray:
    cin = xp.shape[0]
    col = np.empty((cin, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            col[:, i, j] = xp[:, i:i + ho, j:j + wo]
    return col.reshape(cin * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           padding: int | None = None, pad_mode: str = "zeros") -> Tensor:
    """2-D convolution, stride 1. x: (Cin,H,W), w: (Cout,Cin,k,k).

    Default padding keeps spatial size for odd kernels (k//2). pad_mode
    "edge" replicates the border (supported for padding <= 1); it keeps
    convolutions of spatially constant maps exactly constant.
    """
    cin, h, wd_ = x.shape
    cout, cin2, k, k2 = w.shape
    assert cin == cin2 and k == k2, "kernel/channel mismatch"
    p = k // 2 if padding is None else padding
    if pad_mode == "edge" and p > 1:
        raise ValueError("edge padding supported for padding <= 1")
    if p:
        mode = "edge" if pad_mode == "edge" else "constant"
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)), mode=mode)
    else:
        xp = x.data
    ho, wo = h + 2 * p - k + 1, wd_ + 2 * p - k + 1
    col = _im2col2d(xp, k, ho, wo)                      # (Cin*k*k, Ho*Wo)
    wm = w.data.reshape(cout, cin * k * k)
    out = (wm @ col).reshape(cout, ho, wo)
    if b is not None:
        out += b.data[:, None, None]

    def vjp(g):
        gm = g.reshape(cout, ho * wo)
        gw = (gm @ col.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(1, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcol = (wm.T @ gm).reshape(cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + ho, j:j + wo] += gcol[:, i, j]
            if not p:
                gx = gxp
            elif pad_mode == "edge":
                # fold replicated border gradients back onto the edges
                gx = gxp[:, p:p + h, p:p + wd_].copy()
                gx[:, 0, :] += gxp[:, 0, p:p + wd_]
                gx[:, -1, :] += gxp[:, -1, p:p + wd_]
                gx[:, :, 0] += gxp[:, p:p + h, 0]
                gx[:, :, -1] += gxp[:, p:p + h, -1]
                gx[:, 0, 0] += gxp[:, 0, 0]
                gx[:, 0, -1] += gxp[:, 0, -1]
                gx[:, -1, 0] += gxp[:, -1, 0]
                gx[:, -1, -1] += gxp[:, -1, -1]
            else:
                gx = gxp[:, p:p + h, p:p + wd_]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, vjp)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
           padding: int | None = None, pad_mode: str = "zeros") -> Tensor:
    """1-D convolution, stride 1. x: (Cin,W), w: (Cout,Cin,k).

    pad_mode "edge" replicates the border sample (padding <= 1 only); it
    keeps convolutions of constant signals exactly constant.
    """
    cin, width = x.shape
    cout, cin2, k = w.shape
    assert cin == cin2, "channel mismatch"
    p = k // 2 if padding is None else padding
    if pad_mode == "edge" and p > 1:
        raise ValueError("edge padding supported for padding <= 1")
    if p:
        mode = "edge" if pad_mode == "edge" else "constant"
        xp = np.pad(x.data, ((0, 0), (p, p)), mode=mode)
    else:
        xp = x.data
    wo = width + 2 * p - k + 1
    col = np.empty((cin, k, wo), dtype=xp.dtype)
    for i in range(k):
        col[:, i] = xp[:, i:i + wo]
    col = col.reshape(cin * k, wo)
    wm = w.data.reshape(cout, cin * k)
    out = wm @ col
    if b is not None:
        out += b.data[:, None]

    def vjp(g):
        gw = (g @ col.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcol = (wm.T @ g).reshape(cin, k, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i:i + wo] += gcol[:, i]
            if not p:
                gx = gxp
            elif pad_mode == "edge":
                gx = gxp[:, p:p + width].copy()
                gx[:, 0] += gxp[:, 0]
                gx[:, -1] += gxp[:, -1]
            else:
                gx = gxp[:, p:p + width]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv1d", inputs, out, vjp)


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample of the spatial axes.

    (C,W) -> (C,2W); (C,H,W) -> (C,2H,2W).
    """
    if x.ndim == 2:
        out = np.repeat(x.data, 2, axis=1)

        def vjp(g):
            c, w2 = g.shape
            return (g.reshape(c, w2 // 2, 2).sum(axis=2),)
    elif x.ndim == 3:
        out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

        def vjp(g):
            c, h2, w2 = g.shape
            return (g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)),)
    else:
        raise ValueError("nearest_upsample2x expects (C,W) or (C,H,W)")
    return _record("nearest_upsample2x", (x,), out, vjp)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over (C, *spatial) with per-channel affine."""
    c = x.shape[0]
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    spatial = x.shape[1:]
    m = c // groups * int(np.prod(spatial, dtype=np.int64)) if spatial else c // groups
    xg = x.data.reshape(groups, m)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gshape = (c,) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def vjp(g):
        red = tuple(range(1, x.ndim))
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = (g * gamma.data.reshape(gshape)).reshape(groups, m)
            xh = xhat.reshape(groups, m)
            # d/dx of (x-mu)/std with mu, std functions of the group
            t = dxh - dxh.mean(axis=1, keepdims=True) \
                - xh * (dxh * xh).mean(axis=1, keepdims=True)
            gx = (t * inv).reshape(x.shape)
        return gx, ggamma, gbeta

    return _record("group_norm", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------------------
# grid interpolation (cell-centered nodes: node i sits at (i + 0.5) / R)
# ---------------------------------------------------------------------------

def _lerp_setup(u: np.ndarray, r: int):
    """Continuous coord in [0,1] -> neighbor indices and weight.

    Out-of-range coords clamp to the edge nodes (constant extension).
    """
    p = u * r - 0.5
    i0 = np.floor(p)
    w = p - i0
    i0 = i0.astype(np.int64)
    i0c = np.clip(i0, 0, r - 1)
    i1c = np.clip(i0 + 1, 0, r - 1)
    return i0c, i1c, w


def linear_interp_1d(vec: Tensor, u: np.ndarray) -> Tensor:
    """Sample a (C,R) line of features at N coords in [0,1] -> (N,C)."""
    c, r = vec.shape
    i0, i1, w = _lerp_setup(np.asarray(u, dtype=vec.dtype), r)
    vt = np.ascontiguousarray(vec.data.T)               # (R,C) row gathers
    w1 = w[:, None]
    w0 = 1.0 - w1
    out = vt[i0] * w0 + vt[i1] * w1

    def vjp(g):
        buf = np.zeros((r, c), dtype=g.dtype)
        _scatter_add_rows(buf, np.concatenate([i0, i1]),
                          np.concatenate([g * w0, g * w1]))
        return (buf.T.copy(),)

    return _record("linear_interp_1d", (vec,), out, vjp)


def bilinear_interp_2d(mat: Tensor, uv: np.ndarray) -> Tensor:
    """Sample a (C,R,R) plane of features at N (u,v) coords -> (N,C).

    uv[:,0] indexes the first spatial axis, uv[:,1] the second.
    """
    c, r, r2 = mat.shape
    assert r == r2, "square planes only"
    uv = np.asarray(uv, dtype=mat.dtype)
    i0, i1, wu = _lerp_setup(uv[:, 0], r)
    j0, j1, wv = _lerp_setup(uv[:, 1], r)
    mt = np.ascontiguousarray(mat.data.reshape(c, r * r).T)   # (R*R, C)
    f00 = i0 * r + j0
    f01 = i0 * r + j1
    f10 = i1 * r + j0
    f11 = i1 * r + j1
    wu1 = wu[:, None]
    wv1 = wv[:, None]
    wu0 = 1.0 - wu1
    wv0 = 1.0 - wv1
    out = ((mt[f00] * wv0 + mt[f01] * wv1) * wu0
           + (mt[f10] * wv0 + mt[f11] * wv1) * wu1)

    def vjp(g):
        buf = np.zeros((r * r, c), dtype=g.dtype)
        gu0 = g * wu0
        gu1 = g * wu1
        _scatter_add_rows(
            buf, np.concatenate([f00, f01, f10, f11]),
            np.concatenate([gu0 * wv0, gu0 * wv1, gu1 * wv0, gu1 * wv1]))
        return (buf.T.reshape(c, r, r).copy(),)

    return _record("bilinear_interp_2d", (mat,), out, vjp)


# ---------------------------------------------------------------------------
# finite-difference verification (float64 only)
# ---------------------------------------------------------------------------

def finite_difference_grad(fn: Callable[[], Tensor], t: Tensor,
                           h: float = 1e-4) -> np.ndarray:
    """Central-difference d(fn())/d(t) evaluated element by element.

    `fn` must read `t.data` afresh on every call and return a scalar Tensor.
    Only meaningful in float64.
    """
    if t.data.dtype != np.float64:
        raise ValueError("finite differences require float64 tensors")
    g = np.zeros_like(t.data)
    flat = t.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = fn().data.item()
        flat[i] = orig - h
        with no_grad():
            fm = fn().data.item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
