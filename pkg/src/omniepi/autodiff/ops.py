"""Closed set of differentiable operations.

Every function takes tensors (or constants) and returns a new tensor whose
node maps the output gradient back to the operands. Convolutions use zero
"same" padding. Matmul and convolution report their multiply-accumulate
cost to an active :class:`FlopCounter`.
"""
from __future__ import annotations

import builtins
import contextlib
import itertools
import math

import numpy as np
from scipy.special import erf

from ..errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_result

LN_EPS = 1e-5


class FlopCounter:
    """Accumulates 2 * multiply-accumulate counts by op kind."""

    def __init__(self):
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, flops: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(flops)

    @property
    def total(self) -> int:
        return builtins.sum(self.by_kind.values())


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _report(kind: str, flops: int) -> None:
    for c in _counters:
        c.add(kind, flops)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                       "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), back, "div")


def scale(x: Tensor, s: float) -> Tensor:
    return make_result(x.data * x.dtype.type(s), (x,), lambda g: (g * x.dtype.type(s),), "scale")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return make_result((xd * cdf).astype(xd.dtype), (x,),
                       lambda g: ((g * (cdf + xd * pdf)).astype(xd.dtype),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = (a, as_tensor(b, like=a)) if isinstance(a, Tensor) else (as_tensor(a, like=b), b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = ad @ bd
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    _report("matmul", 2 * math.prod(batch) * m * k * n)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(out, (a, b), back, "matmul")


# --- layout -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {shape}") from None
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),), "permute")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing only."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, type(Ellipsis), type(None))):
            raise ContractError("getitem supports basic indexing only; use take() for gathers")
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[index] += g
        return (gx,)

    return make_result(x.data[index].copy(), (x,), back, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: shapes {ref.shape} and {t.shape} differ")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather entries along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of extent {n}")
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        gx = np.zeros(src_shape, dtype=dtype)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), back, "take")


def index_add(src: Tensor, indices, axis: int, size: int) -> Tensor:
    """Scatter-add ``src`` into a zero tensor with ``size`` entries along ``axis``.

    Repeated indices accumulate.
    """
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % src.ndim
    if idx.ndim != 1 or idx.shape[0] != src.shape[axis]:
        raise ShapeError(f"index_add: {idx.shape[0] if idx.ndim == 1 else idx.shape} indices "
                         f"for axis {axis} of extent {src.shape[axis]}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"index_add: index out of range for target extent {size}")
    shape = list(src.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=src.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(src.data, axis, 0))
    return make_result(out, (src,), lambda g: (np.take(g, idx, axis=axis),), "index_add")


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Fixed separable linear map on the last two axes: ``rows @ x @ cols.T``.

    Used for the bicubic residual, which is not counted as FLOPs.
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ShapeError(f"resample: maps {rows.shape} / {cols.shape} do not fit input {x.shape}")
    return make_result(rows @ x.data @ cols.T, (x,), lambda g: (rows.T @ g @ cols,), "resample")


# --- reductions -------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src_shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src_shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axes, keepdims), 1.0 / n)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# --- normalisation and attention primitives ---------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) broadcasts to ``x``."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax: a row is fully masked and cannot be normalised")
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), back, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise over one axis, then apply the per-channel affine map."""
    axis = axis % x.ndim
    n = x.shape[axis]
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = n
    other = tuple(i for i in range(x.ndim) if i != axis)
    out = xhat
    parents = [x]
    if weight is not None:
        if weight.shape != (n,):
            raise ShapeError(f"layer_norm weight {weight.shape} does not match axis extent {n}")
        out = out * weight.data.reshape(bshape)
        parents.append(weight)
    if bias is not None:
        if bias.shape != (n,):
            raise ShapeError(f"layer_norm bias {bias.shape} does not match axis extent {n}")
        out = out + bias.data.reshape(bshape)
        parents.append(bias)

    def back(g):
        gxhat = g * weight.data.reshape(bshape) if weight is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=axis, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return tuple(grads)

    return make_result(out, parents, back, "layer_norm")


# --- convolution ------------------------------------------------------------

def conv(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation=1, depthwise: bool = False) -> Tensor:
    """N-d cross-correlation with zero 'same' padding.

    ``x``: (B, Cin, *S); ``weight``: (Cout, Cin, *k) for a dense kernel or
    (C, 1, *k) with ``depthwise=True``. Kernel extents must be odd.
    """
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv: input rank {x.ndim} does not match {nd}-d kernel {weight.shape}")
    B, cin = x.shape[:2]
    spatial = x.shape[2:]
    cout, cw = weight.shape[:2]
    ksize = weight.shape[2:]
    dil = (dilation,) * nd if isinstance(dilation, int) else tuple(dilation)
    if depthwise:
        if cw != 1 or cout != cin:
            raise ShapeError(f"depthwise conv needs weight (C,1,...) with C={cin}, got {weight.shape}")
    elif cw != cin:
        raise ShapeError(f"conv: input has {cin} channels, kernel expects {cw}")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"conv: 'same' padding needs odd kernel extents, got {ksize}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv: bias {bias.shape} does not match {cout} output channels")
    pads = [d * (k - 1) // 2 for k, d in zip(ksize, dil)]
    npos = B * math.prod(spatial)
    _report("conv", 2 * (1 if depthwise else cin) * cout * math.prod(ksize) * npos)

    # channel-major layout so every tap is one GEMM over all batch positions
    xc = np.ascontiguousarray(np.moveaxis(x.data, 1, 0))
    xp = np.pad(xc, [(0, 0), (0, 0)] + [(p, p) for p in pads]) if any(pads) else xc
    taps = list(itertools.product(*[range(k) for k in ksize]))
    wd = weight.data

    def window(tap):
        return (slice(None), slice(None)) + tuple(
            slice(t * d, t * d + s) for t, d, s in zip(tap, dil, spatial))

    out = np.zeros((cout, npos), dtype=x.dtype)
    for tap in taps:
        xs = xp[window(tap)].reshape(cin, npos)
        wt = wd[(slice(None), slice(None)) + tap]
        if depthwise:
            out += wt[:, :1] * xs
        else:
            out += wt @ xs
    if bias is not None:
        out += bias.data[:, None]
    result = np.moveaxis(out.reshape((cout, B) + spatial), 0, 1)

    def back(g):
        gc = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(cout, npos)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for tap in taps:
            sl = window(tap)
            xs = xp[sl].reshape(cin, npos)
            wt = wd[(slice(None), slice(None)) + tap]
            if depthwise:
                gw[(slice(None), 0) + tap] = (gc * xs).sum(axis=1)
                gxp[sl] += (wt[:, :1] * gc).reshape((cin, B) + spatial)
            else:
                gw[(slice(None), slice(None)) + tap] = gc @ xs.T
                gxp[sl] += (wt.T @ gc).reshape((cin, B) + spatial)
        inner = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))
        gx = np.moveaxis(gxp[inner], 0, 1)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(gc.sum(axis=1))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(result), parents, back, "conv")
