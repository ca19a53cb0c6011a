"""Differentiable primitives.

Each function takes :class:`~distilsrl.tensor.Tensor` operands (python scalars
and arrays are accepted where noted and treated as constants) and returns a
new tensor whose backward closure is registered on the graph.

Broadcasting is limited to the trailing-axis case: an operand whose shape is a
suffix of the other's shape (a bias vector against a ``B x T x D`` activation,
or a scalar).  Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

GELU_C = float(np.sqrt(2.0 / np.pi))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa != sb and not _is_suffix(sb, sa) and not _is_suffix(sa, sb):
        raise ShapeError(f"cannot broadcast shapes {sa} and {sb} (trailing-axis broadcasting only)")
    return a, b


def _is_suffix(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and tuple(long[len(long) - len(short):]) == tuple(short)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _acc_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    # reductions accumulate in float64 whatever the storage precision
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)


# --------------------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = _acc_sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_node(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return make_node(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return make_node(y, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(y, (a,), back, "gelu")


# --------------------------------------------------------------------------- last-axis normalizers

def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / _acc_sum(e, axis=-1, keepdims=True)

    def back(g):
        return (y * (g - _acc_sum(g * y, axis=-1, keepdims=True)),)

    return make_node(y, (a,), back, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(_acc_sum(np.exp(z), axis=-1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * _acc_sum(g, axis=-1, keepdims=True),)

    return make_node(y, (a,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * rstd).astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    y = xhat * gain.data + bias.data

    def back(g):
        dxhat = g * gain.data
        dx = rstd / d * (d * dxhat - _acc_sum(dxhat, axis=-1, keepdims=True)
                         - xhat * _acc_sum(dxhat * xhat, axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return make_node(y, (x, gain, bias), back, "layer_norm")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt(_acc_sum(a.data * a.data, axis=-1, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    y = a.data / denom

    def back(g):
        proj = _acc_sum(g * y, axis=-1, keepdims=True)
        return (np.where(clipped, g / denom, (g - y * proj) / denom),)

    return make_node(y, (a,), back, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine over the last axis; 0 (with zero gradient) if either norm < eps."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt(_acc_sum(a.data * a.data, axis=-1))
    nb = np.sqrt(_acc_sum(b.data * b.data, axis=-1))
    dead = (na < eps) | (nb < eps)
    na_s = np.where(dead, 1.0, na).astype(a.dtype)
    nb_s = np.where(dead, 1.0, nb).astype(a.dtype)
    dot = _acc_sum(a.data * b.data, axis=-1)
    c = np.where(dead, 0.0, dot / (na_s * nb_s)).astype(a.dtype)

    def back(g):
        gg = np.where(dead, 0.0, g)[..., None]
        nna, nnb, cc = na_s[..., None], nb_s[..., None], c[..., None]
        da = gg * (b.data / (nna * nnb) - cc * a.data / (nna * nna))
        db = gg * (a.data / (nna * nnb) - cc * b.data / (nnb * nnb))
        return da.astype(a.dtype), db.astype(b.dtype)

    return make_node(c, (a, b), back, "cosine_similarity")


def mean_pool_time(x: Tensor) -> Tensor:
    """Average over the time axis of ``... x T x D``."""
    if x.ndim < 2:
        raise ShapeError(f"mean_pool_time needs (..., T, D), got {x.shape}")
    return mean(x, axis=-2)


# --------------------------------------------------------------------------- shape ops

def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tensors, back, "concat")


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (builtins.slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def slice(a: Tensor, idx) -> Tensor:  # noqa: A001
    out = np.array(a.data[idx])
    basic = _basic_index(idx)

    def back(g):
        z = np.zeros_like(a.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make_node(out, (a,), back, "slice")


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return make_node(np.pad(x.data, width), (x,), lambda g: (g[..., left:left + n],), "pad_time")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., M, K) @ (..., K, N)`` with equal batch axes, or ``(..., M, K) @ (K, N)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared_b = b.ndim == 2 and a.ndim > 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = None
        if b.requires_grad:
            if shared_b:
                k, n = b.shape
                db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return da, db

    return make_node(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is ``C_in x T`` or ``B x C_in x T``; ``w`` is ``C_out x C_in/groups x k``.
    Output length is ``(T - k) // stride + 1``.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected (B, C, T) input and (O, C/g, k) weight, got {x.shape}, {w.shape}")
    bsz, c_in, t = xd.shape
    c_out, cg, k = w.shape
    if c_in % groups or c_out % groups or cg != c_in // groups:
        raise ShapeError(f"conv1d: channels {c_in}->{c_out} with groups={groups} do not fit weight {w.shape}")
    if t < k:
        raise ValueError(f"conv1d: input too short (T={t} < kernel {k})")
    t_out = (t - k) // stride + 1
    og = c_out // groups
    xg = xd.reshape(bsz, groups, cg, t)
    win = np.lib.stride_tricks.sliding_window_view(xg, k, axis=-1)[..., ::stride, :][..., :t_out, :]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2, 4)).reshape(bsz, groups, t_out, cg * k)
    wmat = w.data.reshape(groups, og, cg * k).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # B, G, T_out, Og
    out = out.transpose(0, 1, 3, 2).reshape(bsz, c_out, t_out)
    if unbatched:
        out = out[0]

    def back(g):
        gd = g[None] if unbatched else g
        gt = gd.reshape(bsz, groups, og, t_out).transpose(0, 1, 3, 2)  # B, G, T_out, Og
        dw = None
        if w.requires_grad:
            dw = np.matmul(np.swapaxes(cols, -1, -2), gt).sum(axis=0)  # G, Cg*k, Og
            dw = dw.transpose(0, 2, 1).reshape(c_out, cg, k)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(gt, np.swapaxes(wmat, -1, -2)).reshape(bsz, groups, t_out, cg, k)
            dxg = np.zeros((bsz, groups, cg, t), dtype=xd.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                dxg[..., j:j + span:stride] += dcols[..., j].transpose(0, 1, 3, 2)
            dx = dxg.reshape(bsz, c_in, t)
            if unbatched:
                dx = dx[0]
        return dx, dw

    return make_node(out, (x, w), back, "conv1d")
