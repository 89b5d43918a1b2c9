"""Differentiable op set.

Each op computes its forward with numpy, wraps the result (allocation +
finiteness bookkeeping) and, when a tape is tracking an input, records a
closure mapping the output gradient to input gradients. Backward closures
work on plain arrays; there is no higher-order differentiation.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from . import alloc
from .tensor import SETTINGS, ShapeError, Tensor, as_tensor, record

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(op: str, arr: np.ndarray, inputs: Sequence, backward) -> Tensor:
    if arr.dtype.kind == "f" and arr.dtype != SETTINGS.dtype:
        arr = arr.astype(SETTINGS.dtype)
    return record(op, Tensor._wrap(arr, op), inputs, backward)


def custom(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Register a node with a hand-written backward (validate it with grad_check)."""
    return _emit(op, arr, inputs, backward)


def tag(t: Tensor, label: str) -> Tensor:
    """Attribute ``t``'s allocation to ``label`` in the accounting breakdown."""
    alloc.relabel(t.data if t.data.base is None else t.data.base, label)
    return t


def constant(x, label: str = "constant") -> Tensor:
    return Tensor._wrap(np.array(x, dtype=SETTINGS.dtype), label)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", ad @ bd, (a, b), backward)


def linear_apply(x, W, b=None) -> Tensor:
    """y = x W + b over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear_apply: x {x.shape} incompatible with W {W.shape}")
    y = matmul(x, W)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear_apply: bias {b.shape} does not match W {W.shape}")
    return add(y, b)


# ---------------------------------------------------------------------------
# elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    """Square root; the backward at exactly 0 is taken as 0 (subgradient convention)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _emit("sqrt", out, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def arcsin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(np.abs(ad) > 1):
        raise ValueError("arcsin argument outside [-1, 1]")
    # the derivative diverges at |x| = 1; bound it the same way as the lock boundary
    xc = np.clip(ad, -1 + 1e-6, 1 - 1e-6)
    return _emit("arcsin", np.arcsin(ad), (a,), lambda g: (g / np.sqrt(1.0 - xc * xc),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * special.expit(ad),))


def inverse_softplus(y: float) -> float:
    """x with softplus(x) == y, for initializing positive parameters."""
    return float(y + math.log(-math.expm1(-y)))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]. Gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return _emit("clamp", np.clip(ad, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where mask else ``b``; no gradient flows through the unselected side."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (None, _unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb))

    return _emit("where", np.where(m, a.data, b.data), (mask, a, b), backward)


def less_equal(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._wrap(a.data <= b.data, "less_equal")


def dropout(x, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = rng.uniform(x.size).reshape(x.shape) >= p
    return mul(x, constant(keep / (1.0 - p), "dropout_mask"))


# ---------------------------------------------------------------------------
# reductions and shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = Tensor._wrap(np.broadcast_to(a.data, shape), None, check=False)
    return record("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.reshape(a.data, shape)
    label = None if np.shares_memory(out, a.data) else "reshape"
    return record("reshape", Tensor._wrap(out, label, check=False), (a,),
                  lambda g: (np.reshape(g, src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    out = Tensor._wrap(np.transpose(a.data, axes), None, check=False)
    return record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup); gradient scatters back."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _emit("take_rows", table.data[idx], (table,), backward)


# ---------------------------------------------------------------------------
# composites with single analytic backward nodes

def layer_norm(x, scale, shift, eps: float = LN_EPS) -> Tensor:
    """Per-row standardization (biased variance) followed by an affine map."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    sd = scale.data

    def backward(g):
        gscale = _unbroadcast(g * xhat, sd.shape)
        gshift = _unbroadcast(g, sd.shape)
        gh = g * sd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gscale, gshift

    return _emit("layer_norm", xhat * sd + shift.data, (x, scale, shift), backward)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))

    def backward(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return _emit("gelu", xd * cdf, (x,), backward)


def stable_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), backward)


softmax = stable_softmax


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), backward)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``weights`` (same shape as targets) selects/weights positions; the mean is
    over the weight mass.
    """
    lp = log_softmax(logits)
    t = np.asarray(targets, dtype=np.int64)
    w = np.ones(t.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    onehot = np.zeros(lp.shape)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    coef = constant(-onehot * (w / w.sum())[..., None], "ce_weights")
    return sum(mul(lp, coef))


def pairwise_sq_dist(A, chunk_elems: int = 1 << 22) -> Tensor:
    """D[..., i, j] = sum_l (A[..., i, l] - A[..., j, l])**2.

    Computed from explicit differences in row chunks so the result is exactly
    symmetric with an exactly zero diagonal (no Gram-matrix cancellation).
    """
    A = as_tensor(A)
    if A.ndim < 2 or A.shape[-2] < 1:
        raise ShapeError(f"pairwise_sq_dist expects [..., N, d], got {A.shape}")
    ad = A.data
    n, d = ad.shape[-2], ad.shape[-1]
    lead = ad.shape[:-2]
    out = np.empty(lead + (n, n), dtype=ad.dtype)
    per_row = max(1, int(np.prod(lead, dtype=np.int64)) * n * d)
    step = max(1, chunk_elems // per_row)
    for i0 in range(0, n, step):
        i1 = min(n, i0 + step)
        diff = ad[..., i0:i1, None, :] - ad[..., None, :, :]
        out[..., i0:i1, :] = np.einsum("...ijl,...ijl->...ij", diff, diff)

    def backward(g):
        gs = g + np.swapaxes(g, -1, -2)
        return (2.0 * (gs.sum(axis=-1)[..., None] * ad - gs @ ad),)

    return _emit("pairwise_sq_dist", out, (A,), backward)


def topk_mask(x, k: int) -> Tensor:
    """Boolean mask of the k largest entries per row (last axis); ties keep the lower index."""
    x = as_tensor(x)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-x.data, axis=-1, kind="stable")[..., :k]
    m = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(m, order, True, axis=-1)
    return Tensor._wrap(m, "topk_mask")
