from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


def numeric_grad(f: Callable[..., Tensor], xs: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``f`` with respect to every coordinate of every input."""
    xs = [np.array(x, dtype=np.float64) for x in xs]
    grads = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = _scalar(f, xs)
            flat[i] = old - h
            fm = _scalar(f, xs)
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(f: Callable[..., Tensor], xs: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(x) for x in xs]
    with Tape() as tape:
        tape.watch(*ts)
        y = f(*ts)
    if y.size != 1:
        raise ValueError("grad_check needs a scalar function")
    return tape.gradient(y, ts)


def _scalar(f, xs) -> float:
    try:
        v = float(np.asarray(f(*[Tensor(x) for x in xs]).data).reshape(()))
    except NonFiniteError as e:
        raise NonFiniteError(f"function not finite near the check point: {e}") from e
    if not np.isfinite(v):
        raise NonFiniteError("function not finite near the check point")
    return v


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` may be one array or a sequence of arrays (f then takes that many tensors).

    Raises:
        NonFiniteError: if f is not finite in the h-neighbourhood of x.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    xs = [np.asarray(v, dtype=np.float64) for v in xs]
    ana = analytic_grad(f, xs)
    num = numeric_grad(f, xs, h)
    worst = 0.0
    for a, n in zip(ana, num):
        a = np.asarray(a, dtype=np.float64)
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
