"""Tensor carrier, runtime settings and the reverse-mode tape."""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import alloc


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class _Settings(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.check_finite = True
        self.tapes: list["Tape"] = []


SETTINGS = _Settings()


def default_dtype():
    return SETTINGS.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the float type used for new tensors (float64/float32)."""
    prev = SETTINGS.dtype
    SETTINGS.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        SETTINGS.dtype = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the NaN/Inf scan at op boundaries. Benchmarks turn it off."""
    prev = SETTINGS.check_finite
    SETTINGS.check_finite = enabled
    try:
        yield
    finally:
        SETTINGS.check_finite = prev


class Tensor:
    """Immutable dense array. ``node`` is set when a tape is tracking it."""

    __slots__ = ("data", "node", "__weakref__")

    def __init__(self, data, dtype=None, label: str | None = None):
        arr = np.array(data, dtype=dtype or SETTINGS.dtype, copy=True)
        self.data = _freeze(arr)
        self.node: Node | None = None
        alloc.record(arr, label or "tensor")

    @classmethod
    def _wrap(cls, arr: np.ndarray, label: str | None = None, check: bool = True) -> "Tensor":
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if check and SETTINGS.check_finite and arr.dtype.kind == "f" and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {label or 'op'}")
        t.data = _freeze(arr)
        t.node = None
        if label is not None:
            alloc.record(arr, label)
        return t

    @classmethod
    def zeros(cls, shape, label: str | None = None) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=SETTINGS.dtype), label or "zeros")

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __len__(self):
        return self.shape[0]

    # operator sugar, resolved lazily to avoid a circular import
    def __add__(self, o):
        from . import ops
        return ops.add(self, o)

    def __radd__(self, o):
        from . import ops
        return ops.add(o, self)

    def __sub__(self, o):
        from . import ops
        return ops.sub(self, o)

    def __rsub__(self, o):
        from . import ops
        return ops.sub(o, self)

    def __mul__(self, o):
        from . import ops
        return ops.mul(self, o)

    def __rmul__(self, o):
        from . import ops
        return ops.mul(o, self)

    def __truediv__(self, o):
        from . import ops
        return ops.div(self, o)

    def __rtruediv__(self, o):
        from . import ops
        return ops.div(o, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, o):
        from . import ops
        return ops.matmul(self, o)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=SETTINGS.dtype), None, check=False)


# ---------------------------------------------------------------------------
# tape

@dataclass(eq=False)
class Node:
    op: str
    index: int
    parents: tuple["Node | None", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class Tape:
    """Records ops on watched tensors; ``gradient`` runs one reverse sweep.

    A tape is bound to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        SETTINGS.tapes.append(self)
        return self

    def __exit__(self, *exc):
        SETTINGS.tapes.remove(self)
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.node is None or not self._owns(t.node):
                t.node = self._add("leaf", (), None, t.shape)

    def _owns(self, node: Node) -> bool:
        return node.index < len(self.nodes) and self.nodes[node.index] is node

    def _add(self, op, parents, backward, shape) -> Node:
        node = Node(op, len(self.nodes), tuple(parents), backward, tuple(shape))
        self.nodes.append(node)
        return node

    def gradient(self, target: Tensor, sources: Sequence[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """d(target)/d(source) for each source; target must be scalar unless seed given."""
        if target.node is None or not self._owns(target.node):
            return [np.zeros(s.shape) for s in sources]
        if seed is None:
            if target.size != 1:
                raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones(target.shape)
        grads: dict[int, np.ndarray] = {target.node.index: np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes[: target.node.index + 1]):
            g = grads.pop(node.index, None) if node.op != "leaf" else grads.get(node.index)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        out = []
        for s in sources:
            if s.node is not None and self._owns(s.node):
                out.append(grads.get(s.node.index, np.zeros(s.shape)))
            else:
                out.append(np.zeros(s.shape))
        return out


def active_tape() -> Tape | None:
    return SETTINGS.tapes[-1] if SETTINGS.tapes else None


def record(op: str, out: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
    """Attach a node for ``out`` if any input is tracked by the active tape."""
    tape = active_tape()
    if tape is None:
        return out
    parents = []
    tracked = False
    for t in inputs:
        if isinstance(t, Tensor) and t.node is not None and tape._owns(t.node):
            parents.append(t.node)
            tracked = True
        else:
            parents.append(None)
    if tracked:
        out.node = tape._add(op, parents, backward, out.shape)
    return out
