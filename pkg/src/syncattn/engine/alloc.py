"""Exact element-count accounting for arrays produced by engine ops.

Every array an op materializes is registered here while instrumentation is
on. Lifetimes follow the owning ndarray (views keep their base alive), so the
live count tracks what is actually resident. Counts are elements, not bytes.
"""
from __future__ import annotations

import json
import threading
import weakref
from dataclasses import dataclass, field

import numpy as np


class InstrumentationError(RuntimeError):
    pass


@dataclass
class AllocStats:
    peak_elements: int = 0
    total_elements: int = 0
    labels: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "peak_elements": self.peak_elements,
            "total_elements": self.total_elements,
            "labels": dict(sorted(self.labels.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AllocStats":
        return cls(int(d["peak_elements"]), int(d["total_elements"]),
                   {str(k): int(v) for k, v in d["labels"].items()})


class _Tracker:
    def __init__(self):
        self.enabled = False
        self._lock = threading.Lock()
        self._reset_state()

    def _reset_state(self):
        self.live = 0
        self.peak = 0
        self.total = 0
        self.labels: dict[str, int] = {}
        # id(array) -> (label, size, epoch); epoch guards against stale finalizers
        self.owned: dict[int, tuple[str, int]] = {}
        self.epoch = getattr(self, "epoch", 0) + 1

    def reset(self):
        with self._lock:
            self._reset_state()

    def register(self, arr: np.ndarray, label: str):
        size = int(arr.size)
        with self._lock:
            self.live += size
            self.total += size
            self.peak = max(self.peak, self.live)
            self.labels[label] = self.labels.get(label, 0) + size
            self.owned[id(arr)] = (label, size)
            weakref.finalize(arr, self._release, id(arr), self.epoch)

    def _release(self, key: int, epoch: int):
        with self._lock:
            if epoch != self.epoch:
                return
            entry = self.owned.pop(key, None)
            if entry is not None:
                self.live -= entry[1]

    def relabel(self, arr: np.ndarray, label: str):
        with self._lock:
            entry = self.owned.get(id(arr))
            if entry is None:
                return
            old, size = entry
            self.labels[old] -= size
            if self.labels[old] == 0:
                del self.labels[old]
            self.labels[label] = self.labels.get(label, 0) + size
            self.owned[id(arr)] = (label, size)

    def stats(self) -> AllocStats:
        with self._lock:
            return AllocStats(self.peak, self.total, dict(self.labels))


TRACKER = _Tracker()


class instrument:
    """Context manager turning allocation accounting on, starting from zero."""

    def __enter__(self):
        self._prev = TRACKER.enabled
        TRACKER.reset()
        TRACKER.enabled = True
        return self

    def __exit__(self, *exc):
        TRACKER.enabled = self._prev
        return False

    @staticmethod
    def report() -> AllocStats:
        return alloc_report()


def enable_instrumentation(flag: bool = True):
    TRACKER.enabled = flag


def reset_alloc():
    TRACKER.reset()


def alloc_report() -> AllocStats:
    """Exact counts since the last reset.

    Raises:
        InstrumentationError: if accounting is off (zeros would be misleading).
    """
    if not TRACKER.enabled:
        raise InstrumentationError("allocation instrumentation is disabled")
    return TRACKER.stats()


def record(arr: np.ndarray, label: str) -> None:
    if TRACKER.enabled:
        TRACKER.register(arr, label)


def relabel(arr: np.ndarray, label: str) -> None:
    if TRACKER.enabled:
        TRACKER.relabel(arr, label)
