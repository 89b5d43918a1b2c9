"""Single-block latency, throughput and allocation benchmarks.

Absolute numbers depend on the host; the scaling exponents and the
allocation structure are what carry over.
"""
from __future__ import annotations

import csv
import json
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from . import model as M
from .engine import SeededRng, Tensor

VARIANTS = ("transformer", "osn-dense", "osn-sparse")
DEFAULT_LENS = (128, 256, 512, 1024)
EXTENDED_LENS = (2048, 4096)
CSV_COLUMNS = ("variant", "N", "B", "mean_ms", "std_ms", "tokens_per_s", "peak_elements",
               "total_elements")
# labels of the pairwise intermediates each variant is expected to materialize
OSN_PAIRWISE = ("delta_omega_sq", "delta_omega", "J", "tau", "ratio", "lock_mask", "S",
                "S_normalized")
TRANSFORMER_PAIRWISE = ("scores", "attn")


@dataclass
class BenchConfig:
    lens: tuple[int, ...] = DEFAULT_LENS
    batch: int | dict[int, int] = 1
    trials: int = 50
    warmup: int = 10
    variants: tuple[str, ...] = VARIANTS
    k: int = 64
    D: int = 512
    H: int = 8
    precision: str = "float32"
    seed: int = 42

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        self.lens = tuple(int(n) for n in self.lens)
        self.variants = tuple(self.variants)
        if not self.lens or min(self.lens) < 1:
            raise ValueError("sequence lengths must be positive")
        if "osn-sparse" in self.variants and self.k > min(self.lens):
            raise ValueError(f"top-k k={self.k} exceeds the shortest length {min(self.lens)}")

    def batch_for(self, n: int) -> int:
        if isinstance(self.batch, dict):
            return int(self.batch.get(n, 1))
        return int(self.batch)

    def block_config(self, variant: str) -> M.BlockConfig:
        kind = "transformer" if variant == "transformer" else "osn"
        k = self.k if variant == "osn-sparse" else None
        return M.BlockConfig(self.D, self.H, dropout_p=0.0, block_kind=kind, sparsity_k=k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lens"] = list(self.lens)
        d["variants"] = list(self.variants)
        if isinstance(self.batch, dict):
            d["batch"] = {str(k): v for k, v in self.batch.items()}
        return d


@dataclass
class BenchRecord:
    variant: str
    N: int
    B: int
    mean_ms: float
    std_ms: float
    tokens_per_s: float
    peak_elements: int
    total_elements: int
    median_ms: float = float("nan")
    labels: dict[str, int] = field(default_factory=dict)
    max_row_nonzeros: int | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchRecord":
        return cls(**d)


def _forward(x, params, variant: str):
    if variant == "transformer":
        return M.transformer_block_forward(x, params, "eval", return_attention=True)
    return M.osn_block_forward(x, params, "eval", return_artifacts=True)


def _input(cfg: BenchConfig, v_idx: int, n: int, b: int, trial: int) -> Tensor:
    rng = SeededRng(E.derive_seed(cfg.seed, v_idx, n, b, trial))
    return Tensor(rng.normal(b * n * cfg.D).reshape(b, n, cfg.D))


def _measure_cell(cfg: BenchConfig, variant: str, v_idx: int, params, n: int) -> BenchRecord:
    b = cfg.batch_for(n)
    # allocation pass: instrumentation on, not timed
    x = _input(cfg, v_idx, n, b, -1)
    with E.instrument():
        y, extra = _forward(x, params, variant)
        max_nz = None
        if variant == "osn-sparse":
            max_nz = int((extra.S_sparse.data != 0).sum(axis=-1).max())
        del y, extra
        stats = E.alloc_report()
    # timed passes: instrumentation off
    for w in range(cfg.warmup):
        _forward(_input(cfg, v_idx, n, b, -2 - w), params, variant)
    times = []
    for t in range(cfg.trials):
        x = _input(cfg, v_idx, n, b, t)
        t0 = time.perf_counter()
        _forward(x, params, variant)
        times.append((time.perf_counter() - t0) * 1e3)
    mean = statistics.fmean(times)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return BenchRecord(variant, n, b, mean, std, b * n / (mean / 1e3), stats.peak_elements,
                       stats.total_elements, statistics.median(times), stats.labels, max_nz)


def run_bench(cfg: BenchConfig, on_record=None) -> list[BenchRecord]:
    """Cells run strictly one after another; an out-of-memory cell is marked skipped."""
    records = []
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    with E.precision(dtype), E.finite_checks(False):
        for v_idx, variant in enumerate(cfg.variants):
            params = M.init_params(cfg.block_config(variant), SeededRng(E.derive_seed(cfg.seed, v_idx)))
            for n in cfg.lens:
                try:
                    rec = _measure_cell(cfg, variant, v_idx, params, n)
                except MemoryError:
                    nan = float("nan")
                    rec = BenchRecord(variant, n, cfg.batch_for(n), nan, nan, nan, -1, -1,
                                      skipped=True)
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
    return records


# ---------------------------------------------------------------------------
# analysis

@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    intercept: float
    r2: float
    n_points: int


def fit_power_law(ns, values) -> ScalingFit:
    """Least squares on log(value) = p log(N) + c."""
    ns = np.asarray(ns, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if len(ns) < 3:
        raise ValueError(f"scaling fit needs >= 3 sequence lengths, got {len(ns)}")
    lx, ly = np.log(ns), np.log(vals)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (p, c), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (p * lx + c)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(p), float(c), r2, len(ns))


def fit_scaling(records: list[BenchRecord], min_n: int = 0) -> dict[str, dict[str, ScalingFit]]:
    """Per variant: exponents for per-batch latency and for peak elements.

    Metrics are divided by B so mixed batch schedules stay comparable.
    """
    out: dict[str, dict[str, ScalingFit]] = {}
    for variant in dict.fromkeys(r.variant for r in records):
        rows = sorted((r for r in records if r.variant == variant and not r.skipped and r.N >= min_n),
                      key=lambda r: r.N)
        ns = [r.N for r in rows]
        out[variant] = {
            "latency": fit_power_law(ns, [r.mean_ms / r.B for r in rows]),
            "peak_elements": fit_power_law(ns, [r.peak_elements / r.B for r in rows]),
        }
    return out


def pairwise_label_count(rec: BenchRecord, labels, heads: int) -> int:
    """How many of ``labels`` hold exactly one B*H*N^2 tensor."""
    target = rec.B * heads * rec.N * rec.N
    return sum(1 for lab in labels if rec.labels.get(lab) == target)


def memory_model_check(records: list[BenchRecord], heads: int = 8, k: int = 64) -> dict:
    """Pairwise-intermediate counts per cell plus the dense/baseline peak ratio."""
    cells = []
    ok = True
    for r in records:
        if r.skipped:
            continue
        if not r.labels:
            raise E.InstrumentationError(f"record {r.variant} N={r.N} has no allocation labels")
        if r.variant == "transformer":
            n = pairwise_label_count(r, ("scores",), heads)
            soft = pairwise_label_count(r, ("attn",), heads)
            good = n == 1 and soft == 1
            cells.append({"variant": r.variant, "N": r.N, "score_tensors": n, "softmax_output": soft,
                          "pass": good})
        else:
            n = pairwise_label_count(r, OSN_PAIRWISE, heads)
            good = n >= 4
            cell = {"variant": r.variant, "N": r.N, "pairwise_tensors": n,
                    "S_elements": r.labels.get("S", 0)}
            if r.variant == "osn-sparse":
                cell["max_row_nonzeros"] = r.max_row_nonzeros
                good = good and r.max_row_nonzeros is not None and r.max_row_nonzeros <= k
            cell["pass"] = good
            cells.append(cell)
        ok &= good
    ratio = None
    dense = {(r.N, r.B): r for r in records if r.variant == "osn-dense" and not r.skipped}
    base = {(r.N, r.B): r for r in records if r.variant == "transformer" and not r.skipped}
    common = sorted(set(dense) & set(base))
    if common:
        key = common[-1]
        ratio = dense[key].peak_elements / base[key].peak_elements
    return {"pass": bool(ok), "cells": cells, "dense_over_baseline_peak": ratio,
            "ratio_at": list(common[-1]) if common else None}


# ---------------------------------------------------------------------------
# output

def write_csv(records: list[BenchRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.variant, r.N, r.B, repr(r.mean_ms), repr(r.std_ms), repr(r.tokens_per_s),
                        r.peak_elements, r.total_elements])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def thread_count() -> str | None:
    for var in ("SYNCATTN_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return f"{var}={os.environ[var]}"
    return None


def write_records_json(records: list[BenchRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=2))
    return path


def read_records_json(path: str | Path) -> list[BenchRecord]:
    return [BenchRecord.from_dict(d) for d in json.loads(Path(path).read_text())]
