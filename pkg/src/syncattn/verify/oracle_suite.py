"""Closed-form coherence against the integrated pair and network dynamics."""
from __future__ import annotations

import numpy as np

from .. import oracle
from ..engine import SeededRng

MAX_RATIO = 0.95
TOL = 1e-3


def random_locked_pairs(rng: SeededRng, n: int, max_ratio: float = MAX_RATIO):
    kappa = rng.uniform(n, 0.5, 3.0)
    return kappa * rng.uniform(n, 0.0, max_ratio), kappa


def oracle_suite(seed: int = 0, n_pairs: int = 100) -> dict:
    rng = SeededRng(seed)
    dw, kappa = random_locked_pairs(rng, n_pairs)
    res = oracle.steady_state_compare(dw, kappa)
    worst = max(c.abs_diff for c in res)
    stable = all(c.ode > 0 for c in res)
    unlocked = oracle.steady_state_compare(2.0, 1.0)
    n = 10
    sync = oracle.integrate_full(oracle.FullSystem(np.full(n, 0.5), np.full((n, n), 2.0),
                                                   rng.uniform(n, -1.5, 1.5)), t_end=50.0)
    metrics = {"n_pairs": n_pairs, "max_abs_diff": worst, "stable_branch": stable,
               "unlocked_diverges": unlocked.diverged, "identical_r_final": float(sync.r[-1])}
    ok = worst < TOL and stable and unlocked.diverged and sync.r[-1] > 0.999
    return {"pass": bool(ok), "metrics": metrics}
