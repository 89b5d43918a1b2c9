"""Verification suites. Each returns ``{"suite", "pass", "metrics", "seed"}``."""
from __future__ import annotations

import json
from pathlib import Path

from .gradbias import (OscillatorPair, ToyTask, TrainingDiverged, TrainResult, distance_correlation,
                       gradbias_suite, positional_bias_check, random_locked_pair,
                       surrogate_grad_error, toy_config, toy_train)
from .init_structure import (attention_uniformity, centered_head_distance, head_distance,
                             init_structure_report, min_head_distance)
from .oracle_suite import oracle_suite
from .sparsity import (SparsityExperiment, SparsityResult, formula_fraction, sparsity_mc,
                       sparsity_suite)
from .universality import (PatternError, PatternSpec, block_pattern, clusters_of,
                           ode_cluster_check, random_pattern, realize_pattern, universality_suite)


def _init_structure_suite(seed: int = 0) -> dict:
    return init_structure_report(seed=seed)


SUITES = {
    "sparsity": sparsity_suite,
    "universality": universality_suite,
    "gradbias": gradbias_suite,
    "init-structure": _init_structure_suite,
    "oracle": oracle_suite,
}


class UnknownSuite(ValueError):
    pass


def suite_names(name: str) -> list[str]:
    if name == "all":
        return list(SUITES)
    if name not in SUITES:
        raise UnknownSuite(f"unknown suite {name!r}; choose from all, {', '.join(SUITES)}")
    return [name]


def run_suite(name: str, seed: int = 0) -> dict:
    out = SUITES[name](seed=seed)
    return {"suite": name, "pass": bool(out["pass"]), "metrics": out["metrics"],
            "seed": seed, **({"checks": out["checks"]} if "checks" in out else {})}


def write_report(report: dict, directory: str | Path) -> Path:
    path = Path(directory) / f"verify_{report['suite']}.json"
    path.write_text(json.dumps(report, indent=2, default=float))
    return path
