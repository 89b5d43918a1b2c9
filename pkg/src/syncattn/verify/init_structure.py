"""Structure of a freshly initialized block on unit-normal inputs."""
from __future__ import annotations

import itertools

import numpy as np

from .. import model as M
from ..engine import SeededRng, Tensor

R_BAND = (0.80, 0.95)
R_STD_MAX = 0.01
HEAD_DIST_MIN = 0.01
UNIFORMITY_MAX = 1.2


def head_distance(Sa: np.ndarray, Sb: np.ndarray) -> float:
    """||Sa - Sb||_F / sqrt(||Sa||_F ||Sb||_F)."""
    na, nb = np.linalg.norm(Sa), np.linalg.norm(Sb)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    return float(np.linalg.norm(Sa - Sb) / np.sqrt(na * nb))


def centered_head_distance(Sa: np.ndarray, Sb: np.ndarray) -> float:
    """Same distance after removing each matrix's mean and scaling to unit norm.

    Every S at init is close to a constant matrix, which dominates the raw
    norms; this variant compares only the patterns.
    """
    a, b = Sa - Sa.mean(), Sb - Sb.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.linalg.norm(a / na - b / nb))


def min_head_distance(S: np.ndarray, fn=head_distance) -> float:
    """S is [H, N, N]; minimum over unordered head pairs."""
    H = S.shape[0]
    if H < 2:
        return float("nan")
    return min(fn(S[a], S[b]) for a, b in itertools.combinations(range(H), 2))


def attention_uniformity(attn: np.ndarray) -> float:
    """max over rows of (row max / row mean); 1.0 for perfectly uniform attention."""
    a = np.asarray(attn)
    return float((a.max(axis=-1) / a.mean(axis=-1)).max())


def mean_row_uniformity(attn: np.ndarray) -> float:
    a = np.asarray(attn)
    return float((a.max(axis=-1) / a.mean(axis=-1)).mean())


def init_structure_report(config: M.BlockConfig | None = None, n_samples: int = 100, N: int = 256,
                          seed: int = 0, chunk: int = 10) -> dict:
    """Per-head order parameter statistics, head diversity and baseline uniformity.

    Both blocks are initialized from the same seed; inputs are i.i.d. unit
    normal, drawn in chunks so a chunk is one batched forward.
    """
    config = config or M.BlockConfig()
    osn_cfg = M.BlockConfig(**{**config.to_dict(), "block_kind": "osn"})
    tf_cfg = M.BlockConfig(**{**config.to_dict(), "block_kind": "transformer"})
    rng = SeededRng(seed)
    osn = M.init_params(osn_cfg, rng.spawn(1))
    tf = M.init_params(tf_cfg, rng.spawn(1))
    data = rng.spawn(2)
    r_all, dist_raw, dist_centered, nz, unif, unif_mean = [], [], [], [], [], []
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        x = Tensor(data.normal(b * N * config.D).reshape(b, N, config.D))
        _, art = M.osn_block_forward(x, osn, "eval", return_artifacts=True)
        r_all.append(art.r.data)
        nz.append(art.nonzero_fraction())
        S = art.S.data
        del art
        for s in S:
            dist_raw.append(min_head_distance(s))
            dist_centered.append(min_head_distance(s, centered_head_distance))
        _, attn = M.transformer_block_forward(x, tf, "eval", return_attention=True)
        unif.append(attention_uniformity(attn.data))
        unif_mean.append(mean_row_uniformity(attn.data))
        done += b
    r = np.concatenate(r_all)            # [n_samples, H]
    r_mean, r_std = r.mean(axis=0), r.std(axis=0, ddof=1) if n_samples > 1 else np.zeros(r.shape[1])
    metrics = {
        "n_samples": n_samples, "N": N, "D": config.D, "H": config.H,
        "r_mean_per_head": r_mean.tolist(), "r_std_per_head": r_std.tolist(),
        "min_head_distance": float(np.mean(dist_raw)),
        "min_head_distance_worst_sample": float(np.min(dist_raw)),
        "min_head_distance_centered": float(np.mean(dist_centered)),
        "nonzero_fraction": float(np.mean(np.concatenate(nz))),
        "baseline_uniformity": float(np.max(unif)),
        "baseline_uniformity_mean_row": float(np.mean(unif_mean)),
    }
    checks = {
        "r_mean_in_band": bool(np.all((r_mean >= R_BAND[0]) & (r_mean <= R_BAND[1]))),
        "r_std_small": bool(np.all(r_std < R_STD_MAX)),
        "heads_distinct": metrics["min_head_distance"] > HEAD_DIST_MIN,
        "baseline_uniform": metrics["baseline_uniformity"] < UNIFORMITY_MAX,
    }
    return {"pass": all(checks.values()), "metrics": metrics, "checks": checks}
