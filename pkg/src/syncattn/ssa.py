"""Selective synchronization attention.

Tokens become oscillators: a frequency vector and a phase vector per head.
Pairs whose frequency mismatch is within the effective coupling
``K * r * J_ij`` phase-lock and receive weight ``J_ij * sqrt(1 - ratio**2)``;
every other pair gets exactly zero. Weights are row-normalized and applied to
the values, then heads are concatenated and projected.

Shapes: activations are ``[..., N, D]`` with an optional leading batch;
per-head tensors are ``[..., H, N, d]`` and pairwise ones ``[..., H, N, N]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import engine as E
from .engine import Tensor

EPS = 1e-8
# ratio magnitude cap used only inside the backward of the phase-alignment node
LOCK_BOUNDARY = 1.0 - 1e-6


class ConfigError(ValueError):
    pass


class CouplingMode(Enum):
    FREQUENCY_DEPENDENT = "frequency_dependent"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class CouplingParams:
    """Pre-softplus bandwidth per head and global coupling.

    ``uniform_j`` switches to constant coupling J_ij = uniform_j, which only
    the verification suites use.
    """
    alpha_hat: Tensor
    k_hat: Tensor
    uniform_j: float | None = None

    def __post_init__(self):
        if self.uniform_j is not None and not 0.0 < self.uniform_j <= 1.0:
            raise ConfigError("uniform coupling J must lie in (0, 1]")

    @property
    def mode(self) -> CouplingMode:
        return CouplingMode.UNIFORM if self.uniform_j is not None else CouplingMode.FREQUENCY_DEPENDENT


@dataclass(frozen=True)
class OscillatorState:
    omega: Tensor
    theta: Tensor

    @property
    def heads(self) -> int:
        return self.omega.shape[-3]


@dataclass
class SyncArtifacts:
    J: Tensor
    r: Tensor
    delta_omega: Tensor
    tau: Tensor
    lock_mask: Tensor
    S: Tensor
    S_normalized: Tensor | None = None
    S_sparse: Tensor | None = None
    diagnostics: dict = field(default_factory=dict)

    def nonzero_fraction(self) -> np.ndarray:
        """Per-head fraction of locked pairs (counted by the hard lock mask)."""
        m = self.lock_mask.data
        return m.reshape(m.shape[:-2] + (-1,)).mean(axis=-1)

    def summary(self, batch: int | None = None) -> list[dict]:
        r = self.r.data
        nz = self.nonzero_fraction()
        if r.ndim > 1:
            b = 0 if batch is None else batch
            r, nz = r[b], nz[b]
        return [{"head": h, "r": float(r[h]), "nonzero_fraction": float(nz[h])}
                for h in range(r.shape[0])]

    def write_csv(self, directory: str | Path, prefix: str = "sync", batch: int = 0) -> list[Path]:
        """One CSV per head with columns row,col,J,delta_omega,tau,S,S_normalized."""
        directory = Path(directory)
        cols = [self.J, self.delta_omega, self.tau, self.S, self.S_normalized]
        arrays = [c.data if c is not None else np.full(self.S.shape, np.nan) for c in cols]
        if arrays[0].ndim == 4:
            arrays = [a[batch] for a in arrays]
        heads, n = arrays[0].shape[0], arrays[0].shape[1]
        rows, colsidx = np.divmod(np.arange(n * n), n)
        paths = []
        for h in range(heads):
            path = directory / f"{prefix}_head{h}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["row", "col", "J", "delta_omega", "tau", "S", "S_normalized"])
                flat = [a[h].reshape(-1) for a in arrays]
                for k in range(n * n):
                    w.writerow([int(rows[k]), int(colsidx[k])] + [repr(float(f[k])) for f in flat])
            paths.append(path)
        return paths

    def write_summary(self, path: str | Path, batch: int = 0) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(batch), indent=2))
        return path


# ---------------------------------------------------------------------------

def _split_heads(y: Tensor, heads: int) -> Tensor:
    *lead, n, dim = y.shape
    d = dim // heads
    y = E.reshape(y, (*lead, n, heads, d))
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return E.transpose(y, axes)


def _merge_heads(y: Tensor) -> Tensor:
    *lead, h, n, d = y.shape
    nd = y.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return E.reshape(E.transpose(y, axes), (*lead, n, h * d))


def check_heads(dim: int, heads: int) -> int:
    if heads < 1 or dim % heads:
        raise ConfigError(f"heads must divide dim (dim={dim}, heads={heads})")
    return dim // heads


def project_oscillators(x, W_omega, b_omega, W_theta, b_theta, heads: int) -> OscillatorState:
    """Frequencies and phases per head; frequencies are scaled by 1/sqrt(d)."""
    x = E.as_tensor(x)
    d = check_heads(x.shape[-1], heads)
    omega = E.mul(_split_heads(E.linear_apply(x, W_omega, b_omega), heads), 1.0 / math.sqrt(d))
    theta = _split_heads(E.linear_apply(x, W_theta, b_theta), heads)
    return OscillatorState(E.tag(omega, "omega"), E.tag(theta, "theta"))


def coupling_matrix(state: OscillatorState, params: CouplingParams) -> tuple[Tensor, Tensor]:
    """(J, delta_omega) from one shared pairwise-distance pass."""
    sq = E.tag(E.pairwise_sq_dist(state.omega), "delta_omega_sq")
    delta = E.tag(E.sqrt(sq), "delta_omega")
    if params.uniform_j is not None:
        J = E.tag(E.constant(np.full(sq.shape, params.uniform_j)), "J")
    else:
        alpha = E.reshape(E.softplus(params.alpha_hat), (-1, 1, 1))
        J = E.tag(E.exp(E.neg(E.mul(alpha, sq))), "J")
    return J, delta


def order_parameter(theta) -> Tensor:
    """r = mean over phase dims of |mean over tokens of exp(i theta)|, per head."""
    theta = E.as_tensor(theta)
    if theta.shape[-2] < 1:
        raise ConfigError("order parameter needs at least one token")
    c = E.mean(E.cos(theta), axis=-2)
    s = E.mean(E.sin(theta), axis=-2)
    return E.mean(E.sqrt(E.add(E.square(c), E.square(s))), axis=-1)


def phase_align(ratio: Tensor, J: Tensor) -> Tensor:
    """J * cos(arcsin(ratio)) = J * sqrt(1 - ratio^2), with a bounded backward.

    The backward uses the analytic partials; the ratio is capped at
    LOCK_BOUNDARY there so gradients stay finite next to the lock boundary.
    """
    rd, jd = ratio.data, J.data
    coh = np.sqrt(np.maximum(0.0, 1.0 - rd * rd))

    def backward(g):
        rc = np.clip(rd, -LOCK_BOUNDARY, LOCK_BOUNDARY)
        return -g * jd * rc / np.sqrt(1.0 - rc * rc), g * coh

    return E.custom("phase_align", jd * coh, (ratio, J), backward)


def sync_matrix(J, delta_omega, r, K) -> SyncArtifacts:
    """Threshold, lock mask and closed-form synchronization weights.

    ``r`` is per head ``[..., H]``; ``K`` a positive scalar. A zero ``r``
    unlocks every pair with nonzero mismatch; that is flagged, not raised.
    """
    J, delta_omega, r, K = map(E.as_tensor, (J, delta_omega, r, K))
    tau = E.tag(E.mul(E.mul(K, E.reshape(r, r.shape + (1, 1))), J), "tau")
    ratio = E.tag(E.clamp(E.div(delta_omega, E.add(tau, EPS)), -1.0, 1.0), "ratio")
    mask = E.tag(E.less_equal(delta_omega, tau), "lock_mask")
    S = E.tag(E.where(mask, phase_align(ratio, J), 0.0), "S")
    diag = {"r_zero_heads": int((r.data == 0).sum())}
    return SyncArtifacts(J=J, r=r, delta_omega=delta_omega, tau=tau, lock_mask=mask, S=S,
                         diagnostics=diag)


def dS_dDeltaOmega(delta_omega, tau, J) -> np.ndarray:
    """Analytic partial of S w.r.t. the mismatch with J and tau held fixed.

    -(dw / tau^2) * J / sqrt(1 - (dw/tau)^2) on locked entries (dw < tau),
    ratio capped at LOCK_BOUNDARY; zero at and beyond the boundary.
    """
    dw = np.asarray(delta_omega, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    locked = dw < tau
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.clip(np.where(locked, dw / tau, 0.0), -LOCK_BOUNDARY, LOCK_BOUNDARY)
        val = -(x / np.where(locked, tau, 1.0)) * J / np.sqrt(1.0 - x * x)
    return np.where(locked, val, 0.0)


def topk_sparsify(S, k: int) -> Tensor:
    """Keep the k largest entries of each row (ties: lower column index)."""
    S = E.as_tensor(S)
    n = S.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k needs 1 <= k <= N={n}, got {k}")
    return E.tag(E.where(E.topk_mask(S, k), S, 0.0), "S_topk")


def causal_mask(S) -> Tensor:
    S = E.as_tensor(S)
    n = S.shape[-1]
    return E.where(np.tril(np.ones((n, n), dtype=bool)), S, 0.0)


def normalize_rows(S) -> Tensor:
    S = E.as_tensor(S)
    return E.tag(E.div(S, E.add(E.sum(S, axis=-1, keepdims=True), EPS)), "S_normalized")


def aggregate(S, V) -> Tensor:
    """y_i = sum_j S_ij v_j / (sum_j S_ij + eps)."""
    S, V = E.as_tensor(S), E.as_tensor(V)
    if S.shape[-1] != V.shape[-2]:
        raise E.ShapeError(f"aggregate: S {S.shape} incompatible with V {V.shape}")
    return E.matmul(normalize_rows(S), V)


# ---------------------------------------------------------------------------

SSA_PARAM_NAMES = ("W_omega", "b_omega", "W_theta", "b_theta", "W_V", "b_V", "W_O", "b_O",
                   "alpha_hat", "k_hat")


def mfsh_forward(x, params: Mapping[str, Tensor], heads: int, *, k: int | None = None,
                 causal: bool = False, uniform_j: float | None = None
                 ) -> tuple[Tensor, SyncArtifacts]:
    """Multi-frequency synchronization heads: per-head SSA, concat, output projection.

    Args:
        x: ``[..., N, D]`` input.
        params: mapping with the keys in ``SSA_PARAM_NAMES``.
        heads: number of synchronization heads H (must divide D).
        k: optional top-k per row applied after the lock mask.
        causal: zero S_ij for j > i before normalization.
        uniform_j: constant coupling instead of the frequency kernel.
    """
    x = E.as_tensor(x)
    check_heads(x.shape[-1], heads)
    p = params
    state = project_oscillators(x, p["W_omega"], p["b_omega"], p["W_theta"], p["b_theta"], heads)
    V = _split_heads(E.linear_apply(x, p["W_V"], p["b_V"]), heads)
    coupling = CouplingParams(p["alpha_hat"], p["k_hat"], uniform_j)
    J, delta = coupling_matrix(state, coupling)
    r = order_parameter(state.theta)
    art = sync_matrix(J, delta, r, E.softplus(p["k_hat"]))
    S = art.S
    if k is not None:
        S = topk_sparsify(S, k)
        art.S_sparse = S
    if causal:
        S = causal_mask(S)
    art.S_normalized = normalize_rows(S)
    y = _merge_heads(E.matmul(art.S_normalized, V))
    return E.linear_apply(y, p["W_O"], p["b_O"]), art
