"""Fixed-step RK4 integration of Kuramoto dynamics.

Two systems serve as ground truth for the closed-form operator:

* the pairwise reduction  dphi/dt = dw - kappa * sin(phi), kappa = K r J;
* the full heterogeneous network  dtheta_i/dt = w_i + sum_j J_ij sin(theta_j - theta_i).

Phases are kept unwrapped so drift (no lock) is visible as growth.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DT = 0.01
T_END = 200.0
UNLOCK_PHASE = 4 * math.pi


class IntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PairSystem:
    delta_omega: float
    kappa: float
    phi0: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")


@dataclass(frozen=True)
class FullSystem:
    omega: np.ndarray
    J: np.ndarray
    theta0: np.ndarray

    def __post_init__(self):
        J = np.asarray(self.J)
        if J.shape != (len(self.omega), len(self.omega)):
            raise ValueError("J must be N x N")
        if not np.allclose(J, J.T) or np.any(J < 0):
            raise ValueError("J must be symmetric and non-negative")


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _steps(dt: float, t_end: float) -> int:
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    return int(round(t_end / dt))


@dataclass
class PairTrajectory:
    t: np.ndarray
    phi: np.ndarray

    @property
    def final(self) -> float:
        return float(self.phi[-1])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "phi", "cos_phi"])
            for t, p in zip(self.t, self.phi):
                w.writerow([repr(float(t)), repr(float(p)), repr(math.cos(p))])
        return path


def integrate_pairs(delta_omega, kappa, phi0=0.0, dt: float = DT, t_end: float = T_END,
                    record_every: int | None = None):
    """Vectorized pair integration. Returns (times, phi history) or final phi.

    With ``record_every`` the history has one row per recorded step
    (including t=0); otherwise only the final state is returned.
    """
    dw = np.asarray(delta_omega, dtype=np.float64)
    kap = np.asarray(kappa, dtype=np.float64)
    phi = np.broadcast_to(np.asarray(phi0, dtype=np.float64), np.broadcast(dw, kap).shape).copy()
    n = _steps(dt, t_end)

    def f(p):
        return dw - kap * np.sin(p)

    hist, times = [], []
    if record_every:
        hist.append(phi.copy())
        times.append(0.0)
    for s in range(1, n + 1):
        phi = rk4_step(f, phi, dt)
        if not np.all(np.isfinite(phi)):
            raise IntegrationError(f"non-finite phase at t={s * dt:.6g}")
        if record_every and s % record_every == 0:
            hist.append(phi.copy())
            times.append(s * dt)
    if record_every:
        return np.array(times), np.array(hist)
    return phi


def integrate_pair(sys: PairSystem, dt: float = DT, t_end: float = T_END,
                   record_every: int = 1) -> PairTrajectory:
    t, phi = integrate_pairs(sys.delta_omega, sys.kappa, sys.phi0, dt, t_end, record_every)
    return PairTrajectory(t, phi.reshape(-1))


@dataclass
class FullResult:
    theta: np.ndarray
    t: np.ndarray
    r: np.ndarray

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "r"])
            for t, r in zip(self.t, self.r):
                w.writerow([repr(float(t)), repr(float(r))])
        return path


def coherence(theta: np.ndarray) -> float:
    return float(abs(np.exp(1j * np.asarray(theta)).mean()))


def integrate_full(sys: FullSystem, dt: float = DT, t_end: float = T_END) -> FullResult:
    """RK4 on the N-oscillator network, recording r(t) every step."""
    omega = np.asarray(sys.omega, dtype=np.float64)
    J = np.asarray(sys.J, dtype=np.float64)
    theta = np.asarray(sys.theta0, dtype=np.float64).copy()
    n = _steps(dt, t_end)

    def f(th):
        s, c = np.sin(th), np.cos(th)
        # sum_j J_ij sin(th_j - th_i) = cos(th_i) (J sin)_i - sin(th_i) (J cos)_i
        return omega + c * (J @ s) - s * (J @ c)

    r = np.empty(n + 1)
    r[0] = coherence(theta)
    for k in range(1, n + 1):
        theta = rk4_step(f, theta, dt)
        if not np.all(np.isfinite(theta)):
            raise IntegrationError(f"non-finite phase at t={k * dt:.6g}")
        r[k] = coherence(theta)
    return FullResult(theta, np.arange(n + 1) * dt, r)


@dataclass(frozen=True)
class SteadyStateComparison:
    closed_form: float
    ode: float
    abs_diff: float
    locked: bool
    diverged: bool


def closed_form_coherence(delta_omega, kappa):
    """sqrt(1 - (dw/kappa)^2) where locked, NaN otherwise."""
    dw = np.asarray(delta_omega, dtype=np.float64)
    kap = np.asarray(kappa, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = dw / kap
        return np.where(np.abs(dw) <= kap, np.sqrt(np.clip(1.0 - x * x, 0.0, None)), np.nan)


def steady_state_compare(delta_omega, kappa, phi0=0.0, dt: float = DT, t_end: float = T_END):
    """Closed-form coherence vs cos(phi) after integrating the pair equation.

    Accepts scalars (returns one comparison) or arrays (returns a list).
    Unlocked pairs are reported through ``diverged``; their diff is NaN.
    """
    dw = np.atleast_1d(np.asarray(delta_omega, dtype=np.float64))
    kap = np.broadcast_to(np.asarray(kappa, dtype=np.float64), dw.shape)
    if np.any(kap <= 0):
        raise ValueError("kappa must be positive")
    phi = integrate_pairs(dw, kap, phi0, dt, t_end)
    cf = closed_form_coherence(dw, kap)
    ode = np.cos(phi)
    out = []
    for i in range(dw.size):
        locked = bool(abs(dw[i]) <= kap[i])
        diverged = bool(abs(phi[i]) > UNLOCK_PHASE)
        diff = abs(cf[i] - ode[i]) if locked else float("nan")
        out.append(SteadyStateComparison(float(cf[i]), float(ode[i]), float(diff), locked, diverged))
    return out[0] if np.ndim(delta_omega) == 0 else out


def convergence_order(sys: PairSystem, dt: float = 0.2, t_end: float = 10.0) -> float:
    """Observed order p from endpoint errors at dt, dt/2, dt/4."""
    ends = [float(integrate_pairs(sys.delta_omega, sys.kappa, sys.phi0, h, t_end))
            for h in (dt, dt / 2, dt / 4)]
    e1, e2 = abs(ends[0] - ends[1]), abs(ends[1] - ends[2])
    return math.log2(e1 / e2)
