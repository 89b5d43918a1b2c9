"""Gradient bias of the synchronization weights toward frequency proximity.

Two views of the same effect:

* ``positional_bias_check``: descending L = -S_ij pulls w_i toward w_j,
  ascending it pushes w_i away.
* ``toy_train``: masked-token reconstruction where nearby tokens carry the
  answer; after training the frequency mismatch should grow with |i - j|.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .. import engine as E
from .. import model as M
from .. import ssa
from ..engine import SeededRng, Tape, Tensor

# ---------------------------------------------------------------------------
# surrogate-loss sign check


@dataclass
class OscillatorPair:
    omega: np.ndarray   # [N, d]
    theta: np.ndarray   # [N, d]
    alpha: float = 0.1
    K: float = 5.0


def _sync_entry(omega: Tensor, theta: Tensor, i: int, j: int, alpha: float, K: float) -> Tensor:
    state = ssa.OscillatorState(E.reshape(omega, (1,) + omega.shape),
                                E.reshape(theta, (1,) + theta.shape))
    params = ssa.CouplingParams(Tensor(np.array([E.inverse_softplus(alpha)])),
                                Tensor(np.array(E.inverse_softplus(K))))
    J, delta = ssa.coupling_matrix(state, params)
    r = ssa.order_parameter(state.theta)
    S = ssa.sync_matrix(J, delta, r, K).S
    pick = np.zeros(S.shape)
    pick[0, i, j] = 1.0
    return E.sum(E.mul(S, E.constant(pick)))


def positional_bias_check(osc: OscillatorPair, pair: tuple[int, int], sign: int = -1,
                          eta: float = 1e-3) -> dict:
    """One gradient step on w_i for L = sign * S_ij.

    ``sign=-1`` is the attractive case (distance should shrink), ``+1`` the
    repulsive one. Unlocked pairs get a zero gradient and are reported so.
    """
    if sign not in (-1, 1):
        raise ValueError("sign must be -1 or +1")
    i, j = pair
    omega, theta = Tensor(osc.omega), Tensor(osc.theta)
    with Tape() as tape:
        tape.watch(omega, theta)
        s = _sync_entry(omega, theta, i, j, osc.alpha, osc.K)
        L = E.mul(s, float(sign))
        g_omega, = tape.gradient(L, [omega])
    before = float(np.linalg.norm(osc.omega[i] - osc.omega[j]))
    locked = bool(s.data > 0)
    new = osc.omega.copy()
    new[i] -= eta * g_omega[i]
    after = float(np.linalg.norm(new[i] - osc.omega[j]))
    if not locked:
        correct = bool(np.all(g_omega == 0))
    else:
        correct = after < before if sign < 0 else after > before
    return {"locked": locked, "S_ij": float(s.data), "grad_norm": float(np.linalg.norm(g_omega[i])),
            "dw_before": before, "dw_after": after, "sign_correct": bool(correct)}


def surrogate_grad_error(osc: OscillatorPair, pair: tuple[int, int]) -> float:
    """FD check of d(-S_ij)/d(omega, theta), so the paths through r and J count."""
    i, j = pair
    return E.grad_check(lambda w, t: E.neg(_sync_entry(w, t, i, j, osc.alpha, osc.K)),
                        [osc.omega, osc.theta], h=1e-6)


def random_locked_pair(rng: SeededRng, n: int = 8, d: int = 4, scale: float = 0.3
                       ) -> tuple[OscillatorPair, tuple[int, int]]:
    """Random configuration plus a pair (i != j) whose synchronization weight is positive."""
    while True:
        osc = OscillatorPair(rng.normal(n * d, 0.0, scale).reshape(n, d),
                             rng.normal(n * d, 0.0, 0.5).reshape(n, d))
        i, j = (int(v) for v in rng.integers(2, n))
        if i == j:
            continue
        s = _sync_entry(Tensor(osc.omega), Tensor(osc.theta), i, j, osc.alpha, osc.K)
        # stay off the lock boundary where the finite-difference oracle breaks down
        if s.data > 0.05:
            return osc, (i, j)


# ---------------------------------------------------------------------------
# toy masked-reconstruction task


@dataclass(frozen=True)
class ToyTask:
    """Piecewise-constant sequences: runs of one token, run length in [w+1, 2w+2].

    Masked runs are at most w long, so every masked token has an unmasked
    token from its own run within distance w; farther tokens only carry the
    bag of symbols.
    """
    vocab: int = 16
    N: int = 32
    w: int = 2
    seed: int = 0
    mask_rate: float = 0.15

    def __post_init__(self):
        if not 0 < self.w < self.N:
            raise ValueError("dependency radius must satisfy 0 < w < N")
        if self.vocab < 3:
            raise ValueError("vocab must be >= 3")

    @property
    def mask_token(self) -> int:
        return self.vocab

    def sample(self, rng: SeededRng, batch: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(inputs with mask tokens, targets, mask) each [batch, N]."""
        N, w = self.N, self.w
        # at most N runs per row; lengths and symbols drawn up front
        lengths = w + 1 + rng.integers(batch * N, w + 2).reshape(batch, N)
        steps = 1 + rng.integers(batch * N, self.vocab - 1).reshape(batch, N)
        symbols = np.cumsum(steps, axis=1) % self.vocab  # consecutive runs always differ
        starts = np.cumsum(lengths, axis=1) - lengths
        run_of = (starts[:, None, :] <= np.arange(N)[None, :, None]).sum(-1) - 1
        tokens = np.take_along_axis(symbols, run_of, axis=1)
        u = rng.uniform(batch * N).reshape(batch, N)
        mask = np.zeros((batch, N), dtype=bool)
        run = np.zeros(batch, dtype=np.int64)
        for i in range(N):
            m = (u[:, i] < self.mask_rate) & (run < w)
            mask[:, i] = m
            run = np.where(m, run + 1, 0)
        mask[~mask.any(axis=1), 0] = True
        inputs = np.where(mask, self.mask_token, tokens)
        return inputs, tokens, mask


# token embeddings sit below the position table so shared symbols inside a run
# barely move the initial frequency distances
TOKEN_STD = 0.3
POS_STD = 1.0


@dataclass
class ToyModel:
    config: M.BlockConfig
    tensors: dict[str, Tensor]

    def block_params(self) -> M.BlockParams:
        return M.BlockParams(self.config, {k[6:]: v for k, v in self.tensors.items()
                                           if k.startswith("block.")})


def init_toy_model(task: ToyTask, config: M.BlockConfig, rng: SeededRng) -> ToyModel:
    """Token embedding (+1 mask row), learned position table, one block, linear readout."""
    D = config.D
    t = {"embed": Tensor(rng.normal((task.vocab + 1) * D, 0.0, TOKEN_STD).reshape(-1, D)),
         "pos": Tensor(rng.normal(task.N * D, 0.0, POS_STD).reshape(task.N, D))}
    for k, v in M.init_params(config, rng.spawn(1)).items():
        t["block." + k] = v
    t["head.W"] = Tensor(rng.normal(D * task.vocab, 0.0, D ** -0.5).reshape(D, task.vocab))
    t["head.b"] = Tensor(np.zeros(task.vocab))
    return ToyModel(config, t)


def toy_forward(model: ToyModel, inputs: np.ndarray, *, mode: str = "eval", seed: int = 0,
                call_index: int = 0):
    x = E.add(E.take_rows(model.tensors["embed"], inputs), model.tensors["pos"])
    bp = model.block_params()
    art = None
    if model.config.block_kind is M.BlockKind.OSN:
        y, art = M.osn_block_forward(x, bp, mode, seed=seed, call_index=call_index,
                                     return_artifacts=True)
    else:
        y = M.transformer_block_forward(x, bp, mode, seed=seed, call_index=call_index)
    logits = E.linear_apply(y, model.tensors["head.W"], model.tensors["head.b"])
    return logits, art


def distance_correlation(delta_omega: np.ndarray) -> float:
    """Spearman rho between mismatch and |i - j| over i < j, averaged over batch and heads."""
    dw = np.asarray(delta_omega)
    n = dw.shape[-1]
    iu = np.triu_indices(n, 1)
    dist = (iu[1] - iu[0]).astype(np.float64)
    flat = dw[..., iu[0], iu[1]].reshape(-1, len(dist))
    rhos = []
    for row in flat:
        if np.ptp(row) == 0:
            continue
        rhos.append(spearmanr(row, dist).statistic)
    return float(np.mean(rhos)) if rhos else 0.0


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, log, last_good: ToyModel):
        super().__init__(msg)
        self.log = log
        self.last_good = last_good


@dataclass
class TrainResult:
    log: list[dict]
    model: ToyModel
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def initial(self) -> dict:
        return self.log[0]

    @property
    def final(self) -> dict:
        return self.log[-1]


def _evaluate(model: ToyModel, batch) -> dict:
    inputs, targets, mask = batch
    logits, art = toy_forward(model, inputs)
    loss = float(E.cross_entropy(logits, targets, mask).data)
    if art is None:
        return {"loss": loss, "spearman_rho": float("nan"), "nonzero_fraction": float("nan")}
    return {"loss": loss, "spearman_rho": distance_correlation(art.delta_omega.data),
            "nonzero_fraction": float(art.nonzero_fraction().mean())}


def toy_train(task: ToyTask, config: M.BlockConfig, steps: int = 1000, lr: float = 1.0,
              batch: int = 16, eval_batch: int = 64, log_every: int = 50, seed: int | None = None,
              clip_norm: float | None = 1.0, on_log=None) -> TrainResult:
    """SGD on masked-token cross-entropy.

    The update is plain SGD except that the global gradient norm is clipped
    to ``clip_norm``: gradients spike next to the lock boundary and a single
    unclipped step can blow the frequencies up. Logged metrics come from a
    fixed held-out batch. Dropout draws are keyed by (seed, step).
    """
    seed = task.seed if seed is None else seed
    rng = SeededRng(seed)
    model = init_toy_model(task, config, rng.spawn(0))
    data_rng = rng.spawn(2)
    held_out = task.sample(rng.spawn(3), eval_batch)
    names = list(model.tensors)
    log: list[dict] = []

    def record(step):
        row = {"step": step, **_evaluate(model, held_out)}
        log.append(row)
        if on_log is not None:
            on_log(row)
        return row

    record(0)
    last_good = model
    for step in range(1, steps + 1):
        inputs, targets, mask = task.sample(data_rng, batch)
        try:
            with Tape() as tape:
                params = [model.tensors[n] for n in names]
                tape.watch(*params)
                logits, _ = toy_forward(model, inputs, mode="train", seed=seed, call_index=step)
                loss = E.cross_entropy(logits, targets, mask)
                grads = tape.gradient(loss, params)
        except E.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", log, last_good) from exc
        if not math.isfinite(float(loss.data)) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss at step {step}", log, last_good)
        last_good = model
        if clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > clip_norm:
                grads = [g * (clip_norm / norm) for g in grads]
        model = ToyModel(config, {n: Tensor(p.data - lr * g) for n, p, g in zip(names, params, grads)})
        if step % log_every == 0 or step == steps:
            row = record(step)
            if not math.isfinite(row["loss"]):
                raise TrainingDiverged(f"non-finite eval loss at step {step}", log, last_good)
    meta = {"task": dict(task.__dict__), "config": config.to_dict(), "lr": lr, "batch": batch,
            "steps": steps, "clip_norm": clip_norm}
    return TrainResult(log, model, seed, meta)


def toy_config(kind: str = "osn") -> M.BlockConfig:
    return M.BlockConfig(D=32, H=2, dropout_p=0.0, block_kind=kind)


def gradbias_suite(seed: int = 0, n_pairs: int = 100, steps: int = 1000) -> dict:
    rng = SeededRng(seed)
    attract = repel = 0
    worst_fd = 0.0
    for k in range(n_pairs):
        osc, pair = random_locked_pair(rng)
        attract += positional_bias_check(osc, pair, -1)["sign_correct"]
        repel += positional_bias_check(osc, pair, +1)["sign_correct"]
        if k < 10:
            worst_fd = max(worst_fd, surrogate_grad_error(osc, pair))
    task = ToyTask(seed=seed)
    res = toy_train(task, toy_config("osn"), steps=steps, seed=seed)
    base = toy_train(task, toy_config("transformer"), steps=steps, seed=seed)
    metrics = {
        "attract_correct": attract, "repel_correct": repel, "n_pairs": n_pairs,
        "surrogate_fd_rel_err": worst_fd,
        "rho_init": res.initial["spearman_rho"], "rho_final": res.final["spearman_rho"],
        "loss_init": res.initial["loss"], "loss_final": res.final["loss"],
        "baseline_loss_init": base.initial["loss"], "baseline_loss_final": base.final["loss"],
        "steps": steps,
    }
    ok = (attract == n_pairs and repel == n_pairs and worst_fd < 1e-4
          and res.final["spearman_rho"] > 0 and res.final["loss"] < res.initial["loss"]
          and base.final["loss"] < base.initial["loss"])
    return {"pass": bool(ok), "metrics": metrics}
