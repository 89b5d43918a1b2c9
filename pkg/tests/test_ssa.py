import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from syncattn import engine as E
from syncattn import ssa
from syncattn.engine import SeededRng, Tensor

# frozen from scalar evaluation: exp(-0.25) and J*sqrt(1-(0.5/J)^2)
J_QUARTER = 0.7788007830714049
S_QUARTER = 0.5971018838629077


def _rand(seed, *shape, scale=1.0):
    return SeededRng(seed).normal(int(np.prod(shape))).reshape(shape) * scale


def _params(D, H, seed=0, std=0.3, alpha=0.1, K=5.0):
    rng = SeededRng(seed)
    p = {}
    for name in ("omega", "theta", "V", "O"):
        p[f"W_{name}"] = Tensor(rng.normal(D * D, 0, std).reshape(D, D))
        p[f"b_{name}"] = Tensor(rng.normal(D, 0, 0.1))
    p["alpha_hat"] = Tensor(np.full(H, E.inverse_softplus(alpha)))
    p["k_hat"] = Tensor(E.inverse_softplus(K))
    return p


def _state(omega, theta=None):
    omega = np.asarray(omega, dtype=float)
    theta = np.zeros_like(omega) if theta is None else np.asarray(theta, dtype=float)
    return ssa.OscillatorState(Tensor(omega), Tensor(theta))


def _coupling(H, alpha=1.0, uniform_j=None):
    return ssa.CouplingParams(Tensor(np.full(H, E.inverse_softplus(alpha))),
                              Tensor(E.inverse_softplus(1.0)), uniform_j)


# -- project_oscillators ---------------------------------------------------

def test_project_zero_weights_gives_zero_mismatch():
    D, H = 8, 2
    x = Tensor(_rand(1, 6, D))
    Z = Tensor(np.zeros((D, D)))
    st_ = ssa.project_oscillators(x, Z, Tensor(np.zeros(D)), Z, Tensor(np.zeros(D)), H)
    assert not st_.omega.data.any()
    J, dw = ssa.coupling_matrix(st_, _coupling(H))
    assert not dw.data.any()


def test_project_constant_input_gives_bias_over_sqrt_d():
    D, H = 8, 2
    b = _rand(2, D)
    W = Tensor(_rand(3, D, D))
    st_ = ssa.project_oscillators(Tensor(np.zeros((5, D))), W, Tensor(b), W, Tensor(b), H)
    expect = b.reshape(H, D // H) / math.sqrt(D // H)
    for i in range(5):
        np.testing.assert_allclose(st_.omega.data[:, i, :], expect, atol=1e-15)


def test_project_matches_loop_oracle():
    N, D, H = 6, 8, 2
    d = D // H
    x, Ww, bw, Wt, bt = _rand(4, N, D), _rand(5, D, D), _rand(6, D), _rand(7, D, D), _rand(8, D)
    st_ = ssa.project_oscillators(Tensor(x), Tensor(Ww), Tensor(bw), Tensor(Wt), Tensor(bt), H)
    for h in range(H):
        for i in range(N):
            for l in range(d):
                col = h * d + l
                w = sum(x[i, m] * Ww[m, col] for m in range(D)) + bw[col]
                t = sum(x[i, m] * Wt[m, col] for m in range(D)) + bt[col]
                assert abs(st_.omega.data[h, i, l] - w / math.sqrt(d)) < 1e-12
                assert abs(st_.theta.data[h, i, l] - t) < 1e-12


def test_project_rejects_bad_heads():
    with pytest.raises(ssa.ConfigError, match="heads must divide dim"):
        Z = Tensor(np.zeros((7, 7)))
        ssa.project_oscillators(Tensor(np.zeros((2, 7))), Z, Tensor(np.zeros(7)), Z,
                                Tensor(np.zeros(7)), 2)


# -- coupling ---------------------------------------------------------------

def test_coupling_values():
    omega = np.zeros((1, 4, 1))
    omega[0, 1, 0] = 0.0
    omega[0, 2, 0] = math.sqrt(math.log(2.0))
    omega[0, 3, 0] = 0.5
    J, dw = ssa.coupling_matrix(_state(omega), _coupling(1, alpha=1.0))
    assert J.data[0, 0, 1] == 1.0 and dw.data[0, 0, 1] == 0.0
    assert abs(J.data[0, 0, 2] - 0.5) < 1e-12
    assert abs(J.data[0, 0, 3] - J_QUARTER) < 1e-12
    np.testing.assert_array_equal(J.data, np.swapaxes(J.data, -1, -2))


def test_uniform_coupling_mode():
    J, _ = ssa.coupling_matrix(_state(_rand(1, 2, 5, 3)), _coupling(2, uniform_j=0.4))
    assert np.all(J.data == 0.4)
    with pytest.raises(ssa.ConfigError):
        _coupling(1, uniform_j=1.5)


# -- order parameter --------------------------------------------------------

def test_order_parameter_cases():
    assert abs(ssa.order_parameter(Tensor(np.full((1, 7, 3), 2.3))).data[0] - 1.0) < 1e-12
    quarter = np.array([0, np.pi / 2, np.pi, 3 * np.pi / 2])
    th = np.stack([quarter, quarter], axis=-1)[None]
    assert abs(ssa.order_parameter(Tensor(th)).data[0]) < 1e-12
    th = np.stack([np.zeros(4), quarter], axis=-1)[None]
    assert abs(ssa.order_parameter(Tensor(th)).data[0] - 0.5) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 12), st.integers(1, 4))
def test_order_parameter_in_unit_interval(seed, n, d):
    r = ssa.order_parameter(Tensor(_rand(seed, 2, n, d, scale=3.0))).data
    assert np.all(r >= 0) and np.all(r <= 1 + 1e-12)


# -- sync matrix ------------------------------------------------------------

def _sync_scalar(J, dw, Kr):
    a = ssa.sync_matrix(Tensor([[[J]]]), Tensor([[[dw]]]), Tensor([1.0]), Kr)
    return float(a.S.data[0, 0, 0])


def test_sync_examples():
    assert _sync_scalar(1.0, 0.0, 1.0) == 1.0
    assert abs(_sync_scalar(1.0, 0.6, 1.0) - 0.8) < 1e-7
    assert _sync_scalar(1.0, 2.0, 1.0) == 0.0
    assert abs(_sync_scalar(J_QUARTER, 0.5, 1.0) - S_QUARTER) < 1e-6


def test_sync_zero_order_parameter_unlocks_off_diagonal():
    omega = _rand(3, 1, 5, 2)
    J, dw = ssa.coupling_matrix(_state(omega), _coupling(1))
    a = ssa.sync_matrix(J, dw, Tensor([0.0]), 3.0)
    np.testing.assert_array_equal(a.S.data[0], np.eye(5))
    assert a.diagnostics["r_zero_heads"] == 1


def test_identical_tokens_give_all_ones():
    omega = np.tile(_rand(5, 1, 1, 3), (1, 6, 1))
    J, dw = ssa.coupling_matrix(_state(omega), _coupling(1))
    a = ssa.sync_matrix(J, dw, Tensor([0.7]), 2.0)
    np.testing.assert_array_equal(a.S.data, np.ones((1, 6, 6)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 10), st.floats(0.01, 3.0), st.floats(0.05, 20.0))
def test_sync_invariants(seed, n, alpha, K):
    omega = _rand(seed, 2, n, 3)
    theta = _rand(seed + 1, 2, n, 3)
    J, dw = ssa.coupling_matrix(_state(omega, theta), _coupling(2, alpha))
    r = ssa.order_parameter(Tensor(theta))
    a = ssa.sync_matrix(J, dw, r, K)
    S = a.S.data
    np.testing.assert_array_equal(np.diagonal(S, axis1=-2, axis2=-1), 1.0)
    np.testing.assert_allclose(S, np.swapaxes(S, -1, -2), atol=1e-15)
    assert np.all(S >= 0) and np.all(S <= 1)
    locked = dw.data <= a.tau.data
    assert np.all(S[~locked] == 0)
    # strictly inside the lock region weights are positive
    interior = dw.data < a.tau.data * (1 - 1e-6)
    assert np.all(S[interior] > 0)
    assert np.all((J.data > 0) & (J.data <= 1))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.1, 1.0))
def test_sync_monotone_in_mismatch(kr, J):
    tau = kr * J
    dws = np.linspace(0, tau, 50)
    S = ssa.sync_matrix(Tensor(np.full((1, 1, 50), J)), Tensor(dws[None, None]), Tensor([1.0]),
                        kr).S.data[0, 0]
    assert np.all(np.diff(S) <= 1e-15)


# -- analytic derivative -----------------------------------------------------

def test_dS_examples():
    assert ssa.dS_dDeltaOmega(0.0, 1.0, 1.0) == 0.0
    # central difference of sqrt(1 - x^2) at 0.5, h=1e-5
    assert abs(ssa.dS_dDeltaOmega(0.5, 1.0, 1.0) - (-0.5773502692429933)) < 1e-6
    assert ssa.dS_dDeltaOmega(1.2, 1.0, 1.0) == 0.0


def test_dS_matches_fd_at_random_interior_points():
    rng = SeededRng(11)
    J = rng.uniform(100, 0.2, 1.0)
    tau = J * rng.uniform(100, 0.5, 3.0)
    dw = tau * rng.uniform(100, 0.0, 0.9)
    ana = ssa.dS_dDeltaOmega(dw, tau, J)
    h = 1e-6

    def S(x):
        return J * np.sqrt(1.0 - (x / tau) ** 2)

    fd = (S(dw + h) - S(dw - h)) / (2 * h)
    assert np.all(ana <= 0)
    assert np.max(np.abs(ana - fd) / np.maximum(1.0, np.abs(ana))) < 1e-6


def test_tape_gradient_through_sync_matches_analytic_partial():
    J = np.array([[[0.9, 0.6], [0.6, 0.9]]])
    dw = np.array([[[0.0, 0.3], [0.3, 0.0]]])
    dw_t, J_t = Tensor(dw), Tensor(J)
    with E.Tape() as tape:
        tape.watch(dw_t)
        a = ssa.sync_matrix(J_t, dw_t, Tensor([1.0]), 1.0)
        loss = E.sum(a.S)
    g = tape.gradient(loss, [dw_t])[0]
    ana = ssa.dS_dDeltaOmega(dw, a.tau.data, J)
    np.testing.assert_allclose(g, ana, rtol=1e-6, atol=1e-12)


# -- top-k and aggregate -------------------------------------------------------

def test_topk_examples():
    out = ssa.topk_sparsify(Tensor([[0.9, 0.0, 0.5, 0.3]]), 2).data
    np.testing.assert_array_equal(out, [[0.9, 0.0, 0.5, 0.0]])
    S = _rand(3, 2, 5, 5)
    np.testing.assert_array_equal(ssa.topk_sparsify(Tensor(S), 5).data, S)
    out = ssa.topk_sparsify(Tensor([[0.9, 0.4, 0.1, 0.4]]), 2).data
    np.testing.assert_array_equal(out, [[0.9, 0.4, 0.0, 0.0]])
    with pytest.raises(ssa.ConfigError):
        ssa.topk_sparsify(Tensor(S), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 9))
def test_topk_row_budget(seed, k):
    S = np.abs(_rand(seed, 3, 9, 9))
    out = ssa.topk_sparsify(Tensor(S), k).data
    assert np.all((out != 0).sum(-1) <= k)


def test_aggregate_examples():
    y = ssa.aggregate(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5]], atol=1e-8)
    y = ssa.aggregate(Tensor([[0.0, 0.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]])).data
    np.testing.assert_allclose(y, 0.0, atol=1e-12)


def test_aggregate_matches_loop_oracle():
    S, V = np.abs(_rand(1, 5, 5)), _rand(2, 5, 3)
    y = ssa.aggregate(Tensor(S), Tensor(V)).data
    for i in range(5):
        den = sum(S[i, j] for j in range(5)) + ssa.EPS
        for c in range(3):
            num = sum(S[i, j] * V[j, c] for j in range(5))
            assert abs(y[i, c] - num / den) < 1e-12


# -- full multi-head forward ----------------------------------------------------

def test_mfsh_single_token():
    D, H = 8, 2
    p = _params(D, H)
    x = _rand(1, 1, D)
    y, art = ssa.mfsh_forward(Tensor(x), p, H)
    np.testing.assert_array_equal(art.S.data, np.ones((H, 1, 1)))
    v = x @ p["W_V"].data + p["b_V"].data
    expect = (v / (1 + ssa.EPS)) @ p["W_O"].data + p["b_O"].data
    np.testing.assert_allclose(y.data, expect, atol=1e-12)


def test_mfsh_permutation_equivariant():
    D, H, N = 8, 2, 7
    p = _params(D, H)
    x = _rand(2, N, D)
    perm = SeededRng(3).permutation(N)
    y, a = ssa.mfsh_forward(Tensor(x), p, H)
    yp, ap = ssa.mfsh_forward(Tensor(x[perm]), p, H)
    np.testing.assert_allclose(yp.data, y.data[perm], atol=1e-12)
    np.testing.assert_allclose(ap.S.data, a.S.data[:, perm][:, :, perm], atol=1e-12)


def test_mfsh_batch_matches_per_item():
    D, H = 8, 2
    p = _params(D, H)
    x = _rand(4, 3, 5, D)
    yb, ab = ssa.mfsh_forward(Tensor(x), p, H)
    for b in range(3):
        y1, a1 = ssa.mfsh_forward(Tensor(x[b]), p, H)
        np.testing.assert_allclose(yb.data[b], y1.data, atol=1e-12)
        np.testing.assert_allclose(ab.r.data[b], a1.r.data, atol=1e-14)


def test_mfsh_sparse_and_causal():
    D, H, N = 8, 2, 6
    p = _params(D, H, std=0.05)
    _, art = ssa.mfsh_forward(Tensor(_rand(5, N, D)), p, H, k=2, causal=True)
    assert np.all((art.S_sparse.data != 0).sum(-1) <= 2)
    Sn = art.S_normalized.data
    assert not np.triu(Sn, 1).any()
    sums = Sn.sum(-1)
    nonzero = (Sn != 0).any(-1)
    np.testing.assert_allclose(sums[nonzero], 1.0, atol=1e-7)


def test_mfsh_gradient_matches_fd():
    D, H, N = 8, 2, 5
    p = _params(D, H, std=0.4, alpha=0.3, K=3.0)
    x = _rand(9, N, D)
    names = ["W_omega", "W_theta", "alpha_hat", "k_hat"]
    base = {k: v for k, v in p.items()}
    target = _rand(10, N, D)

    def f(x_, *ws):
        pp = dict(base)
        pp.update(zip(names, ws))
        y, art = ssa.mfsh_forward(x_, pp, H)
        return E.sum(E.square(E.sub(y, E.constant(target))))

    xs = [x] + [p[n].data for n in names]
    _, art = ssa.mfsh_forward(Tensor(x), p, H)
    ratio = art.delta_omega.data / art.tau.data
    assert np.all((ratio < 0.95) | (ratio > 1.05)), "test point too close to lock boundary"
    assert E.grad_check(f, xs, h=1e-6) < 1e-3


def test_artifact_exports(tmp_path):
    D, H, N = 8, 2, 4
    _, art = ssa.mfsh_forward(Tensor(_rand(1, N, D)), _params(D, H, std=0.05), H)
    paths = art.write_csv(tmp_path)
    assert len(paths) == H
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "row,col,J,delta_omega,tau,S,S_normalized"
    assert len(lines) == 1 + N * N
    summ = art.summary()
    assert [s["head"] for s in summ] == [0, 1]
    assert all(0 <= s["r"] <= 1 and 0 <= s["nonzero_fraction"] <= 1 for s in summ)
