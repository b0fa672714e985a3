import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convaol.caol import (CaolConfig, CaolProblem, filter_gradient, g_div, gram_complement,
                          hard_threshold, init_filters, iterations_to_common_threshold,
                          iterations_to_within, learn, objective_P0, preprocess,
                          prox_diversity, prox_diversity_sequential, prox_orthogonal,
                          solve_norm_qp, sparse_code_bpegm, sparse_code_exact)
from convaol.convops import FilterBank, orthogonality_residual
from convaol.errors import InvalidThresholdError, UnsupportedShapeError
from convaol.majorizers import Majorizer, TrainingSet, exact_hessian
from convaol.synthetic import synthetic_corpus
from conftest import conv_matrix, tf_bank_matrix


def brute_l0(c, alpha):
    """argmin_z 1/2 ||c - z||^2 + alpha ||z||_0 over all supports; ties keep."""
    best, arg = None, None
    n = c.size
    for mask in itertools.product([0, 1], repeat=n):
        m = np.array(mask, bool)
        z = np.where(m, c, 0.0)
        val = 0.5 * float(np.sum((c - z) ** 2)) + alpha * m.sum()
        if best is None or val < best - 1e-15 or (abs(val - best) <= 1e-15 and m.sum() > arg.sum()):
            best, arg = val, m
    return np.where(arg, c, 0.0)


def test_hard_threshold_examples():
    assert hard_threshold([0.5, -2, 1], 1).tolist() == [0, -2, 1]
    v = np.array([0.3, -0.1])
    assert np.array_equal(hard_threshold(v, 0), v)
    assert np.array_equal(hard_threshold(v, np.inf), np.zeros(2))
    with pytest.raises(InvalidThresholdError):
        hard_threshold(v, -1)


def small_ts(rng, shape=(1, 2), size=(1, 4)):
    return TrainingSet([rng.standard_normal(size)], shape)


def test_exact_codes_match_brute_force(rng):
    for _ in range(20):
        ts = small_ts(rng)
        D = FilterBank(rng.standard_normal((2, 2)), (1, 2))
        alpha = float(rng.uniform(0.01, 1))
        Z = sparse_code_exact(D, ts, alpha)
        for k in range(2):
            c = conv_matrix(ts.images[0], (1, 2)) @ D.D[:, k]
            assert np.allclose(Z[0, k].ravel(), brute_l0(c, alpha))
        # exact codes minimize the objective over Z
        assert objective_P0(D, Z, ts, alpha) <= objective_P0(D, np.zeros_like(Z), ts, alpha)


def test_zero_alpha_passes_responses(rng):
    ts = small_ts(rng, (3, 3), (6, 6))
    D = FilterBank(rng.standard_normal((9, 4)), (3, 3))
    Z = sparse_code_exact(D, ts, 0.0)
    assert np.allclose(Z[0, 1].ravel(), conv_matrix(ts.images[0], (3, 3)) @ D.D[:, 1])


@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 1.0))
def test_doubling_alpha_sparser(seed, alpha):
    r = np.random.default_rng(seed)
    ts = TrainingSet([r.standard_normal((5, 5))], (2, 2))
    D = FilterBank(r.standard_normal((4, 3)), (2, 2))
    n1 = np.count_nonzero(sparse_code_exact(D, ts, alpha))
    n2 = np.count_nonzero(sparse_code_exact(D, ts, 2 * alpha))
    assert n2 <= n1


def test_objective_special_cases(rng):
    ts = small_ts(rng, (3, 3), (5, 5))
    D = FilterBank(rng.standard_normal((9, 2)), (3, 3))
    Z0 = np.zeros((1, 2, 5, 5))
    resp = sparse_code_exact(D, ts, 0.0)
    assert np.isclose(objective_P0(D, Z0, ts, 0.7), 0.5 * np.sum(resp ** 2))
    assert objective_P0(FilterBank(np.zeros((9, 2)), (3, 3)), Z0, ts, 0.7) == 0.0


def test_bpegm_codes_plug_in(rng):
    ts = small_ts(rng, (3, 3), (6, 6))
    D = FilterBank(rng.standard_normal((9, 3)), (3, 3))
    c = sparse_code_exact(D, ts, 0.0)
    Z = sparse_code_bpegm(D, ts, 0.2, 2.0, c)
    assert np.allclose(Z, hard_threshold(c, math.sqrt(0.2)))


def test_filter_gradient_routes(rng):
    xs = list(rng.standard_normal((2, 6, 6)))
    ts = TrainingSet(xs, (3, 3))
    D = FilterBank(rng.standard_normal((9, 4)), (3, 3))
    Z = rng.standard_normal((2, 4, 6, 6))
    G = filter_gradient(D, Z, ts)
    # explicit-matrix oracle
    ref = np.zeros((9, 4))
    for l, x in enumerate(xs):
        Psi = conv_matrix(x, (3, 3))
        for k in range(4):
            ref[:, k] += Psi.T @ (Psi @ D.D[:, k] - Z[l, k].ravel())
    assert np.allclose(G, ref, atol=1e-12)
    # dense Hessian route used by the trainer
    prob = CaolProblem(ts, CaolConfig(alpha=1e-3, K=4))
    Zflat = np.moveaxis(Z, 1, -1).reshape(-1, 4)
    assert np.allclose(prob.grad_D({"D": D.D, "Z": Zflat}), ref, atol=1e-10)
    # zero residual and linearity in Z
    assert np.allclose(filter_gradient(D, sparse_code_exact(D, ts, 0.0), ts), 0, atol=1e-12)
    G2 = filter_gradient(D, 2 * Z, ts)
    G0 = filter_gradient(D, 0 * Z, ts)
    assert np.allclose(G2 - G0, 2 * (G - G0), atol=1e-10)


def random_pd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.5 * np.eye(n)


def random_feasible_orth(rng, R, K):
    return tf_bank_matrix(R, K, rng)


def test_prox_orthogonal_examples():
    R = 3
    V = np.hstack([np.eye(R), np.zeros((R, 2))]) / math.sqrt(R)
    assert np.allclose(prox_orthogonal(V, 1.0), V, atol=1e-15)
    assert np.allclose(prox_orthogonal(7.0 * np.sqrt(R) * V, 1.0), V, atol=1e-15)
    with pytest.raises(UnsupportedShapeError):
        prox_orthogonal(np.ones((4, 3)), 1.0)


def test_prox_orthogonal_beats_random_feasible(rng):
    V = rng.standard_normal((3, 5))
    M = random_pd(rng, 3)
    D = prox_orthogonal(V, Majorizer("dense", M))
    assert orthogonality_residual(D) <= 1e-12

    def obj(X):
        E = X - V
        return float(np.trace(E.T @ M @ E))

    best = obj(D)
    for _ in range(10000):
        assert best <= obj(random_feasible_orth(rng, 3, 5)) + 1e-12


def test_gram_complement_properties(rng):
    assert np.array_equal(gram_complement(rng.standard_normal((4, 1)), 0), np.zeros((4, 4)))
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    D = Q / 2.0
    for k in range(4):
        G = gram_complement(D, k)
        assert np.allclose(G @ D[:, k], 0, atol=1e-14)
        assert np.isclose(np.trace(G), np.sum(np.delete(D, k, 1) ** 2))


def test_g_div_cases(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert g_div(Q / 2.0) <= 1e-28
    d = rng.standard_normal(4)
    d /= np.linalg.norm(d) * 2.0
    assert g_div(np.stack([d, d], axis=1)) >= 2 / 16 - 1e-15


def test_prox_diversity_examples():
    R = 4
    nu = np.full(R, 0.25)
    sol = prox_diversity(nu, 1.0, 0.0, np.zeros((R, R)), return_info=True)
    assert np.allclose(sol.d, nu) and sol.phi == 0.0
    e1 = np.eye(R)[0]
    sol = prox_diversity(e1, 1.0, 0.0, np.zeros((R, R)), return_info=True)
    assert np.allclose(sol.d, e1 / 2, atol=1e-12)
    assert sol.phi == pytest.approx(1.0, abs=1e-10)


def qp_obj(G, g, d):
    return 0.5 * d @ G @ d - g @ d


def test_prox_diversity_random_instance(rng):
    R = 5
    M = Majorizer("dense", random_pd(rng, R))
    D = rng.standard_normal((R, 6))
    Gamma = gram_complement(D, 0)
    nu = rng.standard_normal(R)
    beta = 3.0
    sol = prox_diversity(nu, M, beta, Gamma, return_info=True)
    G = M.data + beta * Gamma
    g = M.data @ nu
    assert abs(sol.d @ sol.d - 1 / R) <= 1e-10
    assert np.linalg.norm((G + sol.phi * np.eye(R)) @ sol.d - g) <= 1e-8
    P = rng.standard_normal((100000, R))
    P /= np.linalg.norm(P, axis=1, keepdims=True) * math.sqrt(R)
    vals = 0.5 * np.einsum("ij,jk,ik->i", P, G, P) - P @ g
    assert qp_obj(G, g, sol.d) <= vals.min() + 1e-12


def test_norm_qp_hard_case(rng):
    R = 3
    G = np.diag([1.0, 2.0, 3.0])
    g = np.array([0.0, 0.05, 0.05])       # no weight on the smallest mode, tiny elsewhere
    sol = solve_norm_qp(G, g, R)
    assert sol.hard_case and sol.phi == pytest.approx(-1.0)
    assert abs(sol.d @ sol.d - 1 / R) <= 1e-12
    assert np.linalg.norm((G + sol.phi * np.eye(R)) @ sol.d - g) <= 1e-12
    P = rng.standard_normal((20000, R))
    P /= np.linalg.norm(P, axis=1, keepdims=True) * math.sqrt(R)
    assert qp_obj(G, g, sol.d) <= min(qp_obj(G, g, p) for p in P) + 1e-12


def test_norm_qp_zero_linear_term():
    G = np.diag([3.0, 1.0, 2.0])
    sol = solve_norm_qp(G, np.zeros(3), 4)
    assert np.allclose(np.abs(sol.d), [0, 0.5, 0])


def test_sequential_diversity_prox_decreases_surrogate(rng):
    R, K, beta = 4, 6, 10.0
    M = random_pd(rng, R)
    D0 = rng.standard_normal((R, K))
    D0 /= np.linalg.norm(D0, axis=0) * math.sqrt(R)
    V = D0 + 0.1 * rng.standard_normal((R, K))

    def surrogate(D):
        E = D - V
        return 0.5 * np.trace(E.T @ M @ E) + 0.5 * beta * g_div(D)

    D1 = prox_diversity_sequential(V, Majorizer("dense", M), beta, D0)
    assert np.allclose(np.sum(D1 ** 2, axis=0), 1 / R)
    assert surrogate(D1) <= surrogate(D0) + 1e-12


def test_init_filters():
    D = init_filters((2, 2), 4, "deterministic")
    assert np.max(np.abs(D.D @ D.D.T - np.eye(4) / 4)) <= 1e-14
    a = init_filters((3, 3), 12, "random", 7)
    b = init_filters((3, 3), 12, "random", 7)
    assert np.array_equal(a.D, b.D)
    d0 = a.D[:, 0]
    assert np.allclose(d0, d0[0]) and np.isclose(d0 @ d0, 1 / 9)
    with pytest.raises(UnsupportedShapeError):
        init_filters((3, 3), 10, "deterministic")


def test_preprocess():
    x = np.arange(12.0).reshape(3, 4)
    y, = preprocess([x], rescale=True, mean_subtract=False)
    assert y.min() == 0 and y.max() == 1
    z, = preprocess([x], rescale=True, mean_subtract=True)
    assert abs(z.mean()) <= 1e-15


@pytest.fixture(scope="module")
def edges():
    return preprocess(synthetic_corpus(4, (24, 24), seed=3))


def test_learn_orthogonal_invariants(edges):
    ts = TrainingSet(edges, (3, 3))
    res = learn(ts, CaolConfig(alpha=1e-3, max_iter=200))
    assert res.diagnostics["orthogonality_residual"] <= 1e-10
    assert res.diagnostics["tf_residual"] <= 1e-8
    assert np.all(np.diff(res.objectives) <= 1e-9 * res.objectives[0])


def test_learn_alpha_sweep_sparser(edges):
    ts = TrainingSet(edges, (3, 3))
    nz = [np.count_nonzero(learn(ts, CaolConfig(alpha=a, max_iter=100)).codes)
          for a in (2.5e-5, 2.5e-4)]
    assert nz[1] <= nz[0]


def test_learn_diversity_descent(edges):
    ts = TrainingSet(edges, (3, 3))
    res = learn(ts, CaolConfig(alpha=1e-3, K=6, model="diversity", beta=100.0, max_iter=60,
                               extrapolation=False, track_block_objectives=True))
    assert np.allclose(np.sum(res.bank.D ** 2, axis=0), 1 / 9, atol=1e-12)
    objs = [o for r in res.records for o in r.block_objectives]
    assert np.all(np.diff(objs) <= 1e-12 * abs(objs[0]))


def test_iterations_to_within_cases():
    F = [10.0, 5.0, 2.01, 2.0]
    assert iterations_to_within(F) == 3
    assert iterations_to_within(F, final=1.0) == 5
    # the common level is the larger final, reached by both runs
    got = iterations_to_common_threshold({"a": F, "b": [10.0, 4.0, 3.0]})
    assert got == {"a": 3, "b": 3}
