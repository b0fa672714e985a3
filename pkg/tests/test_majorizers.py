import numpy as np
import pytest
from hypothesis import given, strategies as st

from convaol.errors import InputError, NotPositiveDefiniteError, UnsupportedBoundaryError
from convaol.majorizers import (Majorizer, TrainingSet, diag_hermitian, diag_majorizer,
                                diag_weighted_normal, dominance_check, exact_hessian,
                                filter_majorizer, lipschitz_majorizer,
                                scaled_identity_majorizer)
from conftest import conv_matrix


def ones_row():
    return TrainingSet([np.ones((1, 4))], (1, 2), "circular")


def test_exact_hessian_ones_row():
    H = exact_hessian(ones_row(), require_pd=False)
    assert np.array_equal(H.data, np.full((2, 2), 4.0)) and H.semidefinite
    with pytest.raises(NotPositiveDefiniteError):
        exact_hessian(ones_row())


def test_exact_hessian_linear_in_images(rng):
    x = rng.standard_normal((6, 6))
    H1 = exact_hessian(TrainingSet([x], (3, 3))).data
    H3 = exact_hessian(TrainingSet([x, x, x], (3, 3))).data
    assert np.allclose(H3, 3 * H1, rtol=1e-13)


@pytest.mark.parametrize("bc", ["circular", "symmetric"])
def test_exact_hessian_matches_explicit_matrices(rng, bc):
    xs = rng.standard_normal((2, 8, 8))
    H = exact_hessian(TrainingSet(list(xs), (3, 3), bc)).data
    ref = sum(conv_matrix(x, (3, 3), bc).T @ conv_matrix(x, (3, 3), bc) for x in xs)
    assert np.allclose(H, ref, atol=1e-10)


def test_diagonal_ones_row():
    assert diag_majorizer(ones_row()).data.tolist() == [8.0, 8.0]


def test_diagonal_hand_expansion():
    # x = [1, 2, 3, 4], R = 2, circular: rows of Psi are [x[n], x[n-1]]
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    Psi = np.array([[1, 4], [2, 1], [3, 2], [4, 3]], float)
    expect = np.abs(Psi).T @ np.abs(Psi).sum(axis=1)
    assert np.allclose(diag_majorizer(TrainingSet([x], (1, 2))).data, expect)


def test_diagonal_rejects_zero_images():
    with pytest.raises(NotPositiveDefiniteError):
        diag_majorizer(TrainingSet([np.zeros((4, 4))], (3, 3)))


def test_scaled_identity_ones_row():
    M = scaled_identity_majorizer(ones_row())
    assert M.form == "scaled_identity" and M.data == 8.0


def test_scaled_identity_single_tap(rng):
    xs = list(rng.standard_normal((3, 5, 5)))
    M = scaled_identity_majorizer(TrainingSet(xs, (1, 1)))
    assert np.isclose(M.data, sum(float(np.sum(x * x)) for x in xs))


def test_scaled_identity_needs_circular(rng):
    with pytest.raises(UnsupportedBoundaryError):
        scaled_identity_majorizer(TrainingSet([rng.standard_normal((5, 5))], (3, 3),
                                              "symmetric"))


def test_first_row_rule_falls_back_when_not_pd():
    # alternating row: the circulant of its autocorrelation row is singular
    ts = TrainingSet([np.array([[1.0, -1.0, 1.0, -1.0]])], (1, 2))
    with pytest.warns(UserWarning):
        M = scaled_identity_majorizer(ts, rule="first_row")
    assert M.form == "diagonal" and M.flags.get("circulant_not_pd")


corpus = st.tuples(st.integers(0, 2 ** 32 - 1), st.integers(1, 3),
                   st.sampled_from([(2, 2), (3, 3), (1, 3), (3, 2)]))


@given(corpus, st.booleans())
def test_dominance_properties(args, nonneg):
    seed, L, shape = args
    r = np.random.default_rng(seed)
    xs = r.uniform(size=(L, 7, 8)) if nonneg else r.standard_normal((L, 7, 8))
    ts = TrainingSet(list(xs), shape)
    H = exact_hessian(ts)
    for kind in ("diagonal", "scaled_identity", "lipschitz"):
        assert dominance_check(H, filter_majorizer(ts, kind)) >= -1e-9 * max(1, H.data.max())


def test_lipschitz_is_spectral_radius(rng):
    ts = TrainingSet([rng.standard_normal((6, 6))], (3, 3))
    M = lipschitz_majorizer(ts)
    assert np.isclose(M.data, np.linalg.eigvalsh(exact_hessian(ts).data)[-1])


def test_dominance_check_self(rng):
    ts = TrainingSet([rng.standard_normal((6, 6))], (3, 3))
    H = exact_hessian(ts)
    assert abs(dominance_check(H, H)) <= 1e-12


def test_weighted_normal_examples():
    assert np.array_equal(diag_weighted_normal(np.eye(3)).data, np.ones(3))
    A = np.array([[1.0, -1.0], [1.0, 1.0]])
    M = diag_weighted_normal(A, np.ones(2))
    assert M.data.tolist() == [4.0, 4.0]
    assert np.linalg.eigvalsh(np.diag(M.data) - A.T @ A)[0] >= 0
    B = np.array([[1.0, 2.0]])
    M = diag_weighted_normal(B, [1.0])
    assert M.data.tolist() == [3.0, 6.0]
    assert np.linalg.eigvalsh(np.diag(M.data) - B.T @ B)[0] >= -1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_weighted_normal_dominates(seed):
    r = np.random.default_rng(seed)
    A = r.standard_normal((6, 4))
    w = r.uniform(0, 2, 6)
    M = diag_weighted_normal(A, w)
    assert np.linalg.eigvalsh(np.diag(M.data) - A.T @ (w[:, None] * A))[0] >= -1e-10


def test_hermitian_examples():
    assert np.array_equal(diag_hermitian(np.eye(2)).data, np.ones(2))
    assert diag_hermitian([[2.0, 1.0], [1.0, 2.0]]).data.tolist() == [3.0, 3.0]
    with pytest.raises(InputError):
        diag_hermitian([[1.0, 2.0], [2.0, 1.0]])


@pytest.mark.parametrize("M", [Majorizer("dense", np.array([[2.0, 1.0], [1.0, 3.0]])),
                               Majorizer("diagonal", np.array([1.0, 2.5, 4.0])),
                               Majorizer("scaled_identity", 3.5, 4)])
def test_serialization_round_trip(tmp_path, M):
    back = Majorizer.from_bytes(M.to_bytes())
    assert back.equals(M)
    M.save(tmp_path / "m.bin")
    assert Majorizer.load(tmp_path / "m.bin").equals(M)


def test_solve_inverts_matvec(rng):
    A = rng.standard_normal((4, 4))
    M = Majorizer("dense", A @ A.T + np.eye(4))
    v = rng.standard_normal(4)
    assert np.allclose(M.solve(M.matvec(v)), v)
