import numpy as np
import pytest
from hypothesis import given, strategies as st

from convaol.convops import (FilterBank, PatchOperator, conv_adjoint, conv_same, flip, pad,
                             pad_for_filter, psi_adjoint, tf_residual, orthogonality_residual)
from convaol.errors import DimensionError, InvalidPaddingError, UndefinedRatioError
from conftest import conv_matrix, tf_bank_matrix

BCS = ["circular", "symmetric"]


def test_pad_zero_width_is_identity(rng):
    x = rng.standard_normal((4, 5))
    assert np.array_equal(pad(x, 0, 0, "circular"), x)
    assert np.array_equal(pad(x, 0, 0, "symmetric"), x)


def test_pad_circular_row():
    assert pad([1, 2, 3], 0, 1, "circular").ravel().tolist() == [3, 1, 2, 3, 1]


def test_pad_symmetric_row():
    assert pad([1, 2, 3], 0, 1, "symmetric").ravel().tolist() == [1, 1, 2, 3, 3]


def test_symmetric_pad_too_wide():
    with pytest.raises(InvalidPaddingError):
        pad([1, 2], 0, 2, "symmetric")


def test_delta_filter_is_identity(rng):
    x = rng.standard_normal((6, 7))
    for bc in BCS:
        assert np.array_equal(conv_same([[1.0]], x, bc), x)


def test_hand_convolution_with_wrap():
    # 2-tap alignment: y[n] = d[0] x[n] + d[1] x[n-1]
    y = conv_same([1.0, -1.0], [1.0, 2.0, 3.0], "circular")
    assert y.ravel().tolist() == [-2.0, 1.0, 1.0]


def test_filter_larger_than_image():
    with pytest.raises(DimensionError):
        conv_same(np.ones((5, 5)), np.ones((3, 3)))


@pytest.mark.parametrize("bc", BCS)
@pytest.mark.parametrize("shape", [(3, 3), (2, 4), (1, 3), (4, 1)])
def test_conv_matches_explicit_matrix(rng, bc, shape):
    x = rng.standard_normal((6, 7))
    d = rng.standard_normal(shape)
    Psi = conv_matrix(x, shape, bc)
    assert np.allclose(conv_same(d, x, bc).ravel(), Psi @ d.ravel(), atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3),
       st.sampled_from(BCS))
def test_linearity(seed, a, b, bc):
    r = np.random.default_rng(seed)
    d = r.standard_normal((3, 3))
    x, y = r.standard_normal((2, 5, 6))
    lhs = conv_same(d, a * x + b * y, bc)
    rhs = a * conv_same(d, x, bc) + b * conv_same(d, y, bc)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_psi_adjoint_zero(rng):
    xh = pad_for_filter(rng.standard_normal((5, 5)), (3, 3))
    assert np.array_equal(psi_adjoint(xh, np.zeros((5, 5)), (3, 3)), np.zeros((3, 3)))


def test_psi_adjoint_hand_sum():
    # all-ones padded row, all-ones codes, R = 2, N = 3 -> each tap = 3
    g = psi_adjoint(np.ones((1, 4)), np.ones((1, 3)), (1, 2))
    assert g.ravel().tolist() == [3.0, 3.0]


@pytest.mark.parametrize("bc", BCS)
def test_psi_adjoint_identity(rng, bc):
    x = rng.standard_normal((5, 5))
    d = rng.standard_normal((3, 3))
    z = rng.standard_normal((5, 5))
    xh = pad_for_filter(x, (3, 3), bc)
    lhs = np.vdot(conv_same(d, x, bc), z)
    rhs = np.vdot(d, psi_adjoint(xh, z, (3, 3)))
    assert abs(lhs - rhs) <= 1e-12 * max(1, abs(lhs))


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(BCS),
       st.sampled_from([(3, 3), (2, 2), (1, 4), (3, 2)]))
def test_conv_adjoint_identity(seed, bc, shape):
    r = np.random.default_rng(seed)
    x, z = r.standard_normal((2, 6, 7))
    d = r.standard_normal(shape)
    lhs = np.vdot(conv_same(d, x, bc), z)
    rhs = np.vdot(x, conv_adjoint(d, z, bc))
    assert abs(lhs - rhs) <= 1e-12 * max(1, abs(lhs))


def test_adjoint_is_flip_convolution_for_circular_odd(rng):
    d = rng.standard_normal((3, 3))
    z = rng.standard_normal((6, 6))
    assert np.allclose(conv_adjoint(d, z, "circular"), conv_same(flip(d), z, "circular"),
                       atol=1e-12)


def test_flip():
    assert flip([1, 2, 3]).ravel().tolist() == [3, 2, 1]
    assert flip([[1, 2], [3, 4]]).tolist() == [[4, 3], [2, 1]]
    s = np.array([[1, 2, 1]])
    assert np.array_equal(flip(s), s)


@pytest.mark.parametrize("bc", BCS)
def test_tf_residual_for_tight_frame(rng, bc):
    bank = FilterBank(tf_bank_matrix(9, 12, rng), (3, 3))
    assert orthogonality_residual(bank) <= 1e-12
    for _ in range(5):
        assert tf_residual(bank, rng.standard_normal((8, 9)), bc) <= 1e-10


def test_tf_residual_identity_filter(rng):
    bank = FilterBank(np.ones((1, 1)), (1, 1))
    assert tf_residual(bank, rng.standard_normal((4, 4))) == 0.0


def test_tf_residual_zero_image():
    bank = FilterBank(np.ones((1, 1)), (1, 1))
    with pytest.raises(UndefinedRatioError):
        tf_residual(bank, np.zeros((3, 3)))


@pytest.mark.parametrize("bc", BCS)
def test_patch_operator_routes_agree(rng, bc):
    xs = rng.standard_normal((2, 6, 5))
    D = rng.standard_normal((6, 4))
    P = PatchOperator(xs, (2, 3), bc)
    bank = FilterBank(D, (2, 3))
    direct = np.array([[conv_same(f, x, bc).ravel() for f in bank.filters] for x in xs])
    assert np.allclose(np.moveaxis(P.apply(D), -1, 1), direct, atol=1e-12)
    Z = rng.standard_normal((2, 30, 4))
    assert np.isclose(np.vdot(P.apply(D), Z), np.vdot(D, P.adjoint(Z)))
    G = sum(conv_matrix(x, (2, 3), bc).T @ conv_matrix(x, (2, 3), bc) for x in xs)
    assert np.allclose(P.gram(), G, atol=1e-10)
