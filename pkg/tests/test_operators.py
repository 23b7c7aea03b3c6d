import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_warp_matrix, centered_dft, crandn, smooth_field
from mcmr.operators import (
    BilinearWarp,
    LinearOperator,
    adjoint_dot_test,
    decode_frame,
    encode_frame,
    encode_operator,
    fft2c,
    fft_operator,
    ifft2c,
    row_mask,
    warp_adjoint,
    warp_apply,
    warp_operator,
)
from mcmr.phantom import make_coil_maps

GRIDS = [(8, 8), (16, 16), (64, 64), (192, 132)]


def test_fft_of_constant_is_center_impulse():
    k = fft2c(np.ones((16, 16), complex))
    expected = np.zeros((16, 16), complex)
    expected[8, 8] = 16.0
    np.testing.assert_allclose(k, expected, atol=1e-12)


def test_center_impulse_inverts_to_constant():
    k = np.zeros((16, 16), complex)
    k[8, 8] = 16.0
    np.testing.assert_allclose(ifft2c(k), np.ones((16, 16)), atol=1e-12)


@pytest.mark.parametrize("shape", [(16, 16), (12, 20), (32, 32)])
def test_fft_matches_closed_form_matrix(rng, shape):
    x = crandn(rng, shape)
    fy, fx = centered_dft(shape[0]), centered_dft(shape[1])
    np.testing.assert_allclose(fft2c(x), fy @ x @ fx.T, atol=1e-12)


@pytest.mark.parametrize("shape", [(15, 9), (16, 16), (33, 8)])
def test_fft_inverse_and_parseval(rng, shape):
    x = crandn(rng, shape)
    k = fft2c(x)
    np.testing.assert_allclose(ifft2c(k), x, atol=1e-12)
    np.testing.assert_allclose(fft2c(ifft2c(x)), x, atol=1e-12)
    assert abs(np.linalg.norm(k) - np.linalg.norm(x)) < 1e-10 * np.linalg.norm(x)


def test_fft_batches_over_leading_axes(rng):
    x = crandn(rng, (3, 2, 8, 8))
    np.testing.assert_allclose(fft2c(x)[2, 1], fft2c(x[2, 1]), atol=1e-13)


@pytest.mark.parametrize("shape", GRIDS)
def test_fft_adjoint(shape):
    assert adjoint_dot_test(fft_operator(shape)) < 1e-10


@pytest.mark.parametrize("shape", GRIDS)
@pytest.mark.parametrize("q", [1, 3, 8])
def test_encode_decode_adjoint(shape, q):
    h, w = shape
    lines = np.random.default_rng(q).choice(h, size=max(h // 4, 1), replace=False)
    assert adjoint_dot_test(encode_operator(make_coil_maps(q, h, w), lines)) < 1e-9


def test_encode_identity_coil_full_mask_is_fft(rng):
    x = crandn(rng, (16, 16))
    c = make_coil_maps(1, 16, 16)
    np.testing.assert_allclose(c.data, 1.0, atol=1e-12)
    np.testing.assert_allclose(encode_frame(x, c, np.arange(16))[0], fft2c(x), atol=1e-12)


def test_encode_zeroes_unsampled_rows(rng):
    c = make_coil_maps(3, 16, 16)
    lines = [0, 5, 8, 9]
    k = encode_frame(crandn(rng, (16, 16)), c, lines)
    keep = row_mask(lines, 16)
    assert np.all(k[:, ~keep, :] == 0) and np.all(k[:, keep, :] != 0)


def test_decode_of_full_encode_is_identity(rng):
    x = crandn(rng, (16, 16))
    c = make_coil_maps(8, 16, 16)
    np.testing.assert_allclose(decode_frame(encode_frame(x, c, np.arange(16)), c, np.arange(16)), x, atol=1e-10)
    assert np.all(decode_frame(np.zeros((8, 16, 16), complex), c, np.arange(16)) == 0)


def test_encode_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        encode_frame(crandn(rng, (16, 8)), make_coil_maps(2, 16, 16), [1])


def test_row_mask_forms_agree():
    b = np.zeros(8, bool)
    b[[1, 4]] = True
    assert np.array_equal(row_mask([1, 4], 8), b) and np.array_equal(row_mask(b, 8), b)


def test_zero_field_is_identity(rng):
    x = crandn(rng, (12, 9))
    u = np.zeros((2, 12, 9))
    assert np.array_equal(warp_apply(x, u), x)
    assert np.array_equal(warp_adjoint(x, u), x)


def test_integer_row_shift(rng):
    x = crandn(rng, (10, 10))
    u = np.zeros((2, 10, 10))
    u[0] = 1.0
    out = warp_apply(x, u)
    np.testing.assert_array_equal(out[:-1], x[1:])
    assert np.all(out[-1] == 0)


@pytest.mark.parametrize("seed", range(4))
def test_warp_matches_materialized_matrix(seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-2.5, 2.5, (2, 4, 4))
    m = brute_warp_matrix(u)
    x = crandn(rng, (4, 4))
    r = crandn(rng, (4, 4))
    np.testing.assert_allclose(warp_apply(x, u).ravel(), m @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(warp_adjoint(r, u).ravel(), m.T @ r.ravel(), atol=1e-12)
    # columns of the operator applied to basis vectors reproduce the oracle
    cols = np.stack([warp_apply(e.reshape(4, 4), u).ravel() for e in np.eye(16)], axis=1)
    np.testing.assert_allclose(cols, m, atol=1e-12)


@pytest.mark.parametrize("shape", GRIDS)
def test_warp_adjoint_dot(shape):
    rng = np.random.default_rng(sum(shape))
    u = smooth_field(rng, *shape, amp=3.0)
    assert adjoint_dot_test(warp_operator(u)) < 1e-9


@given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 6.0), h=st.integers(8, 24), w=st.integers(8, 24))
def test_warp_adjoint_property(seed, amp, h, w):
    rng = np.random.default_rng(seed)
    u = smooth_field(rng, h, w, amp=amp)
    x, r = crandn(rng, (h, w)), crandn(rng, (h, w))
    lhs = np.vdot(r, warp_apply(x, u))
    rhs = np.vdot(warp_adjoint(r, u), x)
    assert abs(lhs - rhs) <= 1e-9 * np.linalg.norm(r) * max(np.linalg.norm(warp_apply(x, u)), 1e-30) + 1e-12


@given(seed=st.integers(0, 10_000), a=st.complex_numbers(max_magnitude=10), b=st.complex_numbers(max_magnitude=10))
def test_warp_superposition(seed, a, b):
    rng = np.random.default_rng(seed)
    u = smooth_field(rng, 9, 11, amp=2.0)
    x, z = crandn(rng, (9, 11)), crandn(rng, (9, 11))
    np.testing.assert_allclose(warp_apply(a * x + b * z, u), a * warp_apply(x, u) + b * warp_apply(z, u),
                               atol=1e-9 * (abs(a) + abs(b) + 1))


def test_batched_warp_matches_single(rng):
    u = smooth_field(rng, 10, 12, batch=(3,))
    x = crandn(rng, (10, 12))
    w = BilinearWarp(u)
    out = w.apply(x)
    for j in range(3):
        np.testing.assert_allclose(out[j], warp_apply(x, u[j]), atol=1e-14)
    r = crandn(rng, (3, 10, 12))
    back = w.adjoint(r)
    for j in range(3):
        np.testing.assert_allclose(back[j], warp_adjoint(r[j], u[j]), atol=1e-13)


@pytest.mark.parametrize("batch", [(1,), (4,), (2, 3)])
def test_shared_source_paths_match_batched_warp(rng, batch):
    u = smooth_field(rng, 11, 13, amp=2.5, batch=batch)
    x = crandn(rng, (11, 13))
    r = crandn(rng, batch + (11, 13))
    w = BilinearWarp(u)
    np.testing.assert_allclose(w.apply_shared(x), w.apply(x), atol=1e-13)
    np.testing.assert_allclose(w.adjoint_sum(r), w.adjoint(r).reshape((-1, 11, 13)).sum(axis=0), atol=1e-12)
    lhs = np.vdot(r, w.apply_shared(x))
    rhs = np.vdot(w.adjoint_sum(r), x)
    assert abs(lhs - rhs) < 1e-10 * np.linalg.norm(r) * np.linalg.norm(x)


def test_non_finite_field_rejected():
    u = np.zeros((2, 8, 8))
    u[0, 1, 1] = np.inf
    with pytest.raises(ValueError):
        warp_apply(np.ones((8, 8)), u)


def test_dot_test_catches_broken_adjoint(rng):
    u = smooth_field(rng, 16, 16, amp=1.5)
    w = BilinearWarp(u)
    good = warp_operator(u)
    # splat to the transposed neighbour (x + 1 instead of y + 1)
    broken = LinearOperator(good.in_shape, good.out_shape, w.apply, lambda r: np.swapaxes(w.adjoint(r), 0, 1))
    assert adjoint_dot_test(good) < 1e-10
    assert adjoint_dot_test(broken) > 1e-3
