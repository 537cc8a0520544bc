import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoprobe import kernels as K
from monoprobe._accel import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3),
    c=st.integers(1, 4),
    h=st.integers(3, 12),
    w=st.integers(3, 12),
    k=st.integers(1, 3),
    s=st.integers(1, 3),
    p=st.integers(0, 2),
)
def test_im2col_col2im_parity(n, c, h, w, k, s, p):
    x = np.random.default_rng(n * 100 + h).standard_normal((n, c, h, w))
    a = K.im2col_numpy(x, k, k, s, s, p, p)
    b = K.im2col_numba(x, k, k, s, s, p, p)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(
        K.col2im_numpy(a, x.shape, k, k, s, s, p, p), K.col2im_numba(a, x.shape, k, k, s, s, p, p), atol=1e-12
    )


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 9, 7))
    cols = K.im2col(x, 3, 3, 2, 2, 1, 1)
    y = rng.standard_normal(cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * K.col2im(y, x.shape, 3, 3, 2, 2, 1, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (3, 1)])
def test_maxpool_parity(k, s):
    rng = np.random.default_rng(k + s)
    x = rng.integers(0, 4, (2, 3, 9, 11)).astype(np.float64)  # lots of ties
    oa, ia = K.maxpool_forward_numpy(x, k, s)
    ob, ib = K.maxpool_forward_numba(x, k, s)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    d = rng.standard_normal(oa.shape)
    np.testing.assert_allclose(
        K.maxpool_backward_numpy(d, ia, x.shape), K.maxpool_backward_numba(d, ib, x.shape), atol=1e-12
    )


@pytest.mark.parametrize("size,g", [(13, 6), (9, 4), (27, 6), (5, 5)])
def test_adaptive_maxpool_parity(size, g):
    x = np.random.default_rng(size).standard_normal((2, 3, size, size))
    np.testing.assert_array_equal(K.adaptive_maxpool_numpy(x, g), K.adaptive_maxpool_numba(x, g))


def test_bilinear_sample_parity():
    rng = np.random.default_rng(1)
    img = rng.random((15, 20, 3))
    xs = rng.uniform(-2, 22, (30, 40))
    ys = rng.uniform(-2, 17, (30, 40))
    np.testing.assert_allclose(
        K.bilinear_sample_numpy(img, xs, ys, 0.25), K.bilinear_sample_numba(img, xs, ys, 0.25), atol=1e-12
    )


def test_assign_nearest_parity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((500, 8))
    cen = rng.standard_normal((7, 8))
    la, da = K.assign_nearest_numpy(x, cen)
    lb, db = K.assign_nearest_numba(x, cen)
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_allclose(da, db, atol=1e-10)


@pytest.mark.parametrize("hue", [0.0, 0.07, -0.1, 0.49])
def test_color_jitter_parity(hue):
    rng = np.random.default_rng(3)
    x = rng.random((21, 17, 3))
    x[:4] = x[:4, :, :1]  # gray rows have no hue
    x[5, 5] = 0.0
    for b, c, s in [(1.3, 0.7, 1.2), (0.6, 1.4, 0.0), (1.0, 0.0, 1.4)]:
        np.testing.assert_allclose(
            K.color_jitter_numpy(x, b, c, s, hue), K.color_jitter_numba(x, b, c, s, hue), atol=1e-12
        )


def test_adaptive_bins_cover_axis():
    starts, ends = K.adaptive_bins(13, 6)
    assert starts[0] == 0 and ends[-1] == 13
    assert all(e > s for s, e in zip(starts, ends))
