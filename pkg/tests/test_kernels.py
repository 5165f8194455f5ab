import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plasm import _kernels_py as py
from plasm import kernels

native = pytest.importorskip("plasm._kernels")

shapes = st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(3, 9), st.integers(3, 9))


def close(a, b, dtype):
    tol = 1e-12 if dtype == np.float64 else 1e-5
    np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]),
       dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**16))
def test_im2col_col2im_agree(shape, k, stride, dtype, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    pad = k // 2
    a, b = py.im2col(x, k, stride, pad), native.im2col(x, k, stride, pad)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    n, c, h, w = shape
    close(py.col2im(cols, c, h, w, k, stride, pad), native.col2im(cols, c, h, w, k, stride, pad), dtype)


@settings(max_examples=30, deadline=None)
@given(shape=shapes, dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**16))
def test_dwconv_agree(shape, dtype, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    w = rng.standard_normal((shape[1], 3, 3)).astype(dtype)
    gy = rng.standard_normal(shape).astype(dtype)
    close(py.dwconv_forward(x, w, 1), native.dwconv_forward(x, w, 1), dtype)
    for a, b in zip(py.dwconv_backward(x, w, gy, 1), native.dwconv_backward(x, w, gy, 1)):
        close(a, b, dtype)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), groups=st.sampled_from([1, 2]), half=st.integers(1, 3), hw=st.integers(1, 6),
       slope=st.sampled_from([1.0, 0.01]), dtype=st.sampled_from([np.float32, np.float64]),
       seed=st.integers(0, 2**16))
def test_group_norm_agree(n, groups, half, hw, slope, dtype, seed):
    rng = np.random.default_rng(seed)
    c = groups * half
    x = (rng.standard_normal((n, c, hw, hw)) * 3 + 1).astype(dtype)
    gamma = rng.standard_normal(c).astype(dtype)
    beta = rng.standard_normal(c).astype(dtype)
    fa = py.gn_act_forward(x, gamma, beta, groups, 1e-5, slope)
    fb = native.gn_act_forward(x, gamma, beta, groups, 1e-5, slope)
    for a, b in zip(fa, fb):
        close(a, b, dtype)
    gy = rng.standard_normal(x.shape).astype(dtype)
    _, xhat, inv = fa
    for a, b in zip(py.gn_act_backward(gy, xhat, inv, gamma, beta, groups, slope),
                    native.gn_act_backward(gy, xhat, inv, gamma, beta, groups, slope)):
        close(a, b, dtype)


def test_backend_switch():
    before = kernels.BACKEND
    try:
        kernels.use("python")
        assert kernels.BACKEND == "python"
        kernels.use("native")
        assert kernels.BACKEND == "native"
        with pytest.raises(ValueError):
            kernels.use("gpu")
    finally:
        kernels.use(before)
