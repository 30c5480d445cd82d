import os
import subprocess
import sys

import numpy as np
import pytest

from abra import _kernels as K
from abra import tensor as T

import oracles

CASES = [((2, 3, 5, 5), 3, 1, 1), ((1, 2, 6, 4), 3, 2, 1), ((3, 1, 4, 4), 2, 1, 0), ((2, 4, 7, 7), 3, 2, 0)]


@pytest.mark.parametrize("shape,k,stride,pad", CASES)
def test_im2col_col2im_adjoint(shape, k, stride, pad):
    # <im2col(x), g> == <x, col2im(g)>
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape)
    cols = K.im2col(x, k, k, stride, pad)
    g = rng.standard_normal(cols.shape)
    back = K.col2im(g, shape, k, k, stride, pad)
    assert np.isclose((cols * g).sum(), (x * back).sum(), rtol=1e-12)


@pytest.mark.skipif(K.im2col_numba is None, reason="numba unavailable")
@pytest.mark.parametrize("shape,k,stride,pad", CASES)
def test_numba_and_numpy_paths_bitwise_equal(shape, k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape)
    a = K.im2col_numpy(x, k, k, stride, pad)
    b = K.im2col_numba(x, k, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    g = rng.standard_normal(a.shape)
    np.testing.assert_array_equal(K.col2im_numpy(g, shape, k, k, stride, pad), K.col2im_numba(g, shape, k, k, stride, pad))


@pytest.mark.skipif(K.im2col_numba is None, reason="numba unavailable")
def test_numba_path_float32():
    x = np.random.default_rng(2).standard_normal((2, 3, 6, 6)).astype(np.float32)
    a = K.im2col_numba(x, 3, 3, 1, 1)
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, K.im2col_numpy(x, 3, 3, 1, 1))


@pytest.mark.parametrize("shape,k,stride,pad", CASES)
def test_conv2d_matches_loop_oracle(shape, k, stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, shape[1], k, k))
    got = T.conv2d(T.Tensor(x), T.Tensor(w), stride, pad).data
    assert oracles.rel_close(got, oracles.conv2d(x, w, stride, pad))


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, ABRA_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "import abra; print(abra.backend())"], env=env, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "numpy"


def test_conv_out_size():
    assert K.conv_out_size(16, 3, 1, 1) == 16
    assert K.conv_out_size(7, 3, 2, 0) == 3
