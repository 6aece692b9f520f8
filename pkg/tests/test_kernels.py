import subprocess
import sys

import numpy as np
import pytest

from lt3d import _kernels
from lt3d._kernels import _numpy

native = pytest.importorskip("lt3d._kernels._native")


def brute_nearest(a, b):
    return np.array([min(((p - q) ** 2).sum() for q in b) for p in a])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2), (1, 2, 2)])
def test_im2col_col2im_parity(dtype, stride):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7, 6, 3)).astype(dtype)
    a = _numpy.im2col(x, 3, 3, 2, *stride)
    b = native.im2col(x, 3, 3, 2, *stride)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    ga = _numpy.col2im(cols, 5, 7, 6, 3, 3, 3, 2, *stride)
    gb = native.col2im(cols, 5, 7, 6, 3, 3, 3, 2, *stride)
    np.testing.assert_allclose(ga, gb, rtol=1e-6 if dtype == np.float32 else 1e-12, atol=1e-6)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5, 6, 2))
    cols = _kernels.im2col(x, 2, 3, 3, 1, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * _kernels.col2im(y, 4, 5, 6, 2, 2, 3, 3, 1, 2, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("backend", ["numpy", "cython"])
def test_nearest_matches_brute_force(backend):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
    prev = _kernels.use_backend(backend)
    try:
        np.testing.assert_allclose(_kernels.nearest_sq_dists(a, b), brute_nearest(a, b), rtol=1e-12)
    finally:
        _kernels.use_backend(prev)


def test_backend_switch():
    assert set(_kernels.available_backends()) == {"numpy", "cython"}
    prev = _kernels.use_backend("numpy")
    assert _kernels.backend_name() == "numpy"
    _kernels.use_backend(prev)
    with pytest.raises(ValueError):
        _kernels.use_backend("fortran")


def test_env_forces_fallback():
    code = "from lt3d import _kernels; print(_kernels.backend_name())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"LT3D_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "numpy"


def test_network_forward_backend_independent():
    from lt3d.segnet import NetworkConfig, init_params, predict
    cfg = NetworkConfig(base_channels=4, dtype="float64")
    vol = np.random.default_rng(3).normal(size=(8, 16, 16))
    params = init_params(cfg, 0)
    outs = []
    for backend in ("numpy", "cython"):
        prev = _kernels.use_backend(backend)
        outs.append(predict(vol, params, cfg).final_prob.data)
        _kernels.use_backend(prev)
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10, atol=1e-12)
