"""numba kernels against their numpy twins, plus backend selection."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_min_distances
from sshunet import kernels
from sshunet.kernels import _numba, _numpy


@given(
    B=st.integers(1, 2),
    C=st.integers(1, 3),
    S=st.integers(1, 5),
    H=st.integers(1, 6),
    k=st.sampled_from([(1, 3, 3), (3, 3, 3), (1, 1, 1), (1, 2, 2), (2, 2, 2)]),
    stride=st.sampled_from([(1, 1, 1), (1, 2, 2), (2, 2, 2)]),
    seed=st.integers(0, 2**31),
)
def test_im2col_col2im_backends_agree(B, C, S, H, k, stride, seed):
    rng = np.random.default_rng(seed)
    pad = [n + kk - 1 for n, kk in zip((S, H, H), k)]
    xp = rng.standard_normal((B, C, *pad)).astype(np.float32)
    out_sp = tuple((n - kk) // s + 1 for n, kk, s in zip(pad, k, stride))
    a = _numpy.im2col(xp, k, stride, out_sp)
    b = _numba.im2col(xp, k, stride, out_sp)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(np.float32)
    np.testing.assert_allclose(
        _numba.col2im(cols, xp.shape, k, stride, out_sp),
        _numpy.col2im(cols, xp.shape, k, stride, out_sp),
        rtol=1e-6, atol=1e-6,
    )


def test_col2im_is_adjoint_of_im2col(rng):
    k, stride = (1, 3, 3), (1, 2, 2)
    xp = rng.standard_normal((2, 2, 3, 7, 7))
    out_sp = (3, 3, 3)
    cols = rng.standard_normal((2 * 9, 2 * 27))
    for impl in (_numpy, _numba):
        lhs = (impl.im2col(xp, k, stride, out_sp) * cols).sum()
        rhs = (xp * impl.col2im(cols, xp.shape, k, stride, out_sp)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-10)


@given(n=st.integers(2, 300), rows=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_instance_stats_backends_agree(n, rows, seed):
    x = np.random.default_rng(seed).standard_normal((rows, n)).astype(np.float32) * 3 + 1
    m1, v1 = _numpy.instance_stats(x)
    m2, v2 = _numba.instance_stats(x)
    np.testing.assert_allclose(m1, m2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(v1, v2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(v1, x.astype(np.float64).var(axis=1), rtol=1e-10)


@given(na=st.integers(1, 30), nb=st.integers(1, 30), seed=st.integers(0, 2**31))
def test_min_distances_backends_match_brute_force(na, nb, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 10, (na, 3)) * np.array([1.0, 0.5, 2.0])
    b = rng.integers(0, 10, (nb, 3)) * np.array([1.0, 0.5, 2.0])
    ref = brute_min_distances(a, b)
    np.testing.assert_allclose(_numpy.min_distances(a, b), ref, rtol=1e-12)
    np.testing.assert_allclose(_numba.min_distances(a, b), ref, rtol=1e-12)


def test_min_distances_empty_target():
    a = np.zeros((3, 3))
    for impl in (_numpy, _numba):
        assert np.all(np.isinf(impl.min_distances(a, np.zeros((0, 3)))))


def test_default_backend_is_numba():
    assert kernels.BACKEND == "numba"
    assert kernels.min_distances is _numba.min_distances


def _backend_in_subprocess(value):
    env = dict(os.environ, SSHUNET_BACKEND=value)
    return subprocess.run(
        [sys.executable, "-c", "from sshunet import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True,
    )


def test_env_flag_selects_numpy():
    res = _backend_in_subprocess("numpy")
    assert res.returncode == 0 and res.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_backend():
    res = _backend_in_subprocess("cuda")
    assert res.returncode != 0 and "SSHUNET_BACKEND" in res.stderr


def test_numpy_backend_runs_a_forward_pass():
    code = (
        "import numpy as np\n"
        "from sshunet.network import UNetConfig, build\n"
        "from sshunet.tensor import Tensor\n"
        "net = build(UNetConfig(variant='shift2d', stage_widths=(4, 8), patch_extent=8), seed=0)\n"
        "x = np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8))\n"
        "import sys; sys.stdout.buffer.write(net(Tensor(x)).data.astype('<f4').tobytes())\n"
    )
    outs = []
    for value in ("numpy", "numba"):
        res = subprocess.run(
            [sys.executable, "-c", code], env=dict(os.environ, SSHUNET_BACKEND=value), capture_output=True
        )
        assert res.returncode == 0, res.stderr
        outs.append(res.stdout)
    a, b = (np.frombuffer(o, dtype="<f4") for o in outs)
    assert a.size == 3 * 8**3
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
