"""The compiled and pure-numpy kernel backends must agree to near machine
precision, and the PANALIGN_KERNELS switch must select what it says."""

import os
import subprocess
import sys

import numpy as np
import pytest

from panalign import kernels
from panalign.kernels import numpy_backend

fastkern = pytest.importorskip("panalign.kernels._fastkern")


def _conv_case(seed, n=2, cin=3, cout=4, h=9, w=7, stride=1, padding=1):
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.normal(size=(n, cin, h, w)))
    wt = np.ascontiguousarray(rng.normal(size=(cout, cin, 3, 3)))
    b = np.ascontiguousarray(rng.normal(size=cout))
    return x, wt, b, stride, padding


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
def test_conv_forward_backends_agree(seed, stride, padding):
    x, wt, b, _, _ = _conv_case(seed)
    a = numpy_backend.conv2d_forward(x, wt, b, stride, padding)
    c = fastkern.conv2d_forward(x, wt, b, stride, padding)
    np.testing.assert_allclose(a, c, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_backends_agree(seed):
    x, wt, b, stride, padding = _conv_case(seed)
    out = numpy_backend.conv2d_forward(x, wt, b, stride, padding)
    g = np.ascontiguousarray(np.random.default_rng(seed + 100).normal(size=out.shape))
    ga = numpy_backend.conv2d_backward(x, wt, g, stride, padding, True)
    gc = fastkern.conv2d_backward(x, wt, g, stride, padding, True)
    for a, c in zip(ga, gc):
        np.testing.assert_allclose(a, c, atol=1e-11)


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_backends_agree(seed):
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.normal(size=(2, 3, 8, 6)))
    oa, sa = numpy_backend.maxpool2_forward(x)
    oc, sc = fastkern.maxpool2_forward(x)
    np.testing.assert_array_equal(oa, oc)
    g = np.ascontiguousarray(rng.normal(size=oa.shape))
    np.testing.assert_array_equal(
        numpy_backend.maxpool2_backward(sa, g, 8, 6),
        fastkern.maxpool2_backward(sc, g, 8, 6),
    )


def test_maxpool_tie_first_wins_both_backends():
    x = np.full((1, 1, 2, 2), 3.0)
    g = np.ones((1, 1, 1, 1))
    for mod in (numpy_backend, fastkern):
        out, sw = mod.maxpool2_forward(x)
        assert out.item() == 3.0
        gx = mod.maxpool2_backward(sw, g, 2, 2)
        np.testing.assert_array_equal(gx, [[[[1.0, 0.0], [0.0, 0.0]]]])


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_backends_agree(seed):
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.normal(size=(2, 3, 6, 5)))
    # include in-range, out-of-range, and near-integer source coordinates
    px = np.ascontiguousarray(rng.uniform(-2, 6, size=(2, 4, 4)))
    py = np.ascontiguousarray(rng.uniform(-2, 7, size=(2, 4, 4)))
    px[0, 0, 0] = 2.0
    py[0, 0, 0] = 3.0
    oa = numpy_backend.bilinear_forward(x, px, py)
    oc = fastkern.bilinear_forward(x, px, py)
    np.testing.assert_allclose(oa, oc, atol=1e-13)
    g = np.ascontiguousarray(rng.normal(size=oa.shape))
    ga = numpy_backend.bilinear_backward(x, px, py, g)
    gc = fastkern.bilinear_backward(x, px, py, g)
    for a, c in zip(ga, gc):
        np.testing.assert_allclose(a, c, atol=1e-12)


@pytest.mark.parametrize("choice,expected", [
    ("numpy", "numpy"),
    ("cython", "cython"),
    ("auto", "mixed"),
])
def test_env_var_selects_backend(choice, expected):
    code = "import panalign.kernels as k; print(k.backend_name)"
    env = dict(os.environ, PANALIGN_KERNELS=choice)
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_bad_env_var_rejected():
    code = "import panalign.kernels"
    env = dict(os.environ, PANALIGN_KERNELS="fortran")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode != 0
    assert "fortran" in out.stderr


def test_active_backend_exposed():
    assert kernels.backend_name in ("numpy", "cython", "mixed")
