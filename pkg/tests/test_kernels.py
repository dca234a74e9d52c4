"""The compiled and numpy kernels must agree; the backend switch must work."""
import os
import subprocess
import sys

import numpy as np
import pytest

from fatrec import kernels

from .conftest import available_backends

needs_both = pytest.mark.skipif(len(available_backends()) < 2, reason="compiled kernels not built")


def _lstm_inputs(rng, B=3, L=6, d=5):
    X = rng.normal(size=(B, L, d))
    mask = (rng.random((B, L)) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    W = rng.normal(scale=0.4, size=(2 * d, 3 * d))
    V = rng.normal(scale=0.4, size=(2 * d, d))
    return X, mask, W, rng.normal(size=3 * d), V, rng.normal(size=d)


@needs_both
def test_lstm_backends_agree():
    rng = np.random.default_rng(0)
    X, mask, W, bW, V, bV = _lstm_inputs(rng)
    py, cy = kernels.backend_module("python"), kernels.backend_module("cython")
    a = py.lstm_forward(X, mask, W, bW, V, bV)
    b = cy.lstm_forward(X, mask, W, bW, V, bV)
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) < 1e-12
    dH = rng.normal(size=a[0].shape)
    ga = py.lstm_backward(X, mask, W, V, *a, dH)
    gb = cy.lstm_backward(X, mask, W, V, *b, dH)
    for x, y in zip(ga, gb):
        assert np.max(np.abs(x - y)) < 1e-12


@needs_both
def test_routing_backends_agree():
    rng = np.random.default_rng(1)
    U, n, T, d = 3, 7, 4, 5
    uhat = rng.normal(size=(U, n, T, d))
    mask = np.ones((U, n), np.uint8)
    mask[1, 4:] = 0
    py, cy = kernels.backend_module("python"), kernels.backend_module("cython")
    a = py.route_forward(uhat, mask, 3, None)
    b = cy.route_forward(uhat, mask, 3, None)
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) < 1e-12
    dv, dc = rng.normal(size=(U, T, d)), rng.normal(size=(U, n, T))
    ga = py.route_backward(uhat, mask, *a[2:], dv, dc)
    gb = cy.route_backward(uhat, mask, *b[2:], dv, dc)
    assert np.max(np.abs(ga - gb)) < 1e-12


def test_squash_backend(backend):
    s = np.array([[1.2, 1.6], [0.0, 0.0]])
    out = backend.squash(s)
    assert np.allclose(out[0], [0.48, 0.64], atol=1e-15)
    assert np.array_equal(out[1], [0.0, 0.0])


def test_masked_steps_carry_state(backend):
    rng = np.random.default_rng(2)
    X, _, W, bW, V, bV = _lstm_inputs(rng, B=1, L=4)
    mask = np.array([[1, 1, 0, 0]], np.uint8)
    H = backend.lstm_forward(X, mask, W, bW, V, bV)[0]
    assert np.array_equal(H[0, 1], H[0, 3])


def test_pure_python_env_switch():
    env = dict(os.environ, FATREC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fatrec; print(fatrec.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.backend_module("fortran")
