"""The compiled kernels and the numpy fallback must agree."""

import itertools
import os
import subprocess
import sys

import numpy as np
import pytest

from gramclust import _pykernels


def ref_im2col(x):
    b, h, w, c = x.shape
    out = np.zeros((b, h, w, 9 * c), dtype=x.dtype)
    for i in range(h):
        for j in range(w):
            for k, (di, dj) in enumerate(itertools.product(range(-1, 2), repeat=2)):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w:
                    out[:, i, j, k * c : (k + 1) * c] = x[:, ii, jj, :]
    return out


def test_sign_rows(backend):
    a = backend.sign_rows(2**64 - 5, 3, 17, 33)
    assert np.array_equal(a, _pykernels.sign_rows(2**64 - 5, 3, 17, 33))


def test_batch_gram(backend, rng):
    phi = rng.standard_normal((4, 10, 6))
    g = backend.batch_gram(phi)
    assert np.allclose(g, np.einsum("nma,nmb->nab", phi, phi) / 10, atol=1e-12)
    assert np.array_equal(g, g.transpose(0, 2, 1))


def test_assign_nearest_ties_to_lowest(backend):
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    cen = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
    labels, d2 = backend.assign_nearest(x, cen)
    assert labels.tolist() == [0, 0]
    assert d2.tolist() == [1.0, 0.0]


def test_assign_nearest_agrees(backend, rng):
    x, cen = rng.standard_normal((300, 7)), rng.standard_normal((5, 7))
    la, da = backend.assign_nearest(x, cen)
    lb, db = _pykernels.assign_nearest(x, cen)
    assert np.array_equal(la, lb)
    assert np.allclose(da, db, rtol=1e-12)


def test_cluster_sums(backend, rng):
    x = rng.standard_normal((50, 3))
    labels = rng.integers(0, 4, 50)
    sums, counts = backend.cluster_sums(x, labels, 4)
    for c in range(4):
        assert np.allclose(sums[c], x[labels == c].sum(axis=0))
        assert counts[c] == (labels == c).sum()


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_hungarian_brute_force(backend, rng, n):
    for _ in range(20):
        cost = rng.integers(0, 20, (n, n)).astype(float)
        col = backend.hungarian(cost)
        assert sorted(col.tolist()) == list(range(n))
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert cost[np.arange(n), col].sum() == best


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_and_adjoint(backend, rng, dtype):
    x = rng.standard_normal((2, 5, 4, 3)).astype(dtype)
    cols = backend.im2col3x3(x)
    assert np.array_equal(cols, ref_im2col(x))
    d = rng.standard_normal(cols.shape).astype(dtype)
    back = backend.col2im3x3(d, 3)
    # adjoint identity <im2col(x), d> == <x, col2im(d)>
    lhs = float(np.sum(cols.astype(np.float64) * d))
    rhs = float(np.sum(x.astype(np.float64) * back))
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))
    assert np.allclose(back, _pykernels.col2im3x3(d, 3), atol=1e-5)


def test_env_var_selects_fallback():
    code = "from gramclust import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, GRAMCLUST_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
