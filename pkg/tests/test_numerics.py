import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldarecon import _backend, numerics
from ldarecon.errors import InvalidArgument


def naive_conv(x, k):
    h, w, ci = x.shape
    co = k.shape[3]
    out = np.zeros((h, w, co))
    for i in range(h):
        for j in range(w):
            for p in range(3):
                for q in range(3):
                    ii, jj = i + p - 1, j + q - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        for c in range(ci):
                            for e in range(co):
                                out[i, j, e] += x[ii, jj, c] * k[p, q, c, e]
    return out


def dense_conv_matrix(shape, k, backend=None):
    n = int(np.prod(shape))
    cols = [numerics.conv2d(e.reshape(shape), k, backend=backend).ravel() for e in np.eye(n)]
    return np.stack(cols, axis=1)


BACKENDS = sorted(_backend.BACKENDS)


@pytest.mark.parametrize("backend", BACKENDS)
def test_center_tap_scaling(backend):
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 2.0
    out = numerics.conv2d(np.array([[[5.0]]]), k, backend=backend)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 10.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_averaging_kernel_zero_padding(backend):
    out = numerics.conv2d(np.ones((3, 3, 1)), np.full((3, 3, 1, 1), 1.0 / 9), backend=backend)
    assert out[1, 1, 0] == pytest.approx(1.0, abs=1e-15)
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out[i, j, 0] == pytest.approx(4.0 / 9, abs=1e-15)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv_matches_loop_oracle(backend):
    rng = numerics.make_rng(1)
    x = rng.standard_normal((8, 8, 3))
    k = rng.standard_normal((3, 3, 3, 4))
    np.testing.assert_allclose(numerics.conv2d(x, k, backend=backend), naive_conv(x, k),
                               atol=1e-12, rtol=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_transpose_matches_dense_matrix(backend):
    rng = numerics.make_rng(2)
    k = rng.standard_normal((3, 3, 2, 3))
    mat = dense_conv_matrix((5, 5, 2), k, backend)
    y = rng.standard_normal((5, 5, 3))
    got = numerics.conv2d_transpose(y, k, backend=backend)
    np.testing.assert_allclose(got.ravel(), mat.T @ y.ravel(), atol=1e-12, rtol=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_grad_out(backend):
    k = numerics.make_rng(0).standard_normal((3, 3, 2, 3))
    assert not numerics.conv2d_transpose(np.zeros((4, 4, 3)), k, backend=backend).any()


@pytest.mark.parametrize("backend", BACKENDS)
def test_adjoint_identity_random_draws(backend):
    rng = numerics.make_rng(3)
    for _ in range(100):
        h, w = rng.integers(1, 9, size=2)
        ci, co = rng.integers(1, 5, size=2)
        x = rng.standard_normal((h, w, ci))
        y = rng.standard_normal((h, w, co))
        k = rng.standard_normal((3, 3, ci, co))
        lhs = np.vdot(numerics.conv2d(x, k, backend=backend), y)
        rhs = np.vdot(x, numerics.conv2d_transpose(y, k, backend=backend))
        assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


@pytest.mark.parametrize("backend", BACKENDS)
def test_kernel_grad_matches_definition(backend):
    rng = numerics.make_rng(4)
    x = rng.standard_normal((2, 6, 5, 3))
    g = rng.standard_normal((2, 6, 5, 2))
    grad = numerics.conv2d_kernel_grad(x, g, backend=backend)
    # <conv(x, K), g> is linear in K, so its gradient is read off basis kernels
    want = np.zeros((3, 3, 3, 2))
    for idx in np.ndindex(want.shape):
        e = np.zeros(want.shape)
        e[idx] = 1.0
        want[idx] = np.vdot(numerics.conv2d(x, e, backend=backend), g)
    np.testing.assert_allclose(grad, want, atol=1e-12, rtol=0)


def test_conv_linear():
    rng = numerics.make_rng(5)
    x, y = rng.standard_normal((2, 7, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(numerics.conv2d(a * x + b * y, k),
                               a * numerics.conv2d(x, k) + b * numerics.conv2d(y, k), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.integers(1, 4),
       st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_backends_agree(n, h, w, ci, co, seed):
    rng = numerics.make_rng(seed)
    x = rng.standard_normal((n, h, w, ci))
    g = rng.standard_normal((n, h, w, co))
    k = rng.standard_normal((3, 3, ci, co))
    ref = _backend.get("python")
    for name in BACKENDS:
        mod = _backend.get(name)
        np.testing.assert_allclose(mod.conv2d(x, k), ref.conv2d(x, k), atol=1e-12)
        np.testing.assert_allclose(mod.conv2d_transpose(g, k), ref.conv2d_transpose(g, k), atol=1e-12)
        np.testing.assert_allclose(mod.conv2d_kernel_grad(x, g), ref.conv2d_kernel_grad(x, g),
                                   atol=1e-11)


def test_shape_errors():
    k = np.zeros((3, 3, 2, 4))
    with pytest.raises(InvalidArgument):
        numerics.conv2d(np.zeros((4, 4, 3)), k)
    with pytest.raises(InvalidArgument):
        numerics.conv2d_transpose(np.zeros((4, 4, 2)), k)
    with pytest.raises(InvalidArgument):
        numerics.conv2d(np.zeros((4, 4, 2)), np.zeros((5, 5, 2, 4)))
    with pytest.raises(InvalidArgument):
        numerics.conv2d_kernel_grad(np.zeros((4, 4, 2)), np.zeros((4, 5, 4)))


def test_unknown_backend():
    with pytest.raises(ValueError):
        _backend.get("fortran")


def _matrix_norm(mat, iters=200, seed=0):
    return numerics.spectral_norm(lambda v: mat @ v, lambda u: mat.T @ u, (mat.shape[1],),
                                  iters=iters, rng=numerics.make_rng(seed))


def test_spectral_norm_diagonal():
    assert _matrix_norm(np.diag([1.0, 2.0])) == pytest.approx(2.0, abs=1e-6)


def test_spectral_norm_orthonormal_rows():
    q, _ = np.linalg.qr(numerics.make_rng(0).standard_normal((20, 8)))
    assert _matrix_norm(q.T) == pytest.approx(1.0, abs=1e-6)


def test_spectral_norm_matches_svd():
    mat = numerics.make_rng(6).standard_normal((10, 10))
    true = np.linalg.svd(mat, compute_uv=False)[0]
    assert _matrix_norm(mat, iters=2000) == pytest.approx(true, abs=1e-6)


def test_spectral_norm_zero_operator():
    assert _matrix_norm(np.zeros((4, 3))) == 0.0


def test_spectral_norm_rejects_bad_iters():
    with pytest.raises(InvalidArgument):
        numerics.spectral_norm(lambda v: v, lambda v: v, (3,), iters=0)


def test_spectral_norm_bounds_with_gap():
    rng = numerics.make_rng(7)
    for _ in range(20):
        u, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        v, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        s = np.sort(rng.uniform(0.1, 1.0, 12))[::-1]
        s[0] = s[1] + 0.1 + rng.uniform(0, 1)
        mat = u @ np.diag(s) @ v.T
        est = _matrix_norm(mat)
        assert s[0] * (1 - 1e-4) <= est <= s[0] + 1e-6


def test_spectral_norm_nondecreasing_in_iters():
    mat = numerics.make_rng(8).standard_normal((15, 9))
    ests = [_matrix_norm(mat, iters=i) for i in (1, 2, 5, 10, 50, 200)]
    assert all(b >= a for a, b in zip(ests, ests[1:]))


def test_rng_reproducible():
    a = numerics.make_rng(123).random(10_000)
    b = numerics.make_rng(123).random(10_000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, numerics.make_rng(124).random(10_000))


def test_pure_python_fallback_selected_by_environment():
    import os
    import subprocess
    import sys
    env = dict(os.environ, LDARECON_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import ldarecon; print(ldarecon.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
