"""Dense numerical kernels: 3x3 convolution, its adjoint, power iteration, RNG.

Images with channels use (height, width, channels) layout; a leading batch
axis is accepted everywhere. Kernels are (3, 3, in_channels, out_channels).
Convolution is cross-correlation with stride 1 and zero padding 1, so the
spatial size is preserved.

The random generator is numpy's ``PCG64`` bit generator wrapped in a
``numpy.random.Generator``; the same seed gives the same stream on every
platform.
"""
import numpy as np

from ldarecon import _backend
from ldarecon.errors import InvalidArgument


def make_rng(seed=0):
    """Deterministic PCG64 generator."""
    return np.random.Generator(np.random.PCG64(seed))


def _as_batch(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return np.ascontiguousarray(x[None]), True
    if x.ndim == 4:
        return np.ascontiguousarray(x), False
    raise InvalidArgument(f"{name} must be (h, w, c) or (n, h, w, c), got shape {x.shape}")


def _check_kernel(kernel):
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise InvalidArgument(f"kernel must have shape (3, 3, cin, cout), got {kernel.shape}")
    return kernel


def conv2d(x, kernel, backend=None):
    """Convolve ``x`` with a 3x3 kernel; output has ``kernel.shape[3]`` channels."""
    xb, single = _as_batch(x, "input")
    kernel = _check_kernel(kernel)
    if xb.shape[3] != kernel.shape[2]:
        raise InvalidArgument(
            f"input has {xb.shape[3]} channels, kernel expects {kernel.shape[2]}")
    out = _backend.get(backend).conv2d(xb, kernel)
    return out[0] if single else out


def conv2d_transpose(grad_out, kernel, backend=None):
    """Apply the transpose of ``conv2d(., kernel)`` to ``grad_out``."""
    gb, single = _as_batch(grad_out, "grad_out")
    kernel = _check_kernel(kernel)
    if gb.shape[3] != kernel.shape[3]:
        raise InvalidArgument(
            f"grad_out has {gb.shape[3]} channels, kernel produces {kernel.shape[3]}")
    out = _backend.get(backend).conv2d_transpose(gb, kernel)
    return out[0] if single else out


def conv2d_kernel_grad(x, grad_out, backend=None):
    """Gradient of ``<conv2d(x, K), grad_out>`` with respect to ``K``."""
    xb, _ = _as_batch(x, "input")
    gb, _ = _as_batch(grad_out, "grad_out")
    if xb.shape[:3] != gb.shape[:3]:
        raise InvalidArgument(f"input {xb.shape} and grad_out {gb.shape} disagree")
    return _backend.get(backend).conv2d_kernel_grad(xb, gb)


def spectral_norm(apply, adjoint, shape, iters=200, rng=None):
    """Estimate the largest singular value of a linear map by power iteration.

    Parameters
    ----------
    apply, adjoint : callable
        The map and its adjoint. ``apply`` may return complex values.
    shape : tuple of int
        Shape of the map's input.
    iters : int
        Number of power iterations on ``adjoint(apply(.))``.
    rng : numpy.random.Generator, optional
        Source of the starting vector (seed 0 if omitted).

    Returns
    -------
    float
        The best estimate seen; it never decreases with ``iters`` and is
        0.0 for the zero operator.
    """
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    rng = make_rng(0) if rng is None else rng
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    best = 0.0
    for _ in range(iters):
        av = apply(v)
        est = float(np.sqrt(np.real(np.vdot(av, av))))
        best = max(best, est)
        w = np.real(adjoint(av))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    return best
