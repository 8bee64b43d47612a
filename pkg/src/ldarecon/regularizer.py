"""The l2,1 regularizer of a feature field and its Nesterov smoothing.

Feature fields are arrays whose last axis holds the ``d`` components of each
feature vector. Reductions run over every axis after the first
``batch_ndim`` ones, so ``batch_ndim=1`` gives one value per sample.
``eps`` may be a scalar or an array with the batch shape.
"""
from dataclasses import dataclass

import numpy as np

from ldarecon.errors import InvalidArgument, Unsupported

CLARKE_MAX_PIXELS = 256


@dataclass(frozen=True)
class IndexPartition:
    """Flat feature indices with ``|g_i| <= eps`` (I0) and the rest (I1)."""

    I0: np.ndarray
    I1: np.ndarray


def _reduce_axes(arr, batch_ndim):
    return tuple(range(batch_ndim, arr.ndim))


def _expand(eps, ndim):
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps <= 0):
        raise InvalidArgument("eps must be positive")
    return eps.reshape(eps.shape + (1,) * (ndim - eps.ndim))


def block_norms(gvals):
    return np.linalg.norm(np.asarray(gvals, dtype=np.float64), axis=-1)


def r(gvals, batch_ndim=0):
    """Sum of Euclidean block norms."""
    norms = block_norms(gvals)
    return norms.sum(axis=_reduce_axes(norms, batch_ndim))


def dual_max(gvals, eps):
    """Closed-form maximizer of ``<g, y> - eps/2 |y|^2`` over unit-ball blocks."""
    gvals = np.asarray(gvals, dtype=np.float64)
    norms = block_norms(gvals)[..., None]
    e = _expand(eps, norms.ndim)
    inside = norms <= e
    safe = np.where(inside, 1.0, norms)
    return np.where(inside, gvals / e, gvals / safe)


def r_eps(gvals, eps, batch_ndim=0):
    """Smoothed regularizer: Huber-type value per block, summed."""
    norms = block_norms(gvals)
    e = _expand(eps, norms.ndim)
    vals = np.where(norms <= e, norms * norms / (2.0 * e), norms - e / 2.0)
    return vals.sum(axis=_reduce_axes(vals, batch_ndim))


def partition(gvals, eps):
    norms = block_norms(gvals).ravel()
    inside = norms <= eps
    return IndexPartition(np.flatnonzero(inside), np.flatnonzero(~inside))


def grad_r_eps(fmap, x, eps, cache=None):
    """``J_g(x)^T y*`` where ``y*`` is :func:`dual_max` of ``g(x)``.

    ``cache`` may be the ``(g, cache)`` pair from ``fmap.forward_cached(x)``.
    """
    gvals, fcache = fmap.forward_cached(x) if cache is None else cache
    return fmap.vjp(x, dual_max(gvals, eps), cache=fcache)


def sandwich_check(gvals, eps):
    """Return ``(r - r_eps, r_eps + m*eps/2 - r)``; both are nonnegative."""
    m = block_norms(gvals).size
    rv = float(r(gvals))
    rev = float(r_eps(gvals, eps))
    return rv - rev, rev + m * eps / 2.0 - rv


def project_blocks(w):
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    return w / np.maximum(norms, 1.0)


def clarke_residual(fmap, x, grad_f, zero_tol=1e-8, iters=20000, tol=1e-13):
    """Upper bound on ``dist(0, grad f(x) + dr(x))`` for small images.

    Blocks with ``|g_i(x)| <= zero_tol`` are treated as zero. For those the
    Clarke set allows any ``J_i^T w_i`` with the projection of ``w_i`` onto
    the range of ``J_i`` in the unit ball; since ``J_i^T w_i`` only sees that
    projection, it suffices to search over ``|w_i| <= 1``. The convex
    problem ``min |sum_I0 J_i^T w_i + c|`` is solved by accelerated
    projected gradient on the materialized Jacobian, and the objective at
    the final feasible point is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size > CLARKE_MAX_PIXELS:
        raise Unsupported(
            f"clarke_residual needs a single image with at most {CLARKE_MAX_PIXELS} pixels")
    d = fmap.feature_dim
    gvals = fmap.forward(x).reshape(-1, d)
    norms = np.linalg.norm(gvals, axis=1)
    jac = fmap.jacobian(x).reshape(-1, d, x.size)
    zero = norms <= zero_tol
    live = ~zero
    c = np.asarray(grad_f, dtype=np.float64).ravel().copy()
    if live.any():
        units = gvals[live] / norms[live, None]
        c += np.einsum("kdn,kd->n", jac[live], units)
    if not zero.any():
        return float(np.linalg.norm(c))
    jz = jac[zero].reshape(-1, x.size)  # rows are (block, component)
    lip = np.linalg.norm(jz, 2) ** 2
    if lip == 0.0:
        return float(np.linalg.norm(c))
    w = np.zeros((int(zero.sum()), d))
    w_prev = w
    t = 1.0
    best = np.linalg.norm(c)
    for _ in range(iters):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = w + ((t - 1.0) / t_next) * (w - w_prev)
        resid = jz.T @ yk.ravel() + c
        step = yk - (jz @ resid).reshape(w.shape) / lip
        w_prev, w, t = w, project_blocks(step), t_next
        val = np.linalg.norm(jz.T @ w.ravel() + c)
        if val < best - tol:
            best = val
        elif np.linalg.norm(w - w_prev) < tol:
            break
    return float(min(best, np.linalg.norm(jz.T @ w.ravel() + c)))
