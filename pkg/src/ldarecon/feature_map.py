"""Differentiable feature maps ``g: R^n -> R^(m*d)``.

Every map takes images shaped ``(..., h, w)`` and returns feature fields
shaped ``(..., h, w, d)``: one ``d``-dimensional feature vector per pixel,
so ``m = h * w``. Leading axes are batch axes and are carried through.

Three variants are provided:

``IdentityMap``
    ``g(x) = x`` with ``d = 1``; the regularizer is the l1 norm.
``LinearDiffMap``
    Forward differences with a Neumann boundary (zero difference in the
    last row/column), ``d = 2``; the regularizer is isotropic TV.
``ConvNetMap``
    Four bias-free 3x3 convolution layers, each followed by the smoothed
    ReLU :func:`activation`.
"""
from dataclasses import dataclass

import numpy as np

from ldarecon import numerics
from ldarecon.errors import InvalidArgument
from ldarecon.serialize import load_arrays, save_arrays

DEFAULT_DELTA = 0.01


@dataclass(frozen=True)
class FeatureMapSpec:
    variant: str
    image_shape: tuple
    feature_count: int
    feature_dim: int


def activation(x, delta=DEFAULT_DELTA):
    """Smoothed ReLU: 0 below ``-delta``, identity above ``delta``, quadratic between."""
    if delta <= 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    quad = x * x / (4.0 * delta) + 0.5 * x + delta / 4.0
    return np.where(x <= -delta, 0.0, np.where(x >= delta, x, quad))


def activation_grad(x, delta=DEFAULT_DELTA):
    if delta <= 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= -delta, 0.0, np.where(x >= delta, 1.0, x / (2.0 * delta) + 0.5))


def activation_curvature(x, delta=DEFAULT_DELTA):
    """Second derivative of :func:`activation` (taken as 0 at the two kinks)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where((x > -delta) & (x < delta), 1.0 / (2.0 * delta), 0.0)


class FeatureMap:
    """Common interface; subclasses implement the ``_forward``/``_vjp``/``_jvp`` hooks."""

    variant = None

    def __init__(self, image_shape, feature_dim):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.feature_dim = int(feature_dim)

    @property
    def m(self):
        return self.image_shape[0] * self.image_shape[1]

    @property
    def n(self):
        return self.m

    @property
    def spec(self):
        return FeatureMapSpec(self.variant, self.image_shape, self.m, self.feature_dim)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.image_shape:
            raise InvalidArgument(
                f"image shape {x.shape[-2:]} does not match map shape {self.image_shape}")
        return x

    def _check_field(self, x, y):
        y = np.asarray(y, dtype=np.float64)
        want = x.shape + (self.feature_dim,)
        if y.shape != want:
            raise InvalidArgument(f"feature field shape {y.shape}, expected {want}")
        return y

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        """Return ``(g(x), cache)``; pass the cache to :meth:`vjp` to skip recomputation."""
        return self._forward(self._check(x))

    def vjp(self, x, y, cache=None):
        """Return ``J_g(x)^T y`` with the same shape as ``x``."""
        x = self._check(x)
        y = self._check_field(x, y)
        if cache is None:
            cache = self._forward(x)[1]
        return self._vjp(x, y, cache)

    def jvp(self, x, v):
        """Return ``J_g(x) v``."""
        x = self._check(x)
        v = self._check(v)
        if v.shape != x.shape:
            raise InvalidArgument(f"direction shape {v.shape} differs from x {x.shape}")
        return self._jvp(x, v)

    def jacobian(self, x):
        """Dense Jacobian of a single image, shape ``(m*d, n)``; small images only."""
        x = self._check(x)
        if x.ndim != 2:
            raise InvalidArgument("jacobian needs a single (h, w) image")
        n = x.size
        basis = np.eye(n).reshape((n,) + self.image_shape)
        cols = [self._jvp(x, e).ravel() for e in basis]
        return np.stack(cols, axis=1)

    def bound_M(self, rng=None):
        raise NotImplementedError

    def bound_Lg(self, rng=None):
        raise NotImplementedError


class IdentityMap(FeatureMap):
    variant = "identity"

    def __init__(self, image_shape):
        super().__init__(image_shape, 1)

    def _forward(self, x):
        return x[..., None], None

    def _vjp(self, x, y, cache):
        return y[..., 0].copy()

    def _jvp(self, x, v):
        return v[..., None]

    def bound_M(self, rng=None):
        return 1.0

    def bound_Lg(self, rng=None):
        return 0.0


def forward_diff(x):
    """Per-pixel (vertical, horizontal) forward differences, Neumann boundary."""
    out = np.zeros(x.shape + (2,))
    out[..., :-1, :, 0] = x[..., 1:, :] - x[..., :-1, :]
    out[..., :, :-1, 1] = x[..., :, 1:] - x[..., :, :-1]
    return out


def forward_diff_adjoint(y):
    """Transpose of :func:`forward_diff` (the negative divergence)."""
    dv = y[..., 0]
    dh = y[..., 1]
    out = np.zeros(y.shape[:-1])
    out[..., 1:, :] += dv[..., :-1, :]
    out[..., :-1, :] -= dv[..., :-1, :]
    out[..., :, 1:] += dh[..., :, :-1]
    out[..., :, :-1] -= dh[..., :, :-1]
    return out


class LinearDiffMap(FeatureMap):
    """``g(x) = weight * D x`` with ``D`` the forward-difference operator.

    ``weight`` scales the TV term relative to the fidelity; ``weight = 0``
    gives ``r == 0``.
    """

    variant = "linear_diff"

    def __init__(self, image_shape, weight=1.0):
        super().__init__(image_shape, 2)
        if weight < 0:
            raise InvalidArgument("weight must be nonnegative")
        self.weight = float(weight)

    def _forward(self, x):
        return self.weight * forward_diff(x), None

    def _vjp(self, x, y, cache):
        return self.weight * forward_diff_adjoint(y)

    def _jvp(self, x, v):
        return self.weight * forward_diff(v)

    def bound_M(self, rng=None):
        # largest eigenvalue of D^T D is the sum of the two 1-D Neumann
        # Laplacian maxima 4 sin^2(pi (k-1) / (2k))
        h, w = self.image_shape
        lam = 4.0 * np.sin(np.pi * (h - 1) / (2 * h)) ** 2 + 4.0 * np.sin(np.pi * (w - 1) / (2 * w)) ** 2
        return self.weight * float(np.sqrt(lam))

    def bound_Lg(self, rng=None):
        return 0.0


@dataclass(frozen=True)
class ConvNetParams:
    """Kernels ``W_0..W_3`` (shapes 3x3x1xd, then 3x3xdxd) and the activation threshold."""

    kernels: tuple
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        kernels = tuple(np.array(k, dtype=np.float64) for k in self.kernels)
        if len(kernels) != 4:
            raise InvalidArgument(f"need 4 kernels, got {len(kernels)}")
        d = kernels[0].shape[3] if kernels[0].ndim == 4 else -1
        want = [(3, 3, 1, d)] + [(3, 3, d, d)] * 3
        for k, shape in zip(kernels, want):
            if k.shape != shape:
                raise InvalidArgument(f"kernel shape {k.shape}, expected {shape}")
            if not np.all(np.isfinite(k)):
                raise InvalidArgument("kernel weights must be finite")
        if not self.delta > 0:
            raise InvalidArgument(f"delta must be positive, got {self.delta}")
        for k in kernels:
            k.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)

    @property
    def depth(self):
        return self.kernels[0].shape[3]

    @classmethod
    def xavier(cls, depth, rng, delta=DEFAULT_DELTA):
        """Glorot-uniform kernels with fan sizes ``9 * channels``."""
        kernels = []
        for cin in (1, depth, depth, depth):
            limit = np.sqrt(6.0 / (9 * cin + 9 * depth))
            kernels.append(rng.uniform(-limit, limit, size=(3, 3, cin, depth)))
        return cls(tuple(kernels), delta)

    @classmethod
    def zeros(cls, depth, delta=DEFAULT_DELTA):
        shapes = [(3, 3, 1, depth)] + [(3, 3, depth, depth)] * 3
        return cls(tuple(np.zeros(s) for s in shapes), delta)

    def save(self, path):
        arrays = {f"W{i}": k for i, k in enumerate(self.kernels)}
        return save_arrays(path, arrays, {"kind": "conv_net", "delta": self.delta})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        return cls(tuple(arrays[f"W{i}"] for i in range(4)), meta["delta"])


class ConvNetMap(FeatureMap):
    """``g(x) = h_4`` with ``h_0 = x`` and ``h_l = activation(W_{l-1} * h_{l-1})``."""

    variant = "conv_net"

    def __init__(self, image_shape, params, backend=None):
        super().__init__(image_shape, params.depth)
        self.params = params
        self.backend = backend

    @property
    def kernels(self):
        return self.params.kernels

    @property
    def delta(self):
        return self.params.delta

    def _batch(self, x):
        return x.reshape((-1,) + self.image_shape + (1,))

    def _forward(self, x):
        h = self._batch(x)
        pre = []
        for k in self.kernels:
            a = numerics.conv2d(h, k, backend=self.backend)
            pre.append(a)
            h = activation(a, self.delta)
        return h.reshape(x.shape + (self.feature_dim,)), pre

    def _vjp(self, x, y, pre):
        delta = y.reshape((-1,) + self.image_shape + (self.feature_dim,))
        for a, k in zip(reversed(pre), reversed(self.kernels)):
            delta = numerics.conv2d_transpose(activation_grad(a, self.delta) * delta, k,
                                              backend=self.backend)
        return delta.reshape(x.shape)

    def _jvp(self, x, v):
        h = self._batch(x)
        dh = self._batch(v)
        for k in self.kernels:
            a = numerics.conv2d(h, k, backend=self.backend)
            da = numerics.conv2d(dh, k, backend=self.backend)
            h = activation(a, self.delta)
            dh = activation_grad(a, self.delta) * da
        return dh.reshape(x.shape + (self.feature_dim,))

    def layer_norms(self, rng=None, iters=200):
        """Operator norms of the four convolutions on this image shape."""
        rng = numerics.make_rng(0) if rng is None else rng
        norms = []
        for k in self.kernels:
            shape = self.image_shape + (k.shape[2],)
            norms.append(numerics.spectral_norm(
                lambda v, k=k: numerics.conv2d(v, k, backend=self.backend),
                lambda u, k=k: numerics.conv2d_transpose(u, k, backend=self.backend),
                shape, iters=iters, rng=rng))
        return norms

    def bound_M(self, rng=None):
        """Product of layer norms; the activation slope never exceeds 1."""
        return float(np.prod(self.layer_norms(rng)))

    def bound_Lg(self, rng=None):
        """Lipschitz bound for the Jacobian.

        For ``h = act(W u)`` with ``|J_u| <= M_u`` and ``Lip(J_u) <= L_u``:
        ``Lip(J_h) <= |W|^2 M_u^2 / (2 delta) + |W| L_u`` and ``|J_h| <= |W| M_u``,
        using that the activation slope is ``1/(2 delta)``-Lipschitz. Unrolled
        over four layers this is
        ``sum_l prod_{j<l}|W_j|^2 * |W_l|^2 * prod_{j>l}|W_j| / (2 delta)``.
        """
        lip, mag = 0.0, 1.0
        for w in self.layer_norms(rng):
            lip = w * w * mag * mag / (2.0 * self.delta) + w * lip
            mag = w * mag
        return float(lip)


def make_feature_map(variant, image_shape, *, weight=1.0, params=None, depth=8, rng=None,
                     delta=DEFAULT_DELTA):
    """Build a map by variant name; conv nets get Xavier kernels unless ``params`` is given."""
    if variant == "identity":
        return IdentityMap(image_shape)
    if variant == "linear_diff":
        return LinearDiffMap(image_shape, weight=weight)
    if variant == "conv_net":
        if params is None:
            params = ConvNetParams.xavier(depth, numerics.make_rng(0) if rng is None else rng, delta)
        return ConvNetMap(image_shape, params)
    raise InvalidArgument(f"unknown feature map variant {variant!r}")
