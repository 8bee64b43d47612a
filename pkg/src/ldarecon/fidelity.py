"""Least-squares data fidelity ``f(x) = 1/2 |A x - b|^2`` and its forward operators.

Operators map images ``(..., h, w)`` to measurements ``(..., k)`` and back:

``IdentityOperator``      denoising, ``A = I``.
``DenseOperator``         block compressed sensing with a dense ``k x n`` matrix.
``MaskedDftOperator``     CS-MRI: unitary 2-D DFT followed by a k-space mask.

For MRI the image is real and the data complex; the gradient is the real
part of ``A^H (A x - b)``.
"""
import numpy as np

from ldarecon import numerics
from ldarecon.errors import InvalidArgument, InvalidData
from ldarecon.serialize import load_arrays, save_arrays


def _check_image(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != tuple(shape):
        raise InvalidArgument(f"image shape {x.shape[-2:]} does not match operator {tuple(shape)}")
    return x


class IdentityOperator:
    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)

    @property
    def n_measurements(self):
        return self.image_shape[0] * self.image_shape[1]

    def apply(self, x):
        x = _check_image(x, self.image_shape)
        return x.reshape(x.shape[:-2] + (-1,))

    def adjoint(self, b):
        b = np.asarray(b)
        return b.reshape(b.shape[:-1] + self.image_shape)

    def normal(self, x):
        return _check_image(x, self.image_shape)


class DenseOperator:
    """Real ``k x n`` matrix acting on flattened images."""

    def __init__(self, matrix, image_shape):
        matrix = np.asarray(matrix, dtype=np.float64)
        self.image_shape = tuple(image_shape)
        n = self.image_shape[0] * self.image_shape[1]
        if matrix.ndim != 2 or matrix.shape[1] != n:
            raise InvalidArgument(f"matrix shape {matrix.shape} incompatible with {n} pixels")
        self.matrix = matrix

    @classmethod
    def identity(cls, image_shape):
        n = image_shape[0] * image_shape[1]
        return cls(np.eye(n), image_shape)

    @classmethod
    def orthonormal_gaussian(cls, ratio, image_shape, rng):
        """Gaussian matrix with ``ceil(ratio * n)`` orthonormalized rows."""
        if not 0 < ratio < 1:
            raise InvalidArgument(f"CS ratio must lie in (0, 1), got {ratio}")
        n = image_shape[0] * image_shape[1]
        rows = int(np.ceil(ratio * n))
        return cls(orthonormalize_rows(rng.standard_normal((rows, n))), image_shape)

    @property
    def n_measurements(self):
        return self.matrix.shape[0]

    def save(self, path):
        return save_arrays(path, {"matrix": self.matrix},
                           {"kind": "dense_operator", "image_shape": list(self.image_shape)})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "dense_operator":
            raise InvalidData(f"{path}: not a dense operator file")
        return cls(arrays["matrix"], meta["image_shape"])

    def apply(self, x):
        x = _check_image(x, self.image_shape)
        return x.reshape(x.shape[:-2] + (-1,)) @ self.matrix.T

    def adjoint(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[-1] != self.matrix.shape[0]:
            raise InvalidArgument(f"measurement length {b.shape[-1]}, expected {self.matrix.shape[0]}")
        return (b @ self.matrix).reshape(b.shape[:-1] + self.image_shape)

    def normal(self, x):
        return self.adjoint(self.apply(x))


def orthonormalize_rows(mat):
    """Modified Gram-Schmidt on the rows, run twice for full working precision."""
    q = np.array(mat, dtype=np.float64)
    for _ in range(2):
        for i in range(q.shape[0]):
            row = q[i]
            for j in range(i):
                row -= (q[j] @ row) * q[j]
            nrm = np.linalg.norm(row)
            if nrm == 0.0:
                raise InvalidArgument("rows are linearly dependent")
            row /= nrm
    return q


class MaskedDftOperator:
    """Unitary 2-D DFT restricted to the k-space samples where ``mask`` is set.

    ``mask`` is given on the DC-centered grid (DC at ``(h//2, w//2)``).
    """

    def __init__(self, mask):
        mask = np.asarray(mask)
        if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
            raise InvalidArgument("mask must be a 2-D binary array")
        self.mask = mask.astype(bool)
        self.image_shape = self.mask.shape
        self._unshifted = np.fft.ifftshift(self.mask)

    @property
    def n_measurements(self):
        return int(self.mask.sum())

    @property
    def sampling_ratio(self):
        return float(self.mask.mean())

    def save(self, path):
        return save_arrays(path, {"mask": self.mask.astype(np.float64)}, {"kind": "kspace_mask"})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "kspace_mask":
            raise InvalidData(f"{path}: not a k-space mask file")
        return cls(arrays["mask"])

    def apply(self, x):
        x = _check_image(x, self.image_shape)
        return np.fft.fft2(x, norm="ortho")[..., self._unshifted]

    def adjoint(self, b):
        b = np.asarray(b)
        if b.shape[-1] != self.n_measurements:
            raise InvalidArgument(f"measurement length {b.shape[-1]}, expected {self.n_measurements}")
        full = np.zeros(b.shape[:-1] + self.image_shape, dtype=np.complex128)
        full[..., self._unshifted] = b
        return np.fft.ifft2(full, norm="ortho")

    def normal(self, x):
        return np.real(self.adjoint(self.apply(x)))


def lipschitz_f(op, rng=None, iters=200):
    """``|A|^2``, estimated by power iteration."""
    if isinstance(op, IdentityOperator):
        return 1.0
    norm = numerics.spectral_norm(op.apply, op.adjoint, op.image_shape, iters=iters, rng=rng)
    return norm * norm


class LeastSquares:
    """``f(x) = 1/2 |A x - b|^2``; batched ``x`` and ``b`` are paired along leading axes."""

    def __init__(self, op, b):
        self.op = op
        self.b = np.asarray(b)
        if self.b.shape[-1] != op.n_measurements:
            raise InvalidArgument(
                f"measurement length {self.b.shape[-1]}, operator gives {op.n_measurements}")
        self._atb = np.real(op.adjoint(self.b))
        self._lipschitz = None

    @property
    def image_shape(self):
        return self.op.image_shape

    def value(self, x):
        res = self.op.apply(x) - self.b
        return 0.5 * np.sum(np.abs(res) ** 2, axis=-1)

    def grad(self, x):
        return np.real(self.op.adjoint(self.op.apply(x) - self.b))

    def hessian_apply(self, v):
        """``Re(A^H A v)``; the gradient is affine with this linear part."""
        return self.op.normal(v)

    def lipschitz(self, rng=None):
        if self._lipschitz is None:
            self._lipschitz = lipschitz_f(self.op, rng)
        return self._lipschitz


def apply(op, x):
    return op.apply(x)


def grad_f(op, x, b):
    return LeastSquares(op, b).grad(x)


def make_radial_mask(shape, ratio, rng, max_lines=None):
    """Radial k-space mask on the DC-centered grid.

    Lines through the DC sample are rasterized one pixel per step along
    their dominant axis; the first line is horizontal and the rest have
    uniformly random angles in ``[0, pi)``. Lines are added until the
    sampled fraction reaches ``ratio``.

    Returns
    -------
    mask : ndarray of bool
    achieved : float
        The sampled fraction actually obtained (``>= ratio``).
    """
    if not 0 < ratio < 1:
        raise InvalidArgument(f"sampling ratio must lie in (0, 1), got {ratio}")
    h, w = shape
    ch, cw = h // 2, w // 2
    mask = np.zeros((h, w), dtype=bool)
    target = ratio * h * w
    max_lines = 200 * max(h, w) if max_lines is None else max_lines
    angle = 0.0
    for _ in range(max_lines):
        _draw_line(mask, ch, cw, angle)
        if mask.sum() >= target:
            return mask, float(mask.mean())
        angle = rng.uniform(0.0, np.pi)
    raise InvalidArgument(f"could not reach sampling ratio {ratio} with {max_lines} lines")


def _draw_line(mask, ch, cw, angle):
    h, w = mask.shape
    c, s = np.cos(angle), np.sin(angle)
    if abs(c) >= abs(s):
        k = np.arange(-cw, w - cw)
        dj = k
        di = np.rint(k * (s / c))
    else:
        k = np.arange(-ch, h - ch)
        di = k
        dj = np.rint(k * (c / s))
    i = ch + di.astype(int)
    j = cw + dj.astype(int)
    ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    mask[i[ok], j[ok]] = True
