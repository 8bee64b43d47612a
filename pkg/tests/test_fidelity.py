import numpy as np
import pytest

from ldarecon import fidelity as fd
from ldarecon import numerics
from ldarecon.errors import InvalidArgument, InvalidData


def test_identity_dense_apply():
    x = numerics.make_rng(0).random((3, 4))
    np.testing.assert_array_equal(fd.DenseOperator.identity((3, 4)).apply(x), x.ravel())
    np.testing.assert_array_equal(fd.IdentityOperator((3, 4)).apply(x), x.ravel())


def test_dense_matches_loop_oracle():
    rng = numerics.make_rng(1)
    mat = rng.standard_normal((10, 20))
    x = rng.standard_normal((4, 5))
    want = np.zeros(10)
    for i in range(10):
        for j in range(20):
            want[i] += mat[i, j] * x.ravel()[j]
    np.testing.assert_allclose(fd.DenseOperator(mat, (4, 5)).apply(x), want, atol=1e-12)


def test_full_mask_is_unitary_dft():
    x = numerics.make_rng(2).random((6, 8))
    op = fd.MaskedDftOperator(np.ones((6, 8)))
    b = op.apply(x)
    assert np.linalg.norm(b) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(np.sort(np.abs(b)), np.sort(np.abs(np.fft.fft2(x).ravel()) / np.sqrt(48)))


def test_mask_dc_centered():
    mask = np.zeros((6, 8))
    mask[3, 4] = 1
    op = fd.MaskedDftOperator(mask)
    x = numerics.make_rng(3).random((6, 8))
    assert op.apply(x)[0] == pytest.approx(x.sum() / np.sqrt(48))


def test_adjoint_identities():
    rng = numerics.make_rng(4)
    dense = fd.DenseOperator.orthonormal_gaussian(0.3, (6, 7), rng)
    mask, _ = fd.make_radial_mask((8, 9), 0.4, rng)
    mri = fd.MaskedDftOperator(mask)
    for _ in range(100):
        x = rng.standard_normal((6, 7))
        y = rng.standard_normal(dense.n_measurements)
        assert abs(np.vdot(dense.apply(x), y) - np.vdot(x, dense.adjoint(y))) <= 1e-10
        x = rng.standard_normal((8, 9))
        y = rng.standard_normal(mri.n_measurements) + 1j * rng.standard_normal(mri.n_measurements)
        assert abs(np.vdot(y, mri.apply(x)) - np.vdot(mri.adjoint(y), x)) <= 1e-10


def test_orthonormal_rows():
    op = fd.DenseOperator.orthonormal_gaussian(0.25, (33, 33), numerics.make_rng(5))
    assert op.n_measurements == int(np.ceil(0.25 * 33 * 33))
    gram = op.matrix @ op.matrix.T
    assert np.abs(gram - np.eye(op.n_measurements)).max() <= 1e-10
    assert fd.lipschitz_f(op, numerics.make_rng(0)) == pytest.approx(1.0, abs=1e-6)


def test_orthonormalize_dependent_rows():
    with pytest.raises(InvalidArgument):
        fd.orthonormalize_rows(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_lipschitz_examples():
    mask, _ = fd.make_radial_mask((16, 16), 0.3, numerics.make_rng(6))
    assert fd.lipschitz_f(fd.MaskedDftOperator(mask), numerics.make_rng(0)) == pytest.approx(1.0, abs=1e-9)
    mat = fd.DenseOperator.orthonormal_gaussian(0.5, (4, 4), numerics.make_rng(7)).matrix
    assert fd.lipschitz_f(fd.DenseOperator(2 * mat, (4, 4)), numerics.make_rng(0)) == pytest.approx(4.0, abs=1e-5)
    assert fd.lipschitz_f(fd.IdentityOperator((3, 3))) == 1.0


def test_grad_examples():
    rng = numerics.make_rng(8)
    op = fd.DenseOperator(rng.standard_normal((6, 12)), (3, 4))
    x = rng.standard_normal((3, 4))
    assert not np.any(np.abs(fd.grad_f(op, x, op.apply(x))) > 1e-12)
    np.testing.assert_array_equal(fd.grad_f(fd.IdentityOperator((3, 4)), x, np.zeros(12)), x)


@pytest.mark.parametrize("kind", ["dense", "mri"])
def test_grad_finite_difference(kind):
    rng = numerics.make_rng(9)
    if kind == "dense":
        op = fd.DenseOperator(rng.standard_normal((7, 12)), (3, 4))
        b = rng.standard_normal(7)
    else:
        mask, _ = fd.make_radial_mask((3, 4), 0.5, rng)
        op = fd.MaskedDftOperator(mask)
        b = rng.standard_normal(op.n_measurements) + 1j * rng.standard_normal(op.n_measurements)
    f = fd.LeastSquares(op, b)
    x = rng.standard_normal((3, 4))
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        num[idx] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    assert np.linalg.norm(f.grad(x) - num) <= 1e-7 * np.linalg.norm(num)


def test_grad_lipschitz_and_optimality():
    rng = numerics.make_rng(10)
    op = fd.DenseOperator(rng.standard_normal((10, 6)), (2, 3))
    b = rng.standard_normal(10)
    f = fd.LeastSquares(op, b)
    L = f.lipschitz(numerics.make_rng(0))
    x_star = np.linalg.lstsq(op.matrix, b, rcond=None)[0].reshape(2, 3)
    assert np.linalg.norm(f.grad(x_star)) <= 1e-10
    for _ in range(100):
        x1, x2 = rng.standard_normal((2, 2, 3))
        assert np.linalg.norm(f.grad(x1) - f.grad(x2)) <= L * np.linalg.norm(x1 - x2) * (1 + 1e-9)
        assert f.value(x1) >= f.value(x_star) - 1e-12


def test_batched_least_squares():
    rng = numerics.make_rng(11)
    op = fd.DenseOperator.orthonormal_gaussian(0.5, (4, 4), rng)
    x = rng.random((3, 4, 4))
    b = rng.random((3, op.n_measurements))
    f = fd.LeastSquares(op, b)
    for i in range(3):
        fi = fd.LeastSquares(op, b[i])
        assert f.value(x)[i] == pytest.approx(fi.value(x[i]))
        np.testing.assert_allclose(f.grad(x)[i], fi.grad(x[i]))


def test_shape_errors():
    op = fd.DenseOperator(np.ones((3, 6)), (2, 3))
    with pytest.raises(InvalidArgument):
        op.apply(np.ones((3, 2)))
    with pytest.raises(InvalidArgument):
        op.adjoint(np.ones(4))
    with pytest.raises(InvalidArgument):
        fd.LeastSquares(op, np.ones(5))
    with pytest.raises(InvalidArgument):
        fd.DenseOperator(np.ones((3, 5)), (2, 3))
    with pytest.raises(InvalidArgument):
        fd.MaskedDftOperator(np.full((2, 2), 0.5))


def test_radial_mask_ratio_range():
    with pytest.raises(InvalidArgument):
        fd.make_radial_mask((8, 8), 1.0, numerics.make_rng(0))
    with pytest.raises(InvalidArgument):
        fd.make_radial_mask((8, 8), 0.0, numerics.make_rng(0))
    mask, achieved = fd.make_radial_mask((16, 16), 0.999, numerics.make_rng(0))
    assert achieved >= 0.999 and mask.mean() == achieved


def test_radial_mask_achieved_ratio_190():
    for seed in range(100):
        ratio = [0.1, 0.2, 0.3][seed % 3]
        mask, achieved = fd.make_radial_mask((190, 190), ratio, numerics.make_rng(seed))
        assert ratio <= achieved <= ratio + 2 / 190
        assert mask[95, 95] and mask[95].all()  # DC sample and the horizontal DC line


def test_radial_mask_point_symmetric():
    for shape in [(15, 15), (21, 17)]:
        mask, _ = fd.make_radial_mask(shape, 0.3, numerics.make_rng(1))
        assert np.array_equal(mask, mask[::-1, ::-1])


def test_operator_serialization(tmp_path):
    rng = numerics.make_rng(12)
    dense = fd.DenseOperator.orthonormal_gaussian(0.3, (5, 5), rng)
    dense.save(tmp_path / "A")
    again = fd.DenseOperator.load(tmp_path / "A")
    assert np.array_equal(again.matrix, dense.matrix) and again.image_shape == (5, 5)
    mask, _ = fd.make_radial_mask((9, 9), 0.3, rng)
    fd.MaskedDftOperator(mask).save(tmp_path / "P")
    assert np.array_equal(fd.MaskedDftOperator.load(tmp_path / "P").mask, mask)
    with pytest.raises(InvalidData):
        fd.DenseOperator.load(tmp_path / "P")
