import numpy as np
import pytest

from funhsi.cassi import (
    DispersionSpec,
    adjoint,
    disperse,
    forward,
    integrate,
    modulate,
    shift_back,
)
from funhsi.tensor import ShapeError


def worked_cube():
    # 1x2x2 cube: band0 row is (1,3), band1 row is (2,4), mask (1, 0.5)
    x = np.zeros((1, 2, 2))
    x[0, :, 0] = [1.0, 3.0]
    x[0, :, 1] = [2.0, 4.0]
    m = np.array([[1.0, 0.5]])
    return x, m


def test_modulate_identity_and_zero():
    rng = np.random.default_rng(0)
    x = rng.random((4, 5, 3))
    assert np.array_equal(modulate(x, np.ones((4, 5))), x)
    assert np.all(modulate(x, np.zeros((4, 5))) == 0.0)


def test_modulate_worked_example():
    x, m = worked_cube()
    xp = modulate(x, m)
    assert np.array_equal(xp[0, :, 0], [1.0, 1.5])
    assert np.array_equal(xp[0, :, 1], [2.0, 2.0])


def test_modulate_shape_mismatch():
    with pytest.raises(ShapeError):
        modulate(np.zeros((4, 5, 3)), np.zeros((4, 4)))


def test_disperse_step_zero_is_copy():
    rng = np.random.default_rng(1)
    x = rng.random((3, 4, 2))
    assert np.array_equal(disperse(x, DispersionSpec(step=0)), x)


def test_disperse_single_band():
    rng = np.random.default_rng(2)
    x = rng.random((3, 4, 1))
    assert np.array_equal(disperse(x, DispersionSpec(step=1)), x)


def test_disperse_worked_example():
    x, m = worked_cube()
    xpp = disperse(modulate(x, m), DispersionSpec(step=1))
    assert xpp.shape == (1, 3, 2)
    assert np.array_equal(xpp[0, :, 0], [1.0, 1.5, 0.0])
    assert np.array_equal(xpp[0, :, 1], [0.0, 2.0, 2.0])


def test_integrate_worked_example():
    x, m = worked_cube()
    y = forward(x, m, DispersionSpec(step=1), sigma=0.0)
    assert np.array_equal(y.values, [[1.0, 3.5, 2.0]])


def test_integrate_zero_cube():
    y = integrate(np.zeros((3, 4, 2)), sigma=0.0)
    assert np.all(y.values == 0.0)


def test_integrate_noise_mean():
    # E[Y] over many seeds approaches the noiseless measurement
    x = np.full((2, 2, 3), 0.5)
    sigma, n = 0.2, 400
    clean = integrate(x, sigma=0.0).values
    acc = np.zeros_like(clean)
    for seed in range(n):
        acc += integrate(x, sigma=sigma, seed=seed).values
    err = np.abs(acc / n - clean)
    assert np.all(err < 3.0 * sigma / np.sqrt(n))


def test_forward_linearity():
    rng = np.random.default_rng(3)
    x1 = rng.random((8, 8, 4))
    x2 = rng.random((8, 8, 4))
    m = rng.random((8, 8))
    d = DispersionSpec(step=1)
    a, b = 0.37, -1.21
    lhs = forward(a * x1 + b * x2, m, d).values
    rhs = a * forward(x1, m, d).values + b * forward(x2, m, d).values
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_energy_accounting():
    rng = np.random.default_rng(4)
    x = rng.random((6, 7, 5))
    y = forward(x, np.ones((6, 7)), DispersionSpec(step=1))
    assert abs(y.values.sum() - x.sum()) < 1e-10


def test_shift_back_worked_example():
    h = shift_back(np.array([[1.0, 3.5, 2.0]]), DispersionSpec(step=1), n_bands=2)
    assert h.shape == (1, 2, 2)
    assert np.array_equal(h[0, :, 0], [1.0, 3.5])
    assert np.array_equal(h[0, :, 1], [3.5, 2.0])


def test_shift_back_single_band_copy():
    rng = np.random.default_rng(5)
    y = rng.random((3, 4))
    h = shift_back(y, DispersionSpec(step=0), n_bands=1)
    assert np.array_equal(h[:, :, 0], y)


def test_shift_back_overflow():
    with pytest.raises(ShapeError):
        shift_back(np.zeros((2, 3)), DispersionSpec(step=2), n_bands=3)


def test_trivial_roundtrip():
    # identity mask, single band, no noise: shift_back inverts the chain
    rng = np.random.default_rng(6)
    x = rng.random((5, 6, 1))
    d = DispersionSpec(step=1)
    y = forward(x, np.ones((5, 6)), d)
    assert np.array_equal(shift_back(y, d, n_bands=1), x)


def test_per_band_restoration():
    # a cube holding only band n survives the chain into band n of shift_back
    rng = np.random.default_rng(7)
    x = rng.random((5, 6, 4))
    m = np.ones((5, 6))
    d = DispersionSpec(step=1)
    for n in range(4):
        solo = np.zeros_like(x)
        solo[:, :, n] = x[:, :, n]
        h = shift_back(forward(solo, m, d), d, n_bands=4)
        assert np.array_equal(h[:, :, n], x[:, :, n])


def test_adjoint_identity():
    rng = np.random.default_rng(8)
    d = DispersionSpec(step=1)
    for trial in range(5):
        x = rng.random((8, 8, 4))
        m = rng.random((8, 8))
        y = rng.random((8, 8 + 3))
        lhs = float(np.sum(forward(x, m, d).values * y))
        rhs = float(np.sum(x * adjoint(y, m, d, n_bands=4)))
        assert abs(lhs - rhs) < 1e-10


def test_adjoint_degenerate_masks():
    rng = np.random.default_rng(9)
    y = rng.random((4, 6))
    d = DispersionSpec(step=1)
    ones = adjoint(y, np.ones((4, 4)), d, n_bands=3)
    assert np.array_equal(ones, shift_back(y, d, n_bands=3))
    zeros = adjoint(y, np.zeros((4, 4)), d, n_bands=3)
    assert np.all(zeros == 0.0)
