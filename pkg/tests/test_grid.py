import numpy as np
import pytest
from scipy import integrate

from core.errors import InfeasibleGridError, InvalidGridError
from core.grid import (
    BasisFamily,
    BoundaryCondition,
    NucleusList,
    PiecewisePolynomial,
    build_centered_tensor_grid,
    build_uniform_grid,
    hat_factor,
    indicator_factor,
    mod_offset,
    wrap_signed,
)


def test_mod_offset_wraps_negative_differences():
    assert mod_offset(1, 3, 5) == 3
    assert mod_offset(4, 4, 5) == 0
    assert mod_offset(-7, 0, 4) == 1
    with pytest.raises(InvalidGridError):
        mod_offset(0, 0, 0)


def test_wrap_signed_minimum_image():
    assert wrap_signed(7, 8) == -1
    assert wrap_signed(3, 8) == 3
    assert wrap_signed(4, 8) == -4
    np.testing.assert_array_equal(wrap_signed(np.arange(5), 5), [0, 1, 2, -2, -1])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_i=4, n_j=4, n_k=4, h=0.0),
        dict(n_i=4, n_j=4, n_k=4, h=-1.0),
        dict(n_i=4, n_j=4, n_k=4, h=1.0, p=2),
        dict(n_i=2, n_j=4, n_k=4, h=1.0, p=1),
        dict(n_i=0, n_j=4, n_k=4, h=1.0),
    ],
)
def test_invalid_grids_are_rejected(kwargs):
    with pytest.raises(InvalidGridError):
        build_uniform_grid(**kwargs)


def test_grid_geometry():
    grid = build_uniform_grid(4, 6, 8, 0.5, 1, "periodic")
    assert grid.dims == (4, 6, 8)
    assert grid.N == 192
    assert grid.box_lengths == (2.0, 3.0, 4.0)
    assert grid.periodic
    assert grid.nearest_index((1.9, -0.5, 0.26)) == (0, 5, 1)
    assert grid.flat_index((1, 2, 3)) == 1 * 48 + 2 * 8 + 3
    assert grid.describe()["boundary"] == "periodic"
    assert not build_uniform_grid(3, 3, 3, 1.0, boundary=BoundaryCondition.ZERO).periodic


def test_hat_products_and_integrals():
    hat = hat_factor()
    assert hat.integral() == pytest.approx(1.0, abs=1e-15)
    assert (hat * hat).integral() == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert (hat * hat.shifted(1.0)).integral() == pytest.approx(1.0 / 6.0, abs=1e-15)
    assert (hat * hat.shifted(2.0)).is_zero()
    slope = hat.derivative()
    assert (slope * slope).integral() == pytest.approx(2.0, abs=1e-14)
    assert (slope * slope.shifted(1.0)).integral() == pytest.approx(-1.0, abs=1e-14)


def test_indicator_is_orthonormal_under_integer_shifts():
    ind = indicator_factor()
    assert (ind * ind).integral() == pytest.approx(1.0)
    assert (ind * ind.shifted(1.0)).is_zero()


def test_polynomial_moments_match_quadrature():
    f = PiecewisePolynomial([-1.0, 0.2, 1.5], [[1.0, 2.0, -0.5], [0.3, 0.0, 1.0]])
    for power in range(4):
        expected, _ = integrate.quad(lambda x: (x - 0.25) ** power * f(np.array([x]))[0], -1.0, 1.5, points=[0.2])
        assert f.moment(power, about=0.25) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_restriction_and_symmetry():
    hat = hat_factor()
    assert hat.is_symmetric()
    right = hat.restricted(0.0, 5.0)
    assert right.support == (0.0, 1.0)
    assert right.integral() == pytest.approx(0.5)
    assert not right.is_symmetric()
    shifted = hat.shifted(0.75)
    assert shifted.center == pytest.approx(0.75)
    assert shifted(np.array([0.75]))[0] == pytest.approx(1.0)


@pytest.mark.parametrize("degree", [0, 1])
def test_basis_is_translation_closed(degree, rng):
    grid = build_uniform_grid(6, 6, 6, 0.7, degree)
    basis = BasisFamily(degree)
    points = rng.uniform(-1.5, 1.5, size=(50, 3))
    for index in [(1, 0, 0), (2, 3, 1), (0, 5, 4)]:
        moved = points + grid.position(index)
        np.testing.assert_allclose(basis.evaluate(grid, index, moved), basis.evaluate(grid, (0, 0, 0), points), atol=1e-12)


def test_basis_is_normalized():
    grid = build_uniform_grid(4, 4, 4, 0.5, 0)
    basis = BasisFamily(0)
    value = basis.evaluate(grid, (0, 0, 0), np.zeros((1, 3)))[0]
    # indicator of a cell of volume h^3, squared, integrates to one
    assert value ** 2 * grid.h ** 3 == pytest.approx(1.0)
    assert basis.descriptor() == "degree=0;mode=general"
    with pytest.raises(InvalidGridError):
        BasisFamily(3)


def test_nucleus_list_validation():
    grid = build_uniform_grid(4, 4, 4, 1.0)
    nuclei = NucleusList.from_entries([(1, (0, 0, 0)), (8, (3, 2, 1))])
    assert len(nuclei) == 2
    nuclei.validate(grid)
    with pytest.raises(InvalidGridError):
        NucleusList.from_entries([(0.0, (0, 0, 0))])
    with pytest.raises(InvalidGridError):
        NucleusList.from_entries([(1.0, (4, 0, 0))]).validate(grid)


def test_centered_tensor_grid_puts_nuclei_at_cell_centers():
    coords = [(0.0, 0.0, 0.0), (1.4, 0.3, 0.0), (2.9, -0.6, 0.0)]
    h = 0.5
    grid = build_centered_tensor_grid(coords, h, padding_cells=3)
    for axis in range(3):
        widths = grid.widths(axis)
        assert np.all(widths >= h / 2 - 1e-12)
        assert np.all(widths <= 2 * h + 1e-12)
        centers = grid.centers(axis)
        for s, point in enumerate(coords):
            assert centers[grid.cell_of(s)[axis]] == pytest.approx(point[axis], abs=1e-12)
    assert all(c >= 7 for c in grid.counts)


def test_centered_tensor_grid_rejects_close_nuclei():
    with pytest.raises(InfeasibleGridError) as info:
        build_centered_tensor_grid([(0.0, 0.0, 0.0), (0.1, 1.0, 1.0)], 0.5)
    assert info.value.axis == 0
