import numpy as np
import pytest

from core.errors import DimensionMismatchError, InvalidGridError, SingularSpectrumError
from core.grid import BasisFamily, BoundaryCondition, NucleusList, build_uniform_grid
from core.integral_engine import build_stencils
from core.structured_matrix import (
    BandOperator,
    BlockCirculant,
    ShiftPermutation,
    ThreeLevelCirculant,
    apply_B,
    apply_H,
    apply_H_adjoint,
    circulant_apply_function,
    dense_band,
    measure_band_crossover,
    shift_view,
)

from tests.conftest import dense_of


def symmetric_generator(dims, rng):
    g = rng.standard_normal(dims)
    return 0.5 * (g + np.roll(np.flip(g, axis=(0, 1, 2)), 1, axis=(0, 1, 2)))


@pytest.mark.parametrize("dims", [(4, 4, 4), (3, 5, 2), (8, 8, 8)])
def test_circulant_matvec_matches_dense(dims, rng):
    C = ThreeLevelCirculant(dims, rng.standard_normal(dims))
    v = rng.standard_normal(C.N)
    np.testing.assert_allclose(C.matvec(v), C.dense() @ v, atol=1e-11)
    batch = rng.standard_normal((C.N, 3))
    np.testing.assert_allclose(C.matvec(batch), C.dense() @ batch, atol=1e-11)
    gridded = v.reshape(dims)
    np.testing.assert_allclose(C.matvec(gridded).reshape(-1), C.dense() @ v, atol=1e-11)


def test_symmetric_circulant_has_real_spectrum(rng):
    dims = (4, 6, 4)
    C = ThreeLevelCirculant(dims, symmetric_generator(dims, rng))
    assert C.is_real_symmetric
    dense = C.dense()
    np.testing.assert_allclose(dense, dense.T, atol=1e-14)
    np.testing.assert_allclose(np.sort(C.eigenvalues().ravel()), np.linalg.eigvalsh(dense), atol=1e-10)
    assert not ThreeLevelCirculant(dims, rng.standard_normal(dims)).is_real_symmetric


def test_circulant_functions(rng):
    dims = (4, 4, 4)
    g = symmetric_generator(dims, rng)
    g[0, 0, 0] += 100.0  # positive definite
    C = ThreeLevelCirculant(dims, g)
    v = rng.standard_normal(C.N)
    np.testing.assert_allclose(C.apply_function(lambda lam: 1.0 / lam, C.matvec(v)), v, atol=1e-12)
    root = C.function(np.sqrt)
    np.testing.assert_allclose(root.matvec(root.matvec(v)), C.matvec(v), atol=1e-10)


def test_singular_spectrum_is_reported():
    grid = build_uniform_grid(4, 4, 4, 1.0, 0)
    _, A = build_stencils(grid, BasisFamily(0))
    laplacian = ThreeLevelCirculant.from_stencil(A, grid.dims)
    with pytest.raises(SingularSpectrumError) as info:
        circulant_apply_function(laplacian, lambda lam: 1.0 / lam, np.ones(grid.N))
    assert info.value.index == 0


def test_circulant_rejects_wrong_shapes(rng):
    with pytest.raises(DimensionMismatchError):
        ThreeLevelCirculant((4, 4, 4), rng.standard_normal((4, 4, 3)))
    C = ThreeLevelCirculant((4, 4, 4), rng.standard_normal((4, 4, 4)))
    with pytest.raises(DimensionMismatchError):
        C.matvec(np.ones(60))


@pytest.mark.parametrize("degree", [0, 1])
def test_band_operator_paths_agree(degree, rng):
    grid = build_uniform_grid(4, 5, 3, 1.0, degree)
    S, A = build_stencils(grid, BasisFamily(degree))
    for stencil in (S, A):
        op = BandOperator.from_stencil(stencil, grid.dims)
        v = rng.standard_normal(grid.N)
        expected = dense_band(stencil.entries, grid.dims) @ v
        np.testing.assert_allclose(op.apply(v, "direct"), expected, atol=1e-12)
        np.testing.assert_allclose(op.apply(v, "circulant"), expected, atol=1e-12)
        np.testing.assert_allclose(op.apply(v), expected, atol=1e-12)


def test_band_operator_zero_boundary(rng):
    dims = (4, 4, 4)
    _, A = build_stencils(build_uniform_grid(*dims, 1.0, 0), BasisFamily(0))
    op = BandOperator.from_stencil(A, dims, BoundaryCondition.ZERO)
    assert op.preferred_method() == "direct"
    v = rng.standard_normal(64)
    np.testing.assert_allclose(op.apply(v), dense_band(A.entries, dims, BoundaryCondition.ZERO) @ v, atol=1e-12)
    with pytest.raises(InvalidGridError):
        op.via_circulant(v)
    with pytest.raises(ValueError):
        op.apply(v, "sparse")


def test_band_operator_crossover_override(rng):
    dims = (4, 4, 4)
    _, A = build_stencils(build_uniform_grid(*dims, 1.0, 0), BasisFamily(0))
    assert BandOperator.from_stencil(A, dims, crossover=1e6).preferred_method() == "direct"
    assert BandOperator.from_stencil(A, dims, crossover=1e-6).preferred_method() == "circulant"


def test_band_crossover_is_measured_once_per_grid():
    dims = (6, 6, 6)
    _, A = build_stencils(build_uniform_grid(*dims, 1.0, 0), BasisFamily(0))
    op = BandOperator.from_stencil(A, dims)
    assert op.crossover is None
    assert op.preferred_method() in ("direct", "circulant")
    assert op.crossover > 0.0
    assert measure_band_crossover(dims) == op.crossover


def test_shift_view_and_permutations(rng):
    grid = rng.standard_normal((3, 4, 5))
    view = shift_view(grid, (1, -1, 2))
    assert view[0, 1, 0] == grid[1, 0, 2]
    assert view[2, 0, 4] == grid[0, 3, 1]
    zero = shift_view(grid, (1, 0, 0), BoundaryCondition.ZERO)
    assert np.all(zero[2] == 0.0)
    np.testing.assert_array_equal(zero[:2], grid[1:])

    dims = (3, 4, 5)
    P = ShiftPermutation(dims, (1, 2, 3))
    Q = ShiftPermutation(dims, (2, 3, 4))
    v = rng.standard_normal(60)
    np.testing.assert_array_equal(P.inverse().apply(P.apply(v)), v)
    np.testing.assert_array_equal(P.compose(Q).apply(v), P.apply(Q.apply(v)))
    dense_P = dense_of(P.apply, 60)
    np.testing.assert_array_equal(dense_of(P.transpose_apply, 60), dense_P.T)


def test_nuclear_term_matches_dense(helium_p0, rng):
    system = helium_p0
    nuclei = NucleusList.from_entries([(2.0, (1, 2, 3)), (1.0, (0, 0, 1))])
    W = system.nuclear.dense()
    N = system.N
    dense_B = np.zeros((N, N))
    for charge, index in zip(nuclei.charges, nuclei.indices):
        P = dense_of(ShiftPermutation(system.grid.dims, index).apply, N)
        dense_B += charge * P @ W @ P.T
    v = rng.standard_normal(N)
    np.testing.assert_allclose(apply_B(nuclei, system.nuclear, v), dense_B @ v, atol=1e-12)


@pytest.mark.parametrize("p", [0, 1])
def test_pair_products_are_symmetric_and_adjoint(p, rng):
    dims = (3, 4, 3)
    c, x = rng.standard_normal(dims), rng.standard_normal(dims)
    Hx = apply_H(c, x, p, dims)
    assert Hx.shape == ((1 if p == 0 else 27),) + dims
    np.testing.assert_allclose(Hx, apply_H(x, c, p, dims), atol=1e-14)
    y = rng.standard_normal(Hx.shape)
    lhs = np.sum(Hx * y)
    rhs = np.sum(x * apply_H_adjoint(c, y, p, dims))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-10)


def test_hat_pair_products_sum_to_nodal_product(rng):
    """Summing all hat pair types over cells counts each node pair once per shared cell"""
    dims = (3, 3, 3)
    c = rng.standard_normal(dims)
    ones = np.ones(dims)
    total = apply_H(c, ones, 1, dims).sum()
    # every node belongs to 8 cells and pairs with 8 corners in each
    assert total == pytest.approx(64.0 * c.sum(), rel=1e-12, abs=1e-10)


def test_block_circulant_matches_dense(rng):
    dims = (3, 3, 2)
    T = 2
    gens = rng.standard_normal((T, T) + dims)
    B = BlockCirculant(dims, gens)
    x = rng.standard_normal((T,) + dims)
    y = B.matvec(x)
    N = int(np.prod(dims))
    for a in range(T):
        expected = sum(ThreeLevelCirculant(dims, gens[a, b]).dense() @ x[b].reshape(N) for b in range(T))
        np.testing.assert_allclose(y[a].reshape(N), expected, atol=1e-12)
    with pytest.raises(DimensionMismatchError):
        B.matvec(rng.standard_normal((3,) + dims))
