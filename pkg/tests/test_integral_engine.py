import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import roots_legendre

from core.dynamic_config_manager import DynamicConfigManager
from core.errors import (
    DegenerateBoxWarning,
    FarFieldPreconditionError,
    SupportMismatchError,
    UnachievableAccuracyError,
    UnsupportedBasisError,
)
from core.grid import BasisFamily, build_uniform_grid, hat_factor, indicator_factor
from core.integral_engine import (
    Algorithm,
    FarFieldMoments,
    IntegralEngine,
    NearFieldCache,
    SeparableFactor,
    StencilKind,
    box_coulomb_integral,
    build_density_coulomb_table,
    build_four_center_table,
    build_nuclear_W,
    build_stencils,
    cell_product_factors,
    correlate_factors,
    cubature_rule,
    far_field_integral,
    inverse_distance_derivatives,
    monomial_coulomb_antiderivative,
    near_field_integral,
    reduce_double_to_single,
    select_method,
)

from tests.conftest import BASE_CONFIG

# int over [0,1]^3 of 1/|r|
UNIT_CUBE_CORNER = 1.5 * math.log(2.0 + math.sqrt(3.0)) - math.pi / 4.0
# int over [0,1]^3 x [0,1]^3 of 1/|x - y|
UNIT_CUBE_SELF = (
    0.4 * (1.0 + math.sqrt(2.0) - 2.0 * math.sqrt(3.0))
    - 2.0 * math.pi / 3.0
    + 2.0 * math.log(1.0 + math.sqrt(2.0))
    + 4.0 * math.log((1.0 + math.sqrt(3.0)) / math.sqrt(2.0))
)
CONSTANT = np.zeros((2, 2, 2))
CONSTANT[0, 0, 0] = 1.0


def gauss_oracle(factors, R, points=24):
    """Tensor Gauss-Legendre over every cell of the factor breaks; R must stay off the support"""
    x, w = roots_legendre(points)
    axes = []
    for f in factors:
        lo, hi = f.breaks[:-1], f.breaks[1:]
        xs = (0.5 * (hi - lo)[:, None] * x + 0.5 * (hi + lo)[:, None]).ravel()
        ws = (0.5 * (hi - lo)[:, None] * w).ravel()
        axes.append((xs, ws * f(xs)))
    X, Y, Z = np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij")
    kernel = 1.0 / np.sqrt((X - R[0]) ** 2 + (Y - R[1]) ** 2 + (Z - R[2]) ** 2)
    return float(np.einsum("i,j,k,ijk->", axes[0][1], axes[1][1], axes[2][1], kernel))


def integrand_pool(degree):
    """One-dimensional factors the tables feed the engine: basis products and cell-piece correlations"""
    basis = BasisFamily(degree)
    f = basis.factor
    pool = [f * f.shifted(d) for d in range(-basis.p, basis.p + 1)]
    pieces, _ = cell_product_factors(degree)
    pool += [correlate_factors(a, b) for a in pieces for b in pieces]
    return pool


def test_unit_cube_corner_integral_is_exact():
    value = box_coulomb_integral(((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), CONSTANT, (0.0, 0.0, 0.0))
    assert value == pytest.approx(UNIT_CUBE_CORNER, rel=1e-13)
    assert UNIT_CUBE_CORNER == pytest.approx(1.1900386, abs=1e-7)


def test_centered_cube_splits_into_eight_corners():
    a = 0.5
    value = box_coulomb_integral(((-a, a),) * 3, CONSTANT, (0.0, 0.0, 0.0))
    assert value == pytest.approx(8.0 * a * a * UNIT_CUBE_CORNER, rel=1e-13)


def test_box_integral_matches_quadrature_for_trilinear_polynomial():
    poly = np.zeros((2, 2, 2))
    poly[0, 0, 0], poly[1, 0, 0], poly[0, 1, 1], poly[1, 1, 1] = 1.0, -0.5, 2.0, 0.75
    box = ((0.0, 1.0), (-0.5, 0.5), (0.2, 1.0))
    R = np.array([2.5, 0.3, -1.0])

    def integrand(z, y, x):
        value = poly[0, 0, 0] + poly[1, 0, 0] * x + poly[0, 1, 1] * y * z + poly[1, 1, 1] * x * y * z
        return value / math.sqrt((x - R[0]) ** 2 + (y - R[1]) ** 2 + (z - R[2]) ** 2)

    expected, _ = integrate.tplquad(integrand, *box[0], *box[1], *box[2], epsabs=1e-12, epsrel=1e-12)
    assert box_coulomb_integral(box, poly, R) == pytest.approx(expected, rel=1e-9)


def test_degenerate_box_warns_and_returns_zero():
    with pytest.warns(DegenerateBoxWarning):
        assert box_coulomb_integral(((0.0, 0.0), (0.0, 1.0), (0.0, 1.0)), CONSTANT, (0.3, 0.3, 0.3)) == 0.0


def test_antiderivative_is_finite_on_singular_loci():
    for point in [(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), (0.0, -2.0, 3.0)]:
        for n in [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)]:
            assert math.isfinite(monomial_coulomb_antiderivative(*n, point))
    with pytest.raises(UnsupportedBasisError):
        monomial_coulomb_antiderivative(2, 0, 0, (1.0, 1.0, 1.0))


def test_correlation_of_indicators_is_the_hat():
    g = correlate_factors(indicator_factor(), indicator_factor())
    u = np.linspace(-1.2, 1.2, 25)
    np.testing.assert_allclose(g(u), hat_factor()(u), atol=1e-13)


def test_correlation_of_hats_matches_quadrature():
    hat = hat_factor()
    g = correlate_factors(hat, hat)
    for u in [-1.7, -0.4, 0.0, 0.25, 1.3]:
        expected, _ = integrate.quad(lambda y: hat(np.array([y + u]))[0] * hat(np.array([y]))[0], -1.0, 1.0, points=[t for t in (0.0, -u, 1.0 - u, -1.0 - u) if -1.0 < t < 1.0] or None)
        assert g(np.array([u]))[0] == pytest.approx(expected, abs=1e-12)


def test_double_to_single_requires_matching_supports():
    ind, hat = indicator_factor(), hat_factor()
    z, box = reduce_double_to_single(SeparableFactor((ind, ind, ind)), SeparableFactor((ind, ind, ind)))
    assert box == ((-1.0, 1.0),) * 3
    assert z.mass() == pytest.approx(1.0)
    with pytest.raises(SupportMismatchError) as info:
        reduce_double_to_single(SeparableFactor((ind, ind, ind)), SeparableFactor((ind, hat, ind)))
    assert info.value.axis == 1


def test_near_field_is_exact_for_trilinear_integrands():
    g = correlate_factors(indicator_factor(), indicator_factor())
    s = SeparableFactor((g, g, g))
    cache = NearFieldCache()
    for R in [(0.0, 0.0, 0.0), (0.3, -0.2, 0.7), (1.5, 0.0, 0.4)]:
        coarse = near_field_integral(s, R, 2, cache)
        fine = near_field_integral(s, R, 8, cache)
        assert coarse == pytest.approx(fine, rel=1e-12)
    near_field_integral(s, (0.3, -0.2, 0.7), 2, cache)
    assert cache.hits >= 1


@pytest.mark.parametrize(
    "R",
    [
        (0.3, 0.1, 0.5),     # inside
        (1.0, 0.0, 0.6),     # on a face
        (0.0, -0.5, 0.2),    # on a corner
        (0.5, 0.5, 1.0),     # on an edge
        (1.05, 0.0, 0.5),    # just outside
        (2.5, 0.3, -1.0),
    ],
)
def test_cubature_matches_closed_form_for_trilinear_polynomials(R):
    poly = np.zeros((2, 2, 2))
    poly[0, 0, 0], poly[1, 0, 0], poly[0, 1, 1], poly[1, 1, 1] = 1.0, -0.5, 2.0, 0.75
    box = ((0.0, 1.0), (-0.5, 0.5), (0.2, 1.0))
    points, weights = cubature_rule(tuple(np.array(b) for b in box), R)
    x, y, z = points.T
    values = poly[0, 0, 0] + poly[1, 0, 0] * x + poly[0, 1, 1] * y * z + poly[1, 1, 1] * x * y * z
    assert float(weights @ values) == pytest.approx(box_coulomb_integral(box, poly, R), rel=1e-11)


def test_hat_near_field_is_converged_at_the_singularity():
    hat = hat_factor()
    s = SeparableFactor((hat * hat, hat * hat.shifted(1), hat * hat))
    cache = NearFieldCache()
    for R in [(0.0, 0.0, 0.0), (0.5, 0.25, 0.0), (-1.0, 1.0, 0.3)]:
        base = near_field_integral(s, R, 1, cache, order=14)
        assert near_field_integral(s, R, 1, cache, order=20) == pytest.approx(base, rel=1e-12)
        assert near_field_integral(s, R, 3, cache, order=14) == pytest.approx(base, rel=1e-12)
    assert cache.misses == 9
    near_field_integral(s, (0.0, 0.0, 0.0), 1, cache, order=14)
    assert cache.hits == 1


def test_cubature_cache_respects_byte_budget():
    hat = hat_factor()
    s = SeparableFactor((hat * hat,) * 3)
    cache = NearFieldCache(max_bytes=3 * 2 ** 20)
    for x in np.linspace(0.0, 1.0, 6):
        near_field_integral(s, (x, 0.0, 0.0), 1, cache)
    assert 0 < len(cache) < 6
    assert cache.nbytes <= cache.max_bytes
    cache.clear()
    assert len(cache) == 0 and cache.nbytes == 0


@pytest.mark.parametrize("degree", [0, 1])
def test_shipped_calibration_meets_default_accuracy(degree):
    cm = DynamicConfigManager(BASE_CONFIG)
    eta = cm.default_eta(degree)
    engine = IntegralEngine(BasisFamily(degree), eta, calibration=cm.calibration_table())
    assert engine.calibration.floor < eta
    assert engine.calibration.trilinear == (degree == 0)
    assert engine.select(np.zeros(3)).algorithm == Algorithm.NEAR_FIELD


def test_cube_self_interaction_closed_form():
    assert UNIT_CUBE_SELF == pytest.approx(1.88231264, abs=1e-8)
    engine = IntegralEngine(BasisFamily(0), 1e-10)
    assert engine.integrate(engine.template(), np.zeros(3)) == pytest.approx(UNIT_CUBE_SELF, rel=1e-12)
    table = build_density_coulomb_table((4, 4, 4), BasisFamily(0), 1e-10, engine=engine)
    assert table.lookup(0, 0, (0, 0, 0)) == pytest.approx(UNIT_CUBE_SELF, rel=1e-10)
    four = build_four_center_table(build_uniform_grid(4, 4, 4, 1.0, 0), BasisFamily(0), 1e-10, engine=engine)
    assert four.lookup(0, 0, (0, 0, 0)) == pytest.approx(UNIT_CUBE_SELF, rel=1e-10)


@pytest.mark.parametrize("degree", [0, 1])
def test_engine_matches_gauss_oracle_on_random_centers(degree):
    rng = np.random.default_rng(1009 + degree)
    pool = integrand_pool(degree)
    engine = IntegralEngine(BasisFamily(degree), 1e-10)
    checked = 0
    while checked < 100:
        s = SeparableFactor(tuple(pool[i] for i in rng.integers(len(pool), size=3)))
        R = rng.uniform(-10.0, 10.0, size=3)
        if np.linalg.norm(R) > 10.0:
            continue
        lo, hi = np.array(s.box).T
        if np.linalg.norm(np.maximum(np.maximum(lo - R, R - hi), 0.0)) < 0.5:
            continue
        assert engine.integrate(s, R) == pytest.approx(gauss_oracle(s.factors, R), abs=1e-8)
        checked += 1
    assert engine.stats["near"] > 0


@pytest.mark.parametrize("degree", [0, 1])
def test_separated_cells_match_six_dimensional_quadrature(degree):
    pieces, _ = cell_product_factors(degree)
    n_axis = len(pieces)
    grid = build_uniform_grid(5, 3, 3, 1.0, degree)
    table = build_four_center_table(grid, BasisFamily(degree), 1e-10)
    x, w = roots_legendre(8)
    x, w = 0.5 * x, 0.5 * w
    d = np.array([2.0, 0.0, 0.0])
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    kernel = 1.0 / np.linalg.norm(X[:, None, :] - X[None, :, :] - d, axis=-1)
    pairs = [(0, 0)] if degree == 0 else [(0, 0), (13, 26), (5, 21), (26, 0)]
    for a, b in pairs:
        ta, tb = np.unravel_index(a, (n_axis,) * 3), np.unravel_index(b, (n_axis,) * 3)
        Pa = np.prod([pieces[t](X[:, ax]) for ax, t in enumerate(ta)], axis=0) * W
        Pb = np.prod([pieces[t](X[:, ax]) for ax, t in enumerate(tb)], axis=0) * W
        assert table.lookup(a, b, (2, 0, 0)) == pytest.approx(float(Pa @ kernel @ Pb), rel=1e-9)


def test_first_order_far_field_is_a_point_charge():
    hat = hat_factor()
    s = SeparableFactor((hat * hat.shifted(1), hat * hat, hat))
    moments = FarFieldMoments.of(s)
    R = np.array([30.0, -12.0, 7.0])
    assert far_field_integral(moments, R, 1) == pytest.approx(s.mass() / np.linalg.norm(R - s.center), rel=1e-14)


@pytest.mark.slow
def test_hat_product_at_its_peak_matches_adaptive_quadrature():
    hat = hat_factor()
    s = SeparableFactor((hat * hat,) * 3)

    def octant(z, y, x):
        return ((1.0 - x) * (1.0 - y) * (1.0 - z)) ** 2 / math.sqrt(x * x + y * y + z * z)

    expected, _ = integrate.tplquad(octant, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, epsabs=1e-12, epsrel=1e-11)
    assert near_field_integral(s, (0.0, 0.0, 0.0), 1) == pytest.approx(8.0 * expected, rel=1e-8)


def test_inverse_distance_derivatives_match_finite_differences():
    v = np.array([1.3, -0.4, 0.9])
    delta = 1e-5
    for order in (1, 2, 3, 4):
        D = inverse_distance_derivatives(v, order)[order]
        for j in range(3):
            step = np.zeros(3)
            step[j] = delta
            lower = inverse_distance_derivatives(v + step, order - 1)[order - 1]
            upper = inverse_distance_derivatives(v - step, order - 1)[order - 1]
            numeric = (lower - upper) / (2 * delta)
            np.testing.assert_allclose(np.take(D, j, axis=-1), numeric, atol=1e-7)
    with pytest.raises(ValueError):
        inverse_distance_derivatives(v, 5)


@pytest.mark.parametrize("k2", [1, 3])
def test_far_field_error_decays_with_distance(k2):
    g = correlate_factors(indicator_factor(), indicator_factor())
    s = SeparableFactor((g, g, g))
    moments = FarFieldMoments.of(s)
    direction = np.array([1.0, 0.7, 0.4]) / np.linalg.norm([1.0, 0.7, 0.4])
    distances = np.array([4.0, 8.0, 16.0])
    errors = []
    for r in distances:
        exact = near_field_integral(s, r * direction, 2)
        errors.append(abs(far_field_integral(moments, r * direction, k2) - exact))
    slope = np.polyfit(np.log(distances), np.log(errors), 1)[0]
    assert slope <= -(k2 + 1)
    assert errors[-1] < 1e-5


def test_far_field_refuses_points_inside_switch_radius():
    g = correlate_factors(indicator_factor(), indicator_factor())
    moments = FarFieldMoments.of(SeparableFactor((g, g, g)))
    assert moments.all_symmetric
    with pytest.raises(FarFieldPreconditionError):
        far_field_integral(moments, (0.5, 0.0, 0.0), 3, alpha=2.0)


def test_method_selection_and_floor():
    engine = IntegralEngine(BasisFamily(0), eta=1e-10)
    table = engine.calibration
    assert table.alpha > table.radius
    near = select_method(np.zeros(3), 1e-10, table)
    assert near.algorithm == Algorithm.NEAR_FIELD
    far = select_method(np.array([10.0 * table.alpha, 0.0, 0.0]), 1e-10, table)
    assert far.algorithm == Algorithm.FAR_FIELD
    assert far.predicted_error <= 1e-10
    assert far.predicted_cost < near.predicted_cost
    with pytest.raises(ValueError):
        select_method(np.zeros(3), 0.0, table)
    with pytest.raises(UnachievableAccuracyError):
        IntegralEngine(BasisFamily(0), eta=1e-15).select(np.zeros(3))


def test_engine_routes_far_points_to_moments():
    engine = IntegralEngine(BasisFamily(0), eta=1e-8)
    s = engine.template()
    far_point = np.array([2.0 * engine.calibration.alpha, 1.0, 0.0])
    value = engine.integrate(s, far_point)
    assert engine.stats["far"] == 1
    assert value == pytest.approx(near_field_integral(s, far_point, 2), abs=2e-8)


def test_kinetic_and_overlap_stencils():
    grid1 = build_uniform_grid(4, 4, 4, 1.0, 1)
    S, A = build_stencils(grid1, BasisFamily(1))
    assert S.kind == StencilKind.OVERLAP and A.kind == StencilKind.KINETIC
    assert len(S) == 27
    assert abs(A.entries.get((1, 0, 0), 0.0)) < 1e-15
    assert S.row_sum() == pytest.approx(1.0, abs=1e-14)
    assert A.row_sum() == pytest.approx(0.0, abs=1e-13)
    assert S.is_symmetric() and A.is_symmetric()
    assert S.entries[(0, 0, 0)] == pytest.approx((2.0 / 3.0) ** 3)
    assert A.entries[(0, 0, 0)] == pytest.approx(3 * 2.0 * (2.0 / 3.0) ** 2)

    for n in (4, 6):
        S0, A0 = build_stencils(build_uniform_grid(n, n, n, 0.5, 0), BasisFamily(0))
        assert S0.entries == {(0, 0, 0): 1.0}
        assert len(A0) == 7
        assert A0.entries[(0, 0, 0)] == 6.0


def test_nuclear_table_origin_value_and_symmetry():
    grid = build_uniform_grid(4, 4, 4, 1.0, 0)
    W = build_nuclear_W(grid, BasisFamily(0), 1e-10)
    assert list(W.bands) == [(0, 0, 0)]
    assert W.bands[(0, 0, 0)][0, 0, 0] == pytest.approx(8.0 * 0.25 * UNIT_CUBE_CORNER, rel=1e-12)
    dense = W.dense()
    np.testing.assert_allclose(dense, dense.T, atol=0.0)
    assert np.all(np.diag(dense) > 0)
    assert W.bands[(0, 0, 0)][2, 0, 0] < W.bands[(0, 0, 0)][1, 0, 0]
    sparse = W.thresholded(0.6)
    assert sparse.nnz < W.nnz
    assert all(abs(v) >= 0.6 for v in sparse.entries().values())


def test_hat_nuclear_table_is_symmetric():
    grid = build_uniform_grid(3, 3, 3, 1.0, 1)
    engine = IntegralEngine(BasisFamily(1), 1e-8)
    W = build_nuclear_W(grid, BasisFamily(1), 1e-8, engine=engine)
    assert len(W.bands) == 27
    dense = W.dense()
    np.testing.assert_allclose(dense, dense.T, atol=1e-15)


def test_density_coulomb_table_properties():
    dims = (4, 4, 4)
    table = build_density_coulomb_table(dims, BasisFamily(0), 1e-10)
    assert table.n_types == 1
    assert np.all(table.values > 0)
    # self-interaction of a unit-spacing indicator density
    assert table.lookup(0, 0, (0, 0, 0)) == max(table.values.ravel())
    for d in [(1, 0, 0), (1, 2, 3), (2, 2, 0)]:
        assert table.lookup(0, 0, d) == pytest.approx(table.lookup(0, 0, [-v for v in d]), rel=1e-14)


def test_four_center_pair_swap_symmetry():
    grid = build_uniform_grid(3, 3, 3, 1.0, 1)
    engine = IntegralEngine(BasisFamily(1), 1e-8)
    table = build_four_center_table(grid, BasisFamily(1), 1e-8, engine=engine)
    assert table.n_types == 27
    assert len(table.type_map) == 64
    for a, b, d in [(0, 5, (1, 0, 0)), (13, 26, (1, 2, 0)), (4, 4, (2, 1, 1)), (3, 9, (0, 0, 0))]:
        assert table.lookup(a, b, d) == pytest.approx(table.pair_swapped(a, b, d), rel=1e-10)
    generators = table.block_generators()
    assert generators.shape == (27, 27, 3, 3, 3)
