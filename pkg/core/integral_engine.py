# core/integral_engine.py
"""
Integral engine for regular finite-element bases.

Computes, in unit-spacing coordinates:
  - overlap and kinetic stencils by exact 1-D piecewise-polynomial integration
  - nuclear attraction integrals  int s(r) / |r - R| dr
  - four-center Coulomb integrals reduced to the single-center form by
    correlating the one-dimensional factors

Single-center integrals use a near-field scheme on a subdivision of the
integrand's box (cells integrated in closed form when the integrand is
trilinear on them, by a singularity-adapted Gauss cubature otherwise) or a
truncated far-field Taylor series, switched at a calibrated radius.
The physical 1/h and 1/h^2 factors are applied by the operators, not here.
"""

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from itertools import product
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import xlogy

from core.errors import (
    DegenerateBoxWarning,
    FarFieldPreconditionError,
    SupportMismatchError,
    UnachievableAccuracyError,
    UnsupportedBasisError,
)
from core.grid import BasisFamily, GridSpec, PiecewisePolynomial, wrap_signed
from core.logging_setup import get_logger

logger = get_logger("integral_engine")

MONOMIALS: Tuple[Tuple[int, int, int], ...] = tuple(product((0, 1), repeat=3))


# ---------------------------------------------------------------------------
# Closed-form antiderivatives of x^n1 y^n2 z^n3 / R, n in {0, 1}
# ---------------------------------------------------------------------------

def _log_arg(a, R, rest2):
    """a + R evaluated without cancellation for a < 0 (rest2 = R^2 - a^2)"""
    with np.errstate(divide="ignore", invalid="ignore"):
        alt = np.where(R - a > 0, rest2 / np.where(R - a > 0, R - a, 1.0), 0.0)
    return np.where(a >= 0, a + R, alt)


def _atan_ratio(num, den):
    """arctan(num / den) with the one-sided limit +-pi/2 where den == 0"""
    safe = np.where(den != 0, den, 1.0)
    regular = np.arctan(num / safe)
    limit = np.sign(num) * (np.pi / 2.0)
    return np.where(den != 0, regular, limit)


def _F000(x, y, z, R):
    lx = _log_arg(x, R, y * y + z * z)
    ly = _log_arg(y, R, x * x + z * z)
    lz = _log_arg(z, R, x * x + y * y)
    return (
        xlogy(y * z, lx) + xlogy(x * z, ly) + xlogy(x * y, lz)
        - 0.5 * x * x * _atan_ratio(y * z, x * R)
        - 0.5 * y * y * _atan_ratio(x * z, y * R)
        - 0.5 * z * z * _atan_ratio(x * y, z * R)
    )


def _F100(x, y, z, R):
    # symmetric in (y, z); x carries the power
    ly = _log_arg(y, R, x * x + z * z)
    lz = _log_arg(z, R, x * x + y * y)
    return (
        y * z * R / 3.0
        + xlogy(z * (3.0 * x * x + z * z) / 6.0, ly)
        + xlogy(y * (3.0 * x * x + y * y) / 6.0, lz)
        - (x ** 3 / 3.0) * _atan_ratio(y * z, x * R)
    )


def _F110(x, y, z, R):
    # symmetric in (x, y); z carries no power
    rho2 = x * x + y * y
    lz = _log_arg(z, R, rho2)
    return z * R ** 3 / 12.0 + rho2 * z * R / 8.0 + xlogy(rho2 * rho2 / 8.0, lz)


def _F111(x, y, z, R):
    return R ** 5 / 15.0


def _antiderivative(n: Tuple[int, int, int], x, y, z):
    R = np.sqrt(x * x + y * y + z * z)
    total = sum(n)
    if total == 0:
        return _F000(x, y, z, R)
    if total == 3:
        return _F111(x, y, z, R)
    if total == 1:
        if n[0]:
            return _F100(x, y, z, R)
        if n[1]:
            return _F100(y, x, z, R)
        return _F100(z, x, y, R)
    if not n[2]:
        return _F110(x, y, z, R)
    if not n[1]:
        return _F110(x, z, y, R)
    return _F110(y, z, x, R)


def monomial_coulomb_antiderivative(n1: int, n2: int, n3: int, point: Sequence[float]) -> float:
    """
    Closed-form indefinite integral of x^n1 y^n2 z^n3 / R for n in {0, 1}.

    Built from R, logarithms of (x_a + R) and arctangents of x_a x_b / (x_c R);
    singular loci take their limit values so the result is always finite.
    """
    if not all(n in (0, 1) for n in (n1, n2, n3)):
        raise UnsupportedBasisError(f"monomial powers must be 0 or 1, got {(n1, n2, n3)}")
    x, y, z = (np.float64(v) for v in point)
    return float(_antiderivative((n1, n2, n3), x, y, z))


def _antiderivative_grid(us: np.ndarray, vs: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """All eight antiderivatives on the tensor grid of node coordinates, shape (2, 2, 2, X, Y, Z)"""
    X, Y, Z = np.meshgrid(us, vs, ws, indexing="ij")
    out = np.empty((2, 2, 2) + X.shape)
    for n in MONOMIALS:
        out[n] = _antiderivative(n, X, Y, Z)
    return out


def _cell_monomial_integrals(us: np.ndarray, vs: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """Integrals of u^m / |u| over every cell of the node grid, shape (2, 2, 2, X-1, Y-1, Z-1)"""
    G = _antiderivative_grid(us, vs, ws)
    return np.diff(np.diff(np.diff(G, axis=3), axis=4), axis=5)


def box_coulomb_integral(
    box: Sequence[Tuple[float, float]],
    poly: np.ndarray,
    R: Sequence[float],
) -> float:
    """
    Exact integral of poly(x) / |x - R| over an axis-aligned box.

    Args:
        box: ((x0, x1), (y0, y1), (z0, z1))
        poly: (2, 2, 2) coefficients of x^a y^b z^c, a, b, c in {0, 1}
        R: singular point

    Returns:
        The definite integral; 0.0 with a DegenerateBoxWarning for zero-width boxes
    """
    poly = np.asarray(poly, dtype=float).reshape(2, 2, 2)
    R = np.asarray(R, dtype=float)
    if any(hi - lo <= 0 for lo, hi in box):
        warnings.warn(f"degenerate box {box}", DegenerateBoxWarning)
        return 0.0
    # re-expand in u = x - R: x^1 = u + R_x
    shifted = np.zeros((2, 2, 2))
    for a, b, c in MONOMIALS:
        coef = poly[a, b, c]
        if coef == 0.0:
            continue
        for a2 in range(a + 1):
            for b2 in range(b + 1):
                for c2 in range(c + 1):
                    factor = (R[0] if a and not a2 else 1.0) * (R[1] if b and not b2 else 1.0) * (R[2] if c and not c2 else 1.0)
                    shifted[a2, b2, c2] += coef * factor
    us = np.array(box[0], dtype=float) - R[0]
    vs = np.array(box[1], dtype=float) - R[1]
    ws = np.array(box[2], dtype=float) - R[2]
    M = _cell_monomial_integrals(us, vs, ws)[..., 0, 0, 0]
    return float(np.sum(shifted * M))


# ---------------------------------------------------------------------------
# Separable integrands and the double-to-single reduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeparableFactor:
    """s(x) = f1(x1) f2(x2) f3(x3) supported on the box of the factor supports"""
    factors: Tuple[PiecewisePolynomial, PiecewisePolynomial, PiecewisePolynomial]

    @property
    def box(self) -> Tuple[Tuple[float, float], ...]:
        return tuple(f.support for f in self.factors)

    @property
    def center(self) -> np.ndarray:
        return np.array([f.center for f in self.factors])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return self.factors[0](points[:, 0]) * self.factors[1](points[:, 1]) * self.factors[2](points[:, 2])

    def is_zero(self) -> bool:
        return any(f.is_zero() for f in self.factors)

    def is_symmetric(self) -> bool:
        return all(f.is_symmetric() for f in self.factors)

    def mass(self) -> float:
        return float(np.prod([f.integral() for f in self.factors]))


def correlate_factors(p: PiecewisePolynomial, q: PiecewisePolynomial) -> PiecewisePolynomial:
    """
    g(u) = int p(y + u) q(y) dy as an exact piecewise polynomial.

    Each piece has degree <= deg p + deg q + 1; it is recovered by
    interpolating exact 1-D integrals at Chebyshev points of the piece.
    """
    lo = p.breaks[0] - q.breaks[-1]
    hi = p.breaks[-1] - q.breaks[0]
    if p.is_zero() or q.is_zero():
        return PiecewisePolynomial([lo, hi], [[0.0]])
    knots = np.unique(np.round(np.subtract.outer(p.breaks, q.breaks).ravel(), 13))
    degree = p.degree + q.degree + 1
    rows = []
    cheb = np.cos(np.pi * (np.arange(degree + 1) + 0.5) / (degree + 1))
    for a, b in zip(knots[:-1], knots[1:]):
        us = 0.5 * (a + b) + 0.5 * (b - a) * cheb
        values = [(p.shifted(-u) * q).integral() for u in us]
        local = P.polyfit(us - a, values, degree)
        # back to global powers of u
        rows.append(np.polynomial.Polynomial(local)(np.polynomial.Polynomial([-a, 1.0])).coef)
    return PiecewisePolynomial(knots, rows)


def reduce_double_to_single(
    p_factor: SeparableFactor,
    q_factor: SeparableFactor,
) -> Tuple[SeparableFactor, Tuple[Tuple[float, float], ...]]:
    """
    Reduce int int p(x) q(y) / |x - y - t| dx dy to int z(u) / |u - t| du.

    z is the per-axis correlation of the factors; its box has doubled sides.
    """
    for axis, (fp, fq) in enumerate(zip(p_factor.factors, q_factor.factors)):
        wp = fp.support[1] - fp.support[0]
        wq = fq.support[1] - fq.support[0]
        if abs(wp - wq) > 1e-12 * max(wp, wq, 1.0):
            raise SupportMismatchError(axis)
    gs = tuple(correlate_factors(fp, fq) for fp, fq in zip(p_factor.factors, q_factor.factors))
    z = SeparableFactor(gs)
    return z, z.box


# ---------------------------------------------------------------------------
# Near field: cached rules that depend only on R and the cell grid
# ---------------------------------------------------------------------------

DEFAULT_CUBATURE_ORDER = 14
MAX_SPLIT_DEPTH = 60


class NearFieldCache:
    """
    Integration rules for a (node grid, R, rule) triple. Rules depend only on R
    and the subdivision, never on the integrand. Plain dict: entries are
    deterministic, so concurrent writers store equal values.

    The trilinear rule is an array of node weights; the cubature rule is a
    (points, weights) pair with the kernel folded into the weights.
    """

    def __init__(self, max_entries: int = 4096, max_bytes: int = 256 * 2 ** 20):
        self.max_entries = max_entries
        self.max_bytes = max_bytes
        self._store: Dict[tuple, object] = {}
        self._bytes = 0
        self.hits = 0
        self.misses = 0

    def get(self, nodes: Tuple[np.ndarray, np.ndarray, np.ndarray], R: np.ndarray, order: Optional[int] = None):
        rule = ("trilinear",) if order is None else ("cubature", int(order))
        key = rule + (tuple(np.round(R, 12)),) + tuple(np.round(n, 12).tobytes() for n in nodes)
        entry = self._store.get(key)
        if entry is not None:
            self.hits += 1
            return entry
        self.misses += 1
        entry = near_field_weights(nodes, R) if order is None else cubature_rule(nodes, R, order)
        size = _nbytes(entry)
        if size > self.max_bytes:
            return entry
        while self._store and (len(self._store) >= self.max_entries or self._bytes + size > self.max_bytes):
            self._bytes -= _nbytes(self._store.pop(next(iter(self._store))))
        self._store[key] = entry
        self._bytes += size
        return entry

    def __len__(self) -> int:
        return len(self._store)

    @property
    def nbytes(self) -> int:
        return self._bytes

    def clear(self) -> None:
        self._store.clear()
        self._bytes = 0
        self.hits = self.misses = 0


def _nbytes(entry) -> int:
    if isinstance(entry, tuple):
        return sum(a.nbytes for a in entry)
    return entry.nbytes


DEFAULT_NEAR_CACHE = NearFieldCache()


def near_field_weights(nodes: Tuple[np.ndarray, np.ndarray, np.ndarray], R: Sequence[float]) -> np.ndarray:
    """F[i, j, k] = integral of the trilinear nodal function of node (i, j, k) against 1/|r - R|"""
    R = np.asarray(R, dtype=float)
    us, vs, ws = (np.asarray(n, dtype=float) - R[a] for a, n in enumerate(nodes))
    M = _cell_monomial_integrals(us, vs, ws)

    def nodal(u):
        a, b = u[:-1], u[1:]
        w = b - a
        C = np.empty((len(w), 2, 2))
        C[:, 0, 0], C[:, 0, 1] = b / w, -1.0 / w
        C[:, 1, 0], C[:, 1, 1] = -a / w, 1.0 / w
        return C

    cell = np.einsum("iam,jbn,kco,mnoijk->ijkabc", nodal(us), nodal(vs), nodal(ws), M, optimize=True)
    F = np.zeros((len(us), len(vs), len(ws)))
    for a, b, c in MONOMIALS:
        F[a: a + len(us) - 1, b: b + len(vs) - 1, c: c + len(ws) - 1] += cell[..., a, b, c]
    return F


@lru_cache(maxsize=64)
def _gauss_unit(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]"""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _gauss_points(dist: float, size: float, order: int) -> int:
    """Points per axis for ~16 digits when the kernel singularity sits dist away from a box of width size"""
    if dist <= 0.0:
        return order
    delta = 2.0 * dist / size
    rho = 1.0 + delta + np.sqrt((1.0 + delta) ** 2 - 1.0)
    return int(min(order, max(6, np.ceil(16.0 * np.log(10.0) / (2.0 * np.log(rho))))))


def _tensor_rule(lo: np.ndarray, hi: np.ndarray, R: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = _gauss_unit(n)
    width = hi - lo
    X, Y, Z = np.meshgrid(*[lo[a] + width[a] * x for a in range(3)], indexing="ij")
    points = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    weights = np.einsum("i,j,k->ijk", width[0] * w, width[1] * w, width[2] * w).ravel()
    return points, weights / np.linalg.norm(points - R, axis=1)


def _pyramid_rule(lo: np.ndarray, hi: np.ndarray, R: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Box with R at a corner, split into the three pyramids with apex R over the
    far faces. Along each ray r = R + t (F - R) the volume element t^2 cancels
    the 1/t of the kernel, leaving a smooth integrand.
    """
    x, w = _gauss_unit(order)
    width = hi - lo
    points, weights = [], []
    for a in range(3):
        far = hi[a] if abs(R[a] - lo[a]) <= abs(R[a] - hi[a]) else lo[a]
        height = abs(far - R[a])
        b, c = [ax for ax in range(3) if ax != a]
        U, V = np.meshgrid(lo[b] + width[b] * x, lo[c] + width[c] * x, indexing="ij")
        face = np.empty((U.size, 3))
        face[:, a] = far
        face[:, b] = U.ravel()
        face[:, c] = V.ravel()
        area = np.outer(width[b] * w, width[c] * w).ravel()
        ray = face - R
        points.append((R + x[:, None, None] * ray[None, :, :]).reshape(-1, 3))
        weights.append(np.outer(w * x, height * area / np.linalg.norm(ray, axis=1)).ravel())
    return np.concatenate(points), np.concatenate(weights)


def _split_box(lo: np.ndarray, hi: np.ndarray, cuts: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Sub-boxes of [lo, hi] cut at the non-NaN coordinates of cuts"""
    ranges = [[(lo[a], hi[a])] if np.isnan(cuts[a]) else [(lo[a], cuts[a]), (cuts[a], hi[a])] for a in range(3)]
    return [(np.array([r[0] for r in combo]), np.array([r[1] for r in combo])) for combo in product(*ranges)]


def _cell_rule(lo: np.ndarray, hi: np.ndarray, R: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    eps = 1e-12 * max(float(np.max(hi - lo)), 1.0)
    stack = [(lo, hi, 0)]
    points, weights = [], []
    while stack:
        lo, hi, depth = stack.pop()
        width = hi - lo
        if np.all(R >= lo - eps) and np.all(R <= hi + eps):
            interior = (R > lo + eps) & (R < hi - eps)
            if interior.any():
                # R onto a corner of every piece
                stack.extend((a, b, depth + 1) for a, b in _split_box(lo, hi, np.where(interior, R, np.nan)))
                continue
            long = width > 2.0 * width.min()
            if long.any() and depth < MAX_SPLIT_DEPTH:
                mid = np.where(long, 0.5 * (lo + hi), np.nan)
                stack.extend((a, b, depth + 1) for a, b in _split_box(lo, hi, mid))
                continue
            p, w = _pyramid_rule(lo, hi, R, order)
        else:
            dist = float(np.linalg.norm(np.maximum(np.maximum(lo - R, R - hi), 0.0)))
            size = float(width.max())
            if dist < size and depth < MAX_SPLIT_DEPTH:
                axes = width > dist
                axes[int(np.argmax(width))] = True
                mid = np.where(axes, 0.5 * (lo + hi), np.nan)
                stack.extend((a, b, depth + 1) for a, b in _split_box(lo, hi, mid))
                continue
            p, w = _tensor_rule(lo, hi, R, _gauss_points(dist, size, order))
        points.append(p)
        weights.append(w)
    return np.concatenate(points), np.concatenate(weights)


def cubature_rule(
    nodes: Tuple[np.ndarray, np.ndarray, np.ndarray],
    R: Sequence[float],
    order: int = DEFAULT_CUBATURE_ORDER,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Points and weights w_q with sum_q w_q s(x_q) ~ int s(r) / |r - R| dr for s
    polynomial on every cell of the node grid.

    Cells holding R are cut so R sits on a corner and then integrated as
    pyramids with apex R; cells close to R are bisected until R is at least
    one cell width away; the rest get tensor Gauss-Legendre sized by their
    distance from R.
    """
    if order < 2:
        raise ValueError(f"cubature order must be >= 2, got {order}")
    R = np.asarray(R, dtype=float)
    points, weights = [], []
    intervals = [list(zip(n[:-1], n[1:])) for n in nodes]
    for cell in product(*intervals):
        lo = np.array([c[0] for c in cell], dtype=float)
        hi = np.array([c[1] for c in cell], dtype=float)
        p, w = _cell_rule(lo, hi, R, order)
        points.append(p)
        weights.append(w)
    return np.concatenate(points), np.concatenate(weights)


def subdivision_nodes(factors: Sequence[PiecewisePolynomial], k1: int) -> Tuple[np.ndarray, ...]:
    """Uniform k1-interval subdivision of each support, refined by the factor breakpoints"""
    nodes = []
    for f in factors:
        lo, hi = f.support
        pts = np.concatenate([np.linspace(lo, hi, k1 + 1), f.breaks])
        nodes.append(np.unique(np.round(pts, 13)))
    return tuple(nodes)


def _batch_node_values(axis_lists: Sequence[Sequence[PiecewisePolynomial]], nodes) -> List[np.ndarray]:
    return [np.array([f(n) for f in flist]) for flist, n in zip(axis_lists, nodes)]


def batch_degree(axis_lists: Sequence[Sequence[PiecewisePolynomial]]) -> int:
    return max(f.degree for flist in axis_lists for f in flist)


def near_field_integral(
    s: SeparableFactor,
    R: Sequence[float],
    k1: int,
    cache: Optional[NearFieldCache] = None,
    order: int = DEFAULT_CUBATURE_ORDER,
) -> float:
    """
    int s(r)/|r - R| dr over the box of s, split into a k1^3 subdivision
    refined by the factor breakpoints.

    Factors of degree <= 1 are trilinear on every cell, so their nodal
    interpolant is integrated in closed form and the result is exact. Higher
    degrees go through the cubature rule of the given order.
    """
    values = near_field_batch([[f] for f in s.factors], R, k1, cache, order)
    return float(values[0, 0, 0])


def near_field_batch(
    axis_lists: Sequence[Sequence[PiecewisePolynomial]],
    R: Sequence[float],
    k1: int,
    cache: Optional[NearFieldCache] = None,
    order: int = DEFAULT_CUBATURE_ORDER,
) -> np.ndarray:
    """Near-field integrals of every separable combination f_a(x) g_b(y) h_c(z), shape (A, B, C)"""
    if k1 < 1:
        raise ValueError(f"k1 must be >= 1, got {k1}")
    cache = cache or DEFAULT_NEAR_CACHE
    R = np.asarray(R, dtype=float)
    nodes = subdivision_nodes([_envelope(flist) for flist in axis_lists], k1)
    if batch_degree(axis_lists) <= 1:
        weights = cache.get(nodes, R)
        vx, vy, vz = _batch_node_values(axis_lists, nodes)
        return np.einsum("ijk,ai,bj,ck->abc", weights, vx, vy, vz, optimize=True)
    points, weights = cache.get(nodes, R, order)
    vx, vy, vz = _batch_node_values(axis_lists, points.T)
    return np.einsum("q,aq,bq,cq->abc", weights, vx, vy, vz, optimize=True)


def _envelope(flist: Sequence[PiecewisePolynomial]) -> PiecewisePolynomial:
    """Zero-valued carrier spanning the union of supports and breakpoints of a factor list"""
    pts = np.unique(np.concatenate([f.breaks for f in flist]))
    return PiecewisePolynomial(pts, [[0.0]] * (len(pts) - 1))


# ---------------------------------------------------------------------------
# Far field: truncated Taylor series in 1/|R|
# ---------------------------------------------------------------------------

def inverse_distance_derivatives(v: Sequence[float], order: int) -> List[np.ndarray]:
    """Cartesian derivative tensors of 1/|v| up to the given order (<= 4)"""
    if order > 4:
        raise ValueError("derivatives of 1/r are tabulated up to order 4")
    v = np.asarray(v, dtype=float)
    r2 = float(v @ v)
    r = np.sqrt(r2)
    d = np.eye(3)
    out = [np.array(1.0 / r)]
    if order >= 1:
        out.append(-v / r ** 3)
    if order >= 2:
        out.append((3.0 * np.outer(v, v) - r2 * d) / r ** 5)
    if order >= 3:
        vvv = np.einsum("i,j,k->ijk", v, v, v)
        dv = np.einsum("ij,k->ijk", d, v)
        sym = dv + dv.transpose(0, 2, 1) + dv.transpose(2, 1, 0)
        out.append(-(15.0 * vvv - 3.0 * r2 * sym) / r ** 7)
    if order >= 4:
        v4 = np.einsum("i,j,k,l->ijkl", v, v, v, v)
        sym2 = sum(
            np.einsum(spec, d, v, v)
            for spec in ("ij,k,l->ijkl", "ik,j,l->ijkl", "il,j,k->ijkl", "jk,i,l->ijkl", "jl,i,k->ijkl", "kl,i,j->ijkl")
        )
        dd = np.einsum("ij,kl->ijkl", d, d)
        sym3 = dd + dd.transpose(0, 2, 1, 3) + dd.transpose(0, 3, 2, 1)
        out.append((105.0 * v4 - 15.0 * r2 * sym2 + 3.0 * r2 * r2 * sym3) / r ** 9)
    return out


class FarFieldMoments:
    """
    Precomputed 1-D moments of separable integrands about a common center.

    Moments of symmetric factors at odd order are stored as exact zeros, so the
    corresponding even powers of 1/|R| drop out of the series.
    """

    MAX_K2 = 5

    def __init__(self, axis_lists: Sequence[Sequence[PiecewisePolynomial]], center: Optional[Sequence[float]] = None):
        self.axis_lists = [list(fl) for fl in axis_lists]
        if center is None:
            center = [0.5 * (min(f.support[0] for f in fl) + max(f.support[1] for f in fl)) for fl in axis_lists]
        self.center = np.asarray(center, dtype=float)
        self.symmetric = []
        self.moments = []
        for axis, flist in enumerate(self.axis_lists):
            table = np.zeros((len(flist), self.MAX_K2))
            sym = []
            for idx, f in enumerate(flist):
                is_sym = abs(f.center - self.center[axis]) < 1e-13 and f.is_symmetric()
                sym.append(is_sym)
                for n in range(self.MAX_K2):
                    table[idx, n] = 0.0 if (is_sym and n % 2) else f.moment(n, about=self.center[axis])
            self.moments.append(table)
            self.symmetric.append(all(sym))
        lo = np.array([min(f.support[0] for f in fl) for fl in self.axis_lists])
        hi = np.array([max(f.support[1] for f in fl) for fl in self.axis_lists])
        self.radius = float(np.linalg.norm(np.maximum(np.abs(lo - self.center), np.abs(hi - self.center))))

    @classmethod
    def of(cls, s: SeparableFactor) -> "FarFieldMoments":
        return cls([[f] for f in s.factors], center=s.center)

    @property
    def all_symmetric(self) -> bool:
        return all(self.symmetric)

    def power_term(self, power: int, R: Sequence[float]) -> np.ndarray:
        """Contribution proportional to 1/|R|^power (Taylor order power - 1) for every combination"""
        n = power - 1
        v = np.asarray(R, dtype=float) - self.center
        D = inverse_distance_derivatives(v, n)[n]
        mx, my, mz = self.moments
        total = np.zeros((len(mx), len(my), len(mz)))
        for cx in range(n + 1):
            for cy in range(n + 1 - cx):
                cz = n - cx - cy
                index = (0,) * cx + (1,) * cy + (2,) * cz
                deriv = D[index] if n else D
                weight = deriv / (factorial(cx) * factorial(cy) * factorial(cz))
                total += weight * np.einsum("a,b,c->abc", mx[:, cx], my[:, cy], mz[:, cz])
        return (-1) ** n * total

    def evaluate(self, R: Sequence[float], k2: int) -> np.ndarray:
        """Series through 1/|R|^k2, skipping even powers when all factors are symmetric"""
        if not 1 <= k2 <= self.MAX_K2:
            raise ValueError(f"k2 must lie in [1, {self.MAX_K2}], got {k2}")
        total = None
        for power in range(1, k2 + 1):
            if self.all_symmetric and power % 2 == 0:
                continue
            term = self.power_term(power, R)
            total = term if total is None else total + term
        return total


def far_field_integral(moments: FarFieldMoments, R: Sequence[float], k2: int, alpha: float = 0.0) -> float:
    distance = float(np.linalg.norm(np.asarray(R, dtype=float) - moments.center))
    if distance < alpha:
        raise FarFieldPreconditionError(distance, alpha)
    return float(moments.evaluate(R, k2)[0, 0, 0])


def radial_moment(axis_lists: Sequence[Sequence[PiecewisePolynomial]], K: int, center: Sequence[float], radius: float) -> float:
    """Upper bound of int s |x - c|^K over the batch (nonnegative integrands)"""
    even = K - (K % 2)
    best = 0.0
    for combo in product(*[range(len(fl)) for fl in axis_lists]):
        fs = [axis_lists[a][i] for a, i in enumerate(combo)]
        total = 0.0
        half = even // 2
        for ax in range(half + 1):
            for ay in range(half + 1 - ax):
                az = half - ax - ay
                coeff = factorial(half) / (factorial(ax) * factorial(ay) * factorial(az))
                total += coeff * fs[0].moment(2 * ax, center[0]) * fs[1].moment(2 * ay, center[1]) * fs[2].moment(2 * az, center[2])
        best = max(best, abs(total))
    return best * (radius if K % 2 else 1.0)


# ---------------------------------------------------------------------------
# Method selection
# ---------------------------------------------------------------------------

class Algorithm(Enum):
    NEAR_FIELD = "near_field"
    FAR_FIELD = "far_field"


@dataclass(frozen=True)
class MethodChoice:
    algorithm: Algorithm
    order: int
    predicted_error: float
    predicted_cost: float


@dataclass
class CalibrationTable:
    """Switch radius, subdivision count and accuracy floor for one basis degree"""
    degree: int
    k1: int
    alpha: float
    floor: float
    near_error: float
    radius: float
    radial_moments: Dict[int, float]
    symmetric: bool
    order: int = DEFAULT_CUBATURE_ORDER
    trilinear: bool = True
    k2_max: int = FarFieldMoments.MAX_K2

    def far_error(self, k2: int, distance: float) -> float:
        K = k2 + 1 if (self.symmetric and k2 % 2) else k2
        K = min(K, max(self.radial_moments))
        if distance <= self.radius:
            return float("inf")
        return self.radial_moments[K] / (distance ** K * (distance - self.radius))

    def near_cost(self) -> float:
        if self.trilinear:
            # ~200 arithmetic operations and 56 irrational evaluations per analytic cell
            return 256.0 * (self.k1 + 1) ** 3
        # eight corner cells of three pyramids each dominate
        return 24.0 * self.order ** 3 * self.k1 ** 3

    @staticmethod
    def far_cost(k2: int) -> float:
        return 20.0 * k2


def select_method(R: Sequence[float], eta: float, cost_model: CalibrationTable) -> MethodChoice:
    """Near field inside the switch radius, else the lowest far-field order meeting eta"""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if eta < cost_model.floor:
        raise UnachievableAccuracyError(eta, cost_model.floor)
    distance = float(np.linalg.norm(R))
    if distance < cost_model.alpha:
        return MethodChoice(Algorithm.NEAR_FIELD, cost_model.k1, cost_model.near_error, cost_model.near_cost())
    for k2 in range(1, cost_model.k2_max + 1):
        if cost_model.symmetric and k2 % 2 == 0:
            continue
        err = cost_model.far_error(k2, distance)
        if err <= eta:
            return MethodChoice(Algorithm.FAR_FIELD, k2, err, cost_model.far_cost(k2))
    return MethodChoice(Algorithm.NEAR_FIELD, cost_model.k1, cost_model.near_error, cost_model.near_cost())


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

DEFAULT_CALIBRATION = {
    0: {"k1": 2, "order": DEFAULT_CUBATURE_ORDER},
    1: {"k1": 1, "order": DEFAULT_CUBATURE_ORDER},
}


class IntegralEngine:
    """
    Routes single-center integrals to the near- or far-field algorithm.
    One engine per basis family and target accuracy.
    """

    def __init__(
        self,
        basis: BasisFamily,
        eta: float,
        calibration: Optional[Dict[int, Dict[str, object]]] = None,
        cache: Optional[NearFieldCache] = None,
    ):
        self.basis = basis
        self.eta = float(eta)
        self.cache = cache or NearFieldCache()
        settings = (calibration or DEFAULT_CALIBRATION).get(basis.degree, DEFAULT_CALIBRATION[basis.degree])
        self.calibration = self.calibrate(
            int(settings.get("k1", 2)), int(settings.get("order", DEFAULT_CUBATURE_ORDER)), settings.get("floor")
        )
        self.stats = {"near": 0, "far": 0}
        self._asymmetric = replace(self.calibration, symmetric=False)
        logger.info(
            "integral engine calibrated",
            extra={
                "degree": basis.degree,
                "alpha": self.calibration.alpha,
                "k1": self.calibration.k1,
                "order": self.calibration.order,
                "rule": "trilinear" if self.calibration.trilinear else "cubature",
                "floor": self.calibration.floor,
            },
        )

    def template(self) -> SeparableFactor:
        """Worst-case integrand of the basis: the self-correlation of the 1-D factor"""
        g = correlate_factors(self.basis.factor, self.basis.factor)
        return SeparableFactor((g, g, g))

    def calibrate(self, k1: int, order: int = DEFAULT_CUBATURE_ORDER, floor: Optional[float] = None) -> CalibrationTable:
        z = self.template()
        lists = [[f] for f in z.factors]
        moments = FarFieldMoments(lists, center=z.center)
        radial = {K: radial_moment(lists, K, z.center, moments.radius) for K in range(1, FarFieldMoments.MAX_K2 + 2)}
        table = CalibrationTable(
            degree=self.basis.degree,
            k1=k1,
            alpha=0.0,
            floor=0.0,
            near_error=0.0,
            radius=moments.radius,
            radial_moments=radial,
            symmetric=moments.all_symmetric,
            order=order,
            trilinear=batch_degree(lists) <= 1,
        )
        if floor is None:
            # measured at the singular point: the chosen rule against a refined one
            coarse = near_field_integral(z, z.center, k1, self.cache, order)
            if table.trilinear:
                fine = near_field_integral(z, z.center, 2 * k1, self.cache, order)
            else:
                fine = near_field_integral(z, z.center, k1, self.cache, order + 4)
            floor = max(abs(fine - coarse), 1e-13)
        table.floor = float(floor)
        table.near_error = float(floor)
        grid = np.geomspace(table.radius * 1.001, 1e4, 600)
        reachable = [r for r in grid if table.far_error(3, r) <= max(self.eta, table.floor)]
        table.alpha = float(reachable[0]) if reachable else float(grid[-1])
        return table

    def select(self, R: Sequence[float]) -> MethodChoice:
        return select_method(R, self.eta, self.calibration)

    def integrate_batch(self, axis_lists: Sequence[Sequence[PiecewisePolynomial]], R: Sequence[float], moments: Optional[FarFieldMoments] = None) -> np.ndarray:
        """Integrals of all separable combinations against 1/|r - R|, shape (A, B, C)"""
        moments = moments or FarFieldMoments(axis_lists)
        table = self.calibration if moments.all_symmetric else self._asymmetric
        choice = select_method(np.asarray(R, dtype=float) - moments.center, self.eta, table)
        if choice.algorithm == Algorithm.FAR_FIELD:
            self.stats["far"] += 1
            return moments.evaluate(R, choice.order)
        self.stats["near"] += 1
        return near_field_batch(axis_lists, R, self.calibration.k1, self.cache, self.calibration.order)

    def integrate(self, s: SeparableFactor, R: Sequence[float]) -> float:
        return float(self.integrate_batch([[f] for f in s.factors], R, FarFieldMoments.of(s))[0, 0, 0])


# ---------------------------------------------------------------------------
# Stencils and tables
# ---------------------------------------------------------------------------

class StencilKind(Enum):
    OVERLAP = "overlap"
    KINETIC = "kinetic"
    NUCLEAR_W = "nuclear_W"
    FOUR_CENTER = "four_center"
    DENSITY_COULOMB = "density_coulomb"


@dataclass
class StencilTable:
    """Offset-indexed integral values of a translation-invariant band operator"""
    kind: StencilKind
    entries: Dict[Tuple[int, int, int], float]
    p: int

    def __post_init__(self):
        for off in self.entries:
            if max(abs(o) for o in off) > self.p:
                raise ValueError(f"offset {off} exceeds half-width {self.p}")

    def __len__(self) -> int:
        return len(self.entries)

    def is_symmetric(self, tol: float = 1e-14) -> bool:
        return all(abs(v - self.entries.get(tuple(-o for o in off), np.inf)) <= tol * max(1.0, abs(v)) for off, v in self.entries.items())

    def row_sum(self) -> float:
        return float(sum(self.entries.values()))

    def generator(self, dims: Tuple[int, int, int]) -> np.ndarray:
        """First column of the periodic band matrix: C[i, j] = entries[j - i] -> gen[-d]"""
        gen = np.zeros(dims)
        for off, value in self.entries.items():
            gen[tuple((-o) % n for o, n in zip(off, dims))] += value
        return gen


def _one_dimensional_tables(basis: BasisFamily) -> Tuple[Dict[int, float], Dict[int, float]]:
    f = basis.factor
    df = f.derivative()
    overlap, kinetic = {}, {}
    for d in range(-basis.p, basis.p + 1):
        overlap[d] = (f * f.shifted(d)).integral()
        kinetic[d] = (df * df.shifted(d)).integral()
    return overlap, kinetic


def axis_tables(basis: BasisFamily) -> Tuple[Dict[int, float], Dict[int, float]]:
    """Per-axis overlap and kinetic offsets whose Kronecker sums give S and A"""
    overlap, kinetic = _one_dimensional_tables(basis)
    if basis.degree == 0:
        # face-difference form, see build_stencils
        kinetic = {-1: -1.0, 0: 2.0, 1: -1.0}
    return overlap, kinetic


def build_stencils(grid: GridSpec, basis: BasisFamily) -> Tuple[StencilTable, StencilTable]:
    """
    Overlap S and kinetic A stencils in unit-spacing coordinates.

    A is the symmetric weak form int grad phi . grad phi'; the 1/h^2 factor is
    applied by the operator. For the indicator family A is the 7-point
    face-difference Laplacian, the face-jump form of the same quadratic form.
    """
    if basis.degree not in (0, 1):
        raise UnsupportedBasisError(f"degree {basis.degree}")
    overlap_1d, kinetic_1d = _one_dimensional_tables(basis)
    p = basis.p
    S: Dict[Tuple[int, int, int], float] = {}
    A: Dict[Tuple[int, int, int], float] = {}
    for off in product(range(-p, p + 1), repeat=3):
        s_val = float(np.prod([overlap_1d[o] for o in off]))
        if s_val != 0.0:
            S[off] = s_val
        if basis.degree == 1:
            a_val = sum(
                kinetic_1d[off[ax]] * np.prod([overlap_1d[off[b]] for b in range(3) if b != ax])
                for ax in range(3)
            )
            if a_val != 0.0:
                A[off] = float(a_val)
    if basis.degree == 1:
        return StencilTable(StencilKind.OVERLAP, S, p), StencilTable(StencilKind.KINETIC, A, p)

    # indicators have no weak derivative
    A[(0, 0, 0)] = 6.0
    for ax in range(3):
        for sign in (-1, 1):
            off = [0, 0, 0]
            off[ax] = sign
            A[tuple(off)] = -1.0
    return StencilTable(StencilKind.OVERLAP, S, p), StencilTable(StencilKind.KINETIC, A, 1)


def _images(index: Sequence[int], dims: Sequence[int]) -> List[Tuple[int, ...]]:
    """Minimum-image representatives; an even axis at n/2 contributes both signs"""
    per_axis = []
    for v, n in zip(index, dims):
        w = int(wrap_signed(v, n))
        per_axis.append([w, w + n] if (n % 2 == 0 and w == -(n // 2)) else [w])
    return list(product(*per_axis))


@dataclass
class NuclearTable:
    """
    Band matrix W for a unit charge at the origin:
    W[a, a + delta] = int phi_a phi_{a+delta} / |r|, stored per band delta as an
    array over positions a. Entries below the drop tolerance are zeroed.
    """
    dims: Tuple[int, int, int]
    p: int
    bands: Dict[Tuple[int, int, int], np.ndarray]
    drop_tol: float = 0.0

    @property
    def kind(self) -> StencilKind:
        return StencilKind.NUCLEAR_W

    @property
    def nnz(self) -> int:
        return int(sum(np.count_nonzero(b) for b in self.bands.values()))

    def __len__(self) -> int:
        return self.nnz

    def entries(self) -> Dict[Tuple[int, ...], float]:
        out = {}
        for band, arr in self.bands.items():
            for pos in zip(*np.nonzero(arr)):
                out[tuple(int(v) for v in pos) + band] = float(arr[pos])
        return out

    def thresholded(self, drop_tol: float) -> "NuclearTable":
        bands = {band: np.where(np.abs(arr) >= drop_tol, arr, 0.0) for band, arr in self.bands.items()}
        return NuclearTable(self.dims, self.p, bands, drop_tol)

    def dense(self) -> np.ndarray:
        N = int(np.prod(self.dims))
        W = np.zeros((N, N))
        for band, arr in self.bands.items():
            for pos in product(*[range(n) for n in self.dims]):
                value = arr[pos]
                if value == 0.0:
                    continue
                other = tuple((a + d) % n for a, d, n in zip(pos, band, self.dims))
                W[np.ravel_multi_index(pos, self.dims), np.ravel_multi_index(other, self.dims)] += value
        return W


def build_nuclear_W(
    grid: GridSpec,
    basis: BasisFamily,
    eta: float,
    drop_tol: float = 0.0,
    engine: Optional[IntegralEngine] = None,
) -> NuclearTable:
    """Nuclear-attraction band table for a unit charge at the grid origin"""
    engine = engine or IntegralEngine(basis, eta)
    f = basis.factor
    p = basis.p
    bands: Dict[Tuple[int, int, int], np.ndarray] = {}
    products_1d = {d: f * f.shifted(d) for d in range(-p, p + 1)}
    for band in product(range(-p, p + 1), repeat=3):
        if tuple(-b for b in band) in bands:
            continue
        lists = [[products_1d[d]] for d in band]
        moments = FarFieldMoments(lists)
        arr = np.zeros(grid.dims)
        for pos in product(*[range(n) for n in grid.dims]):
            vals = [engine.integrate_batch(lists, -np.asarray(img, dtype=float), moments)[0, 0, 0] for img in _images(pos, grid.dims)]
            arr[pos] = float(np.mean(vals))
        bands[band] = arr
    # W symmetric: band -d at a equals band d at a - d
    for band in list(bands):
        neg = tuple(-b for b in band)
        if neg not in bands:
            bands[neg] = np.roll(bands[band], shift=band, axis=(0, 1, 2))
    table = NuclearTable(grid.dims, p, bands, 0.0)
    if drop_tol > 0:
        table = table.thresholded(drop_tol)
    logger.info("nuclear table built", extra={"dims": list(grid.dims), "nnz": table.nnz, "stats": dict(engine.stats)})
    return table


# ---------------------------------------------------------------------------
# Four-center table
# ---------------------------------------------------------------------------

def cell_product_factors(degree: int) -> Tuple[List[PiecewisePolynomial], Dict[Tuple[int, int], int]]:
    """
    One-dimensional products of the basis pieces living on a single cell
    [-1/2, 1/2], and the map from an ordered corner pair to its product type.
    """
    if degree == 0:
        return [PiecewisePolynomial([-0.5, 0.5], [[1.0]])], {(0, 0): 0}
    left = np.array([0.5, -1.0])   # corner at -1/2
    right = np.array([0.5, 1.0])   # corner at +1/2
    pieces = [
        PiecewisePolynomial([-0.5, 0.5], [P.polymul(left, left)]),
        PiecewisePolynomial([-0.5, 0.5], [P.polymul(left, right)]),
        PiecewisePolynomial([-0.5, 0.5], [P.polymul(right, right)]),
    ]
    return pieces, {(0, 0): 0, (0, 1): 1, (1, 0): 1, (1, 1): 2}


@dataclass
class FourCenterTable:
    """
    t[a, b, d]: Coulomb interaction of product type a in cell 0 with product
    type b in cell d (unit spacing). Types index cell-local products of basis
    pieces; the indicator family has the single type 0.
    """
    dims: Tuple[int, int, int]
    p: int
    values: np.ndarray  # (T, T, n_i, n_j, n_k), d stored modulo dims
    type_map: Dict[Tuple[int, ...], int] = field(default_factory=dict)

    @property
    def kind(self) -> StencilKind:
        return StencilKind.FOUR_CENTER

    @property
    def n_types(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return int(np.count_nonzero(self.values))

    def lookup(self, a: int, b: int, d: Sequence[int]) -> float:
        return float(self.values[(a, b) + tuple(int(v) % n for v, n in zip(d, self.dims))])

    def pair_swapped(self, a: int, b: int, d: Sequence[int]) -> float:
        return self.lookup(b, a, [-v for v in d])

    def entries(self) -> Dict[Tuple[int, ...], float]:
        return {tuple(int(v) for v in idx): float(self.values[idx]) for idx in zip(*np.nonzero(self.values))}

    def block_generators(self) -> np.ndarray:
        """Generators C_ab[k] = t(a, b, -k) of the block circulant T[(g,a),(g',b)] = t(a, b, g' - g)"""
        gens = np.empty_like(self.values)
        for a in range(self.n_types):
            for b in range(self.n_types):
                gens[a, b] = np.roll(np.flip(self.values[a, b], axis=(0, 1, 2)), shift=1, axis=(0, 1, 2))
        return gens


def _axis_type_lists(degree: int) -> Tuple[List[PiecewisePolynomial], List[Tuple[int, int]]]:
    pieces, _ = cell_product_factors(degree)
    gs, pairs = [], []
    for a, pa in enumerate(pieces):
        for b, pb in enumerate(pieces):
            gs.append(correlate_factors(pa, pb))
            pairs.append((a, b))
    return gs, pairs


def build_four_center_table(
    grid: GridSpec,
    basis: BasisFamily,
    eta: float,
    engine: Optional[IntegralEngine] = None,
) -> FourCenterTable:
    """
    Four-center Coulomb table over all cell separations.

    Every value goes through the double-to-single reduction and the
    single-center engine. Pair-swap symmetry t(a, b, d) = t(b, a, -d) halves
    the work; separations on the half-period of an even axis average both images.
    """
    engine = engine or IntegralEngine(basis, eta)
    pieces, _ = cell_product_factors(basis.degree)
    n_axis = len(pieces)
    gs, pairs = _axis_type_lists(basis.degree)
    lists = [gs, gs, gs]
    moments = FarFieldMoments(lists)
    T3 = n_axis ** 3
    values = np.zeros((T3, T3) + grid.dims)
    done = np.zeros(grid.dims, dtype=bool)

    def type_index(axis_types: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(axis_types), (n_axis,) * 3))

    for pos in product(*[range(n) for n in grid.dims]):
        if done[pos]:
            continue
        acc = np.zeros((len(gs),) * 3)
        imgs = _images(pos, grid.dims)
        for img in imgs:
            acc += engine.integrate_batch(lists, np.asarray(img, dtype=float), moments)
        acc /= len(imgs)
        block = np.zeros((T3, T3))
        for ix, (ax, bx) in enumerate(pairs):
            for iy, (ay, by) in enumerate(pairs):
                for iz, (az, bz) in enumerate(pairs):
                    block[type_index((ax, ay, az)), type_index((bx, by, bz))] = acc[ix, iy, iz]
        values[(slice(None), slice(None)) + pos] = block
        done[pos] = True
        mirror = tuple((-v) % n for v, n in zip(pos, grid.dims))
        if not done[mirror]:
            values[(slice(None), slice(None)) + mirror] = block.T
            done[mirror] = True

    type_map = {}
    _, corner_map = cell_product_factors(basis.degree)
    for corners in product(product((0, 1) if basis.degree else (0,), repeat=3), repeat=2):
        o, o2 = corners
        type_map[tuple(o) + tuple(o2)] = type_index([corner_map[(o[a], o2[a])] for a in range(3)])
    logger.info("four-center table built", extra={"dims": list(grid.dims), "types": T3, "stats": dict(engine.stats)})
    return FourCenterTable(grid.dims, basis.p, values, type_map)


def build_density_coulomb_table(
    dims: Tuple[int, int, int],
    basis: BasisFamily,
    eta: float,
    engine: Optional[IntegralEngine] = None,
) -> FourCenterTable:
    """
    Coulomb table between whole basis functions, T[d] = int int phi_0 phi_d / |r - r'|.
    Densities projected onto the basis (nodal interpolation) interact through it.
    """
    engine = engine or IntegralEngine(basis, eta)
    g = correlate_factors(basis.factor, basis.factor)
    lists = [[g], [g], [g]]
    moments = FarFieldMoments(lists)
    values = np.zeros((1, 1) + tuple(dims))
    for pos in product(*[range(n) for n in dims]):
        mirror = tuple((-v) % n for v, n in zip(pos, dims))
        if mirror < pos:
            values[(0, 0) + pos] = values[(0, 0) + mirror]
            continue
        imgs = _images(pos, dims)
        values[(0, 0) + pos] = float(np.mean([engine.integrate_batch(lists, np.asarray(img, dtype=float), moments)[0, 0, 0] for img in imgs]))
    return FourCenterTable(tuple(dims), basis.p, values, {(0, 0, 0, 0, 0, 0): 0})
