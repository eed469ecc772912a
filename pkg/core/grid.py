# core/grid.py
"""
Regular periodic grids, finite-element basis families and the
atom-centered non-uniform tensor grid.

All lengths are in atomic units. Basis function (i, j, k) is centered at
h * (i, j, k); for the cell-indicator family that point is the cell center,
for the hat family it is the grid node shared by the 2^3 supporting cells.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from core.errors import InfeasibleGridError, InvalidGridError


class BoundaryCondition(Enum):
    PERIODIC = "periodic"
    ZERO = "zero"


class BasisMode(Enum):
    GENERAL = "general"
    ORTHONORMALIZED = "orthonormalized"


def mod_offset(a: int, b: int, n: int) -> int:
    """Periodic offset ((a - b) mod n + n) mod n"""
    if n < 1:
        raise InvalidGridError(f"period must be positive, got {n}")
    return ((a - b) % n + n) % n


def wrap_signed(d, n):
    """Minimum-image representative of an offset, in [-n/2, n/2)"""
    d = np.asarray(d)
    return (d + n // 2) % n - n // 2


class PiecewisePolynomial:
    """
    One-dimensional piecewise polynomial with compact support.

    Coefficients are stored per piece in ascending powers of the global
    coordinate, so pieces can be multiplied and integrated directly with
    numpy.polynomial routines.
    """

    def __init__(self, breaks: Sequence[float], coeffs: Sequence[Sequence[float]]):
        self.breaks = np.asarray(breaks, dtype=float)
        rows = [np.atleast_1d(np.asarray(c, dtype=float)) for c in coeffs]
        if len(rows) != len(self.breaks) - 1:
            raise ValueError(f"{len(self.breaks)} breakpoints need {len(self.breaks) - 1} pieces, got {len(rows)}")
        width = max(len(r) for r in rows) if rows else 1
        self.coeffs = np.zeros((len(rows), width))
        for idx, row in enumerate(rows):
            self.coeffs[idx, : len(row)] = row

    @classmethod
    def zero(cls, lo: float = 0.0, hi: float = 1.0) -> "PiecewisePolynomial":
        return cls([lo, hi], [[0.0]])

    @property
    def degree(self) -> int:
        nonzero = np.nonzero(np.any(np.abs(self.coeffs) > 0, axis=0))[0]
        return int(nonzero[-1]) if len(nonzero) else 0

    @property
    def support(self) -> Tuple[float, float]:
        return float(self.breaks[0]), float(self.breaks[-1])

    @property
    def center(self) -> float:
        lo, hi = self.support
        return 0.5 * (lo + hi)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = (x >= self.breaks[0]) & (x <= self.breaks[-1])
        if not np.any(inside):
            return out
        piece = np.clip(np.searchsorted(self.breaks, x[inside], side="right") - 1, 0, len(self.coeffs) - 1)
        vals = np.zeros(piece.shape)
        for idx in np.unique(piece):
            sel = piece == idx
            vals[sel] = P.polyval(x[inside][sel], self.coeffs[idx])
        out[inside] = vals
        return out

    def shifted(self, t: float) -> "PiecewisePolynomial":
        """x -> f(x - t)"""
        new = []
        for row in self.coeffs:
            comp = np.polynomial.Polynomial(row)(np.polynomial.Polynomial([-t, 1.0]))
            new.append(comp.coef)
        return PiecewisePolynomial(self.breaks + t, new)

    def scaled(self, factor: float) -> "PiecewisePolynomial":
        return PiecewisePolynomial(self.breaks, self.coeffs * factor)

    def derivative(self) -> "PiecewisePolynomial":
        return PiecewisePolynomial(self.breaks, [P.polyder(row) if len(row) > 1 else [0.0] for row in self.coeffs])

    def restricted(self, lo: float, hi: float) -> "PiecewisePolynomial":
        lo = max(lo, self.breaks[0])
        hi = min(hi, self.breaks[-1])
        if hi <= lo:
            return PiecewisePolynomial.zero(lo, lo + 1.0)
        pts = np.unique(np.concatenate([[lo, hi], self.breaks[(self.breaks > lo) & (self.breaks < hi)]]))
        rows = [self._piece_at(0.5 * (a + b)) for a, b in zip(pts[:-1], pts[1:])]
        return PiecewisePolynomial(pts, rows)

    def _piece_at(self, x: float) -> np.ndarray:
        if x < self.breaks[0] or x > self.breaks[-1]:
            return np.zeros(1)
        idx = int(np.clip(np.searchsorted(self.breaks, x, side="right") - 1, 0, len(self.coeffs) - 1))
        return self.coeffs[idx]

    def __mul__(self, other: "PiecewisePolynomial") -> "PiecewisePolynomial":
        lo = max(self.breaks[0], other.breaks[0])
        hi = min(self.breaks[-1], other.breaks[-1])
        if hi <= lo:
            return PiecewisePolynomial.zero(lo, lo + 1.0)
        pts = np.unique(np.concatenate([self.breaks, other.breaks]))
        pts = pts[(pts >= lo) & (pts <= hi)]
        rows = []
        for a, b in zip(pts[:-1], pts[1:]):
            mid = 0.5 * (a + b)
            rows.append(P.polymul(self._piece_at(mid), other._piece_at(mid)))
        return PiecewisePolynomial(pts, rows)

    def integral(self, lo: Optional[float] = None, hi: Optional[float] = None) -> float:
        total = 0.0
        for (a, b), row in zip(zip(self.breaks[:-1], self.breaks[1:]), self.coeffs):
            a2 = a if lo is None else max(a, lo)
            b2 = b if hi is None else min(b, hi)
            if b2 <= a2:
                continue
            anti = P.polyint(row)
            total += P.polyval(b2, anti) - P.polyval(a2, anti)
        return float(total)

    def moment(self, power: int, about: float = 0.0) -> float:
        """Exact integral of (x - about)^power * f(x)"""
        total = 0.0
        mono = np.polynomial.Polynomial([-about, 1.0]) ** power
        for (a, b), row in zip(zip(self.breaks[:-1], self.breaks[1:]), self.coeffs):
            anti = P.polyint(P.polymul(row, mono.coef))
            total += P.polyval(b, anti) - P.polyval(a, anti)
        return float(total)

    def is_symmetric(self, tol: float = 1e-14) -> bool:
        c = self.center
        lo, hi = self.support
        probe = np.linspace(0.0, hi - c, 17)[1:-1]
        scale = max(1.0, float(np.max(np.abs(self(c + probe))))) if len(probe) else 1.0
        return bool(np.allclose(self(c + probe), self(c - probe), atol=tol * scale, rtol=0.0))

    def __repr__(self) -> str:
        return f"PiecewisePolynomial(breaks={self.breaks.tolist()}, degree={self.degree})"


def indicator_factor() -> PiecewisePolynomial:
    return PiecewisePolynomial([-0.5, 0.5], [[1.0]])


def hat_factor() -> PiecewisePolynomial:
    return PiecewisePolynomial([-1.0, 0.0, 1.0], [[1.0, 1.0], [1.0, -1.0]])


@dataclass(frozen=True)
class GridSpec:
    """Periodic (or zero-boundary) regular grid of n_i x n_j x n_k cells of side h"""
    n_i: int
    n_j: int
    n_k: int
    h: float
    p: int = 0
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC

    def __post_init__(self):
        if self.p not in (0, 1):
            raise InvalidGridError(f"basis smoothness p must be 0 or 1, got {self.p}")
        if not self.h > 0:
            raise InvalidGridError(f"cell side h must be positive, got {self.h}")
        for name, n in zip(("n_i", "n_j", "n_k"), self.dims):
            if n < 2 * self.p + 1:
                raise InvalidGridError(f"{name}={n} is below 2p+1={2 * self.p + 1}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (self.n_i, self.n_j, self.n_k)

    @property
    def N(self) -> int:
        return self.n_i * self.n_j * self.n_k

    @property
    def box_lengths(self) -> Tuple[float, float, float]:
        return tuple(n * self.h for n in self.dims)

    @property
    def periodic(self) -> bool:
        return self.boundary == BoundaryCondition.PERIODIC

    def position(self, index: Sequence[int]) -> np.ndarray:
        return self.h * np.asarray(index, dtype=float)

    def nearest_index(self, point: Sequence[float]) -> Tuple[int, int, int]:
        idx = np.rint(np.asarray(point, dtype=float) / self.h).astype(int)
        return tuple(int(mod_offset(int(v), 0, n)) for v, n in zip(idx, self.dims))

    def flat_index(self, index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(v) % n for v, n in zip(index, self.dims)), self.dims))

    def describe(self) -> Dict[str, object]:
        return {
            "dims": list(self.dims),
            "h": self.h,
            "p": self.p,
            "boundary": self.boundary.value,
            "N": self.N,
        }


def build_uniform_grid(
    n_i: int,
    n_j: int,
    n_k: int,
    h: float,
    p: int = 0,
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
) -> GridSpec:
    if isinstance(boundary, str):
        boundary = BoundaryCondition(boundary)
    if min(n_i, n_j, n_k) < 1:
        raise InvalidGridError(f"cell counts must be positive, got {(n_i, n_j, n_k)}")
    return GridSpec(int(n_i), int(n_j), int(n_k), float(h), int(p), boundary)


@dataclass(frozen=True)
class BasisFamily:
    """
    Tensor-product finite-element basis of polynomial degree 0 (indicator) or 1 (hat).

    The mode is a descriptor only: it enters the table cache key and the
    reports but changes no table. The spectral S^-1/2 transform that makes
    the overlap the identity lives in eigensolver._Coordinates, which applies
    it in both modes whenever S is not already the identity.
    """
    degree: int
    mode: BasisMode = BasisMode.GENERAL

    def __post_init__(self):
        if self.degree not in (0, 1):
            raise InvalidGridError(f"basis degree must be 0 or 1, got {self.degree}")

    @property
    def p(self) -> int:
        return self.degree

    @property
    def factor(self) -> PiecewisePolynomial:
        return indicator_factor() if self.degree == 0 else hat_factor()

    def descriptor(self) -> str:
        return f"degree={self.degree};mode={self.mode.value}"

    def evaluate(self, grid: GridSpec, index: Sequence[int], points: np.ndarray) -> np.ndarray:
        """Value of the normalized basis function h^{-3/2} f(r/h - index) at points (M, 3)"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        f = self.factor
        value = np.ones(len(points))
        for axis, n in enumerate(grid.dims):
            local = points[:, axis] / grid.h - index[axis]
            if grid.periodic:
                local = (local + n / 2.0) % n - n / 2.0
            value *= f(local)
        return value * grid.h ** -1.5


@dataclass(frozen=True)
class NucleusList:
    """Nuclear charges with the grid index of the cell (or node) holding each nucleus"""
    charges: Tuple[float, ...]
    indices: Tuple[Tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.charges) != len(self.indices):
            raise InvalidGridError("charges and indices must have the same length")
        for q in self.charges:
            if not q > 0:
                raise InvalidGridError(f"nuclear charge must be positive, got {q}")

    @classmethod
    def from_entries(cls, entries: Sequence[Tuple[float, Sequence[int]]]) -> "NucleusList":
        return cls(
            tuple(float(q) for q, _ in entries),
            tuple(tuple(int(v) for v in idx) for _, idx in entries),
        )

    def __len__(self) -> int:
        return len(self.charges)

    def validate(self, grid: GridSpec) -> None:
        for idx in self.indices:
            for v, n in zip(idx, grid.dims):
                if not 0 <= v < n:
                    raise InvalidGridError(f"nucleus index {idx} lies outside grid {grid.dims}")


@dataclass
class NonUniformGrid:
    """Per-axis breakpoints with every nucleus at the center of a cell"""
    breakpoints: List[np.ndarray]
    anchors: List[Dict[int, int]]
    h_target: float
    uniform_counts: Tuple[int, int, int] = field(default=(0, 0, 0))

    @property
    def counts(self) -> Tuple[int, int, int]:
        return tuple(len(b) - 1 for b in self.breakpoints)

    def widths(self, axis: int) -> np.ndarray:
        return np.diff(self.breakpoints[axis])

    def centers(self, axis: int) -> np.ndarray:
        b = self.breakpoints[axis]
        return 0.5 * (b[:-1] + b[1:])

    def cell_of(self, nucleus: int) -> Tuple[int, int, int]:
        return tuple(self.anchors[axis][nucleus] for axis in range(3))


def _axis_halfwidths(coords: np.ndarray, h: float) -> Optional[List[float]]:
    """
    Choose the half-width of the cell centered on each distinct coordinate.

    Gaps between neighbouring nucleus cells must be either empty or at least
    h/2 wide so fillers stay inside [h/2, 2h]. Depth-first search over a small
    candidate set, memoized on (position, rounded half-width).
    """
    lo_a, hi_a = h / 4.0, h
    gaps = np.diff(coords)
    failed = set()

    def gap_ok(F: float) -> bool:
        return abs(F) <= 1e-12 * h or F >= h / 2.0 - 1e-12 * h

    def search(j: int, a_j: float) -> Optional[List[float]]:
        if j == len(coords) - 1:
            return [a_j]
        key = (j, round(a_j / h, 12))
        if key in failed:
            return None
        d = gaps[j]
        candidates = [h / 2.0, d - a_j, d - a_j - h / 2.0, h / 4.0, h]
        if j + 1 < len(gaps):
            candidates.append(gaps[j + 1] / 2.0)
        seen = []
        for a_next in candidates:
            if a_next < lo_a - 1e-12 * h or a_next > hi_a + 1e-12 * h:
                continue
            a_next = min(max(a_next, lo_a), hi_a)
            if any(abs(a_next - s) <= 1e-12 * h for s in seen):
                continue
            seen.append(a_next)
            if not gap_ok(d - a_j - a_next):
                continue
            rest = search(j + 1, a_next)
            if rest is not None:
                return [a_j] + rest
        failed.add(key)
        return None

    for a0 in (h / 2.0, h / 4.0, min(h, gaps[0] / 2.0) if len(gaps) else h / 2.0, h):
        if a0 < lo_a or a0 > hi_a:
            continue
        result = search(0, a0)
        if result is not None:
            return result
    return None


def _fill(length: float, h: float) -> List[float]:
    if length <= 1e-12 * h:
        return []
    q = max(1, int(round(length / h)))
    return [length / q] * q


def build_centered_tensor_grid(
    nuclei_coords: Sequence[Sequence[float]],
    h_target: float,
    padding_cells: int = 4,
) -> NonUniformGrid:
    """
    Build per-axis breakpoints placing each nucleus at a cell center.

    Cell widths stay in [h_target/2, 2*h_target]; each axis extends
    padding_cells target-width cells beyond the outermost nucleus cell.
    """
    if not h_target > 0:
        raise InvalidGridError(f"h_target must be positive, got {h_target}")
    coords = np.atleast_2d(np.asarray(nuclei_coords, dtype=float))
    if coords.size == 0:
        raise InvalidGridError("at least one nucleus is required")
    h = float(h_target)

    breakpoints: List[np.ndarray] = []
    anchors: List[Dict[int, int]] = []
    uniform_counts = []
    for axis in range(3):
        column = coords[:, axis]
        distinct = np.unique(np.round(column, 12))
        order = np.sort(distinct)
        for left, right in zip(order[:-1], order[1:]):
            if right - left < h / 2.0:
                raise InfeasibleGridError(axis, (float(left), float(right)), h / 2.0)
        halves = _axis_halfwidths(order, h)
        if halves is None:
            worst = int(np.argmin(np.diff(order))) if len(order) > 1 else 0
            raise InfeasibleGridError(axis, (float(order[worst]), float(order[min(worst + 1, len(order) - 1)])), h / 2.0)

        edges = [order[0] - halves[0] - padding_cells * h]
        edges.extend(order[0] - halves[0] + np.arange(-padding_cells + 1, 1) * h)
        cell_of_coord: Dict[float, int] = {}
        for j, x in enumerate(order):
            cell_of_coord[float(x)] = len(edges) - 1
            edges.append(x + halves[j])
            if j + 1 < len(order):
                gap = order[j + 1] - halves[j + 1] - (x + halves[j])
                fillers = _fill(gap, h)
                for width in fillers:
                    edges.append(edges[-1] + width)
                if fillers:
                    edges[-1] = order[j + 1] - halves[j + 1]
        for _ in range(padding_cells):
            edges.append(edges[-1] + h)
        b = np.asarray(edges, dtype=float)
        breakpoints.append(b)
        anchors.append({s: cell_of_coord[float(np.round(column[s], 12))] for s in range(len(column))})
        uniform_counts.append(int(np.ceil((b[-1] - b[0]) / h - 1e-9)))

    return NonUniformGrid(breakpoints, anchors, h, tuple(uniform_counts))
