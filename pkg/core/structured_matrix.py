# core/structured_matrix.py
"""
Structured matrix algebra on the three-level grid index.

Every grid-sized operator of the solver is applied without forming a dense
N x N matrix: circulants through scipy.fft, band matrices through shifted
slices, nuclear terms through shift permutations of one band table.
"""

import time
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from math import log2
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft

from core.errors import DimensionMismatchError, InvalidGridError, SingularSpectrumError, UnsupportedBasisError
from core.grid import BoundaryCondition
from core.integral_engine import FourCenterTable, NuclearTable, StencilTable, cell_product_factors
from core.logging_setup import get_logger

logger = get_logger("structured_matrix")

Dims = Tuple[int, int, int]

# band vs FFT application: direct when nnz < crossover * log2(N)
BAND_CROSSOVER = 10.0


@lru_cache(maxsize=32)
def measure_band_crossover(dims: Dims, repeats: int = 3) -> float:
    """
    Startup microbenchmark: time one shifted-slice pass against one FFT
    circulant product on a random grid vector and return the crossover
    constant c with cost(direct, nnz) == cost(circulant) at nnz = c log2 N.
    """
    N = int(np.prod(dims))
    v = np.random.default_rng(0).standard_normal(dims)
    gen = np.zeros(dims)
    gen[0, 0, 0] = 1.0
    circulant = ThreeLevelCirculant(dims, gen)

    def best(fn) -> float:
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return max(min(times), 1e-9)

    per_entry = best(lambda: v + 1.0 * shift_view(v, (1, 0, 0)))
    fft = best(lambda: circulant_matvec(circulant, v))
    crossover = float(fft / per_entry / log2(max(N, 2)))
    logger.info("band crossover measured", extra={"dims": list(dims), "crossover": crossover})
    return crossover


def _as_grid(v: np.ndarray, dims: Dims) -> Tuple[np.ndarray, bool]:
    """View a flat (N,) / (N, m) or gridded (dims) / (m, dims) array as (..., n_i, n_j, n_k)"""
    v = np.asarray(v)
    N = int(np.prod(dims))
    if v.shape[-3:] == tuple(dims):
        return v, False
    if v.shape[0] == N:
        if v.ndim == 1:
            return v.reshape(dims), True
        return np.moveaxis(v, 0, -1).reshape(v.shape[1:] + tuple(dims)), True
    raise DimensionMismatchError(f"vector of shape {v.shape} does not match grid {dims}")


def _restore(out: np.ndarray, flat: bool, dims: Dims) -> np.ndarray:
    if not flat:
        return out
    N = int(np.prod(dims))
    if out.ndim == 3:
        return out.reshape(N)
    return np.moveaxis(out.reshape(out.shape[:-3] + (N,)), -1, 0)


class ThreeLevelCirculant:
    """
    Three-level circulant C[i, j] = c[(i - j) mod dims] defined by its first column.

    The spectrum is computed once with a 3-D FFT; products and matrix
    functions are diagonal in Fourier space.
    """

    def __init__(self, dims: Sequence[int], generator: np.ndarray):
        self.dims: Dims = tuple(int(n) for n in dims)
        generator = np.asarray(generator)
        if generator.shape != self.dims:
            raise DimensionMismatchError(f"generator shape {generator.shape} != {self.dims}")
        self.generator = generator
        self._spectrum: Optional[np.ndarray] = None

    @classmethod
    def from_stencil(cls, stencil: StencilTable, dims: Sequence[int]) -> "ThreeLevelCirculant":
        return cls(dims, stencil.generator(tuple(dims)))

    @property
    def N(self) -> int:
        return int(np.prod(self.dims))

    @property
    def spectrum(self) -> np.ndarray:
        if self._spectrum is None:
            self._spectrum = sfft.fftn(self.generator)
        return self._spectrum

    @property
    def is_real_symmetric(self) -> bool:
        flipped = np.roll(np.flip(self.generator, axis=(0, 1, 2)), 1, axis=(0, 1, 2))
        return bool(np.isrealobj(self.generator) and np.allclose(flipped, self.generator, rtol=0, atol=1e-14 * max(1.0, np.abs(self.generator).max())))

    def eigenvalues(self) -> np.ndarray:
        spec = self.spectrum
        return spec.real if self.is_real_symmetric else spec

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return circulant_matvec(self, v)

    def apply_function(self, fn: Callable[[np.ndarray], np.ndarray], v: np.ndarray) -> np.ndarray:
        return circulant_apply_function(self, fn, v)

    def function(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ThreeLevelCirculant":
        """Circulant with spectrum fn(spectrum)"""
        values = _checked(fn, self.eigenvalues())
        gen = sfft.ifftn(values)
        if self.is_real_symmetric:
            gen = gen.real
        out = ThreeLevelCirculant(self.dims, gen)
        out._spectrum = np.asarray(values, dtype=complex)
        return out

    def dense(self) -> np.ndarray:
        """Explicit matrix, for tests on small grids"""
        N = self.N
        cols = np.empty((N, N), dtype=self.generator.dtype)
        for j, idx in enumerate(product(*[range(n) for n in self.dims])):
            cols[:, j] = np.roll(self.generator, idx, axis=(0, 1, 2)).reshape(N)
        return cols


def _checked(fn: Callable[[np.ndarray], np.ndarray], eigenvalues: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.asarray(fn(eigenvalues))
    bad = ~np.isfinite(values)
    if np.any(bad):
        first = int(np.flatnonzero(bad.ravel())[0])
        raise SingularSpectrumError(complex(eigenvalues.ravel()[first]), first)
    return values


def circulant_matvec(C: ThreeLevelCirculant, v: np.ndarray) -> np.ndarray:
    """C v in O(N log N); accepts a flat or gridded vector or a batch of them"""
    grid, flat = _as_grid(v, C.dims)
    out = sfft.ifftn(C.spectrum * sfft.fftn(grid, axes=(-3, -2, -1)), axes=(-3, -2, -1))
    if np.isrealobj(grid) and np.isrealobj(C.generator):
        out = out.real
    return _restore(out, flat, C.dims)


def circulant_apply_function(C: ThreeLevelCirculant, fn: Callable[[np.ndarray], np.ndarray], v: np.ndarray) -> np.ndarray:
    """fn(C) v via the spectrum; non-finite spectral values raise SingularSpectrumError"""
    values = _checked(fn, C.eigenvalues())
    grid, flat = _as_grid(v, C.dims)
    out = sfft.ifftn(values * sfft.fftn(grid, axes=(-3, -2, -1)), axes=(-3, -2, -1))
    if np.isrealobj(grid) and np.isrealobj(values) and C.is_real_symmetric:
        out = out.real
    return _restore(out, flat, C.dims)


class BlockCirculant:
    """
    Block three-level circulant acting on (T, n_i, n_j, n_k) arrays:
    y[a, g] = sum_b sum_g' C_ab[g - g'] x[b, g'].
    """

    def __init__(self, dims: Sequence[int], generators: np.ndarray):
        self.dims: Dims = tuple(int(n) for n in dims)
        if generators.shape[2:] != self.dims or generators.shape[0] != generators.shape[1]:
            raise DimensionMismatchError(f"block generators of shape {generators.shape} do not fit {self.dims}")
        self.generators = generators
        self.spectrum = sfft.fftn(generators, axes=(-3, -2, -1))

    @classmethod
    def from_table(cls, table: FourCenterTable) -> "BlockCirculant":
        return cls(table.dims, table.block_generators())

    @property
    def n_types(self) -> int:
        return self.generators.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.n_types,) + self.dims:
            raise DimensionMismatchError(f"pair-space vector {x.shape} does not match {(self.n_types,) + self.dims}")
        xf = sfft.fftn(x, axes=(-3, -2, -1))
        out = sfft.ifftn(np.einsum("abxyz,bxyz->axyz", self.spectrum, xf, optimize=True), axes=(-3, -2, -1))
        return out.real if np.isrealobj(x) else out


@dataclass
class BandOperator:
    """
    Translation-invariant band matrix M[i, i + d] = entries[d] with |d_a| <= p.

    Periodic grids may use either the direct shifted-slice product or the
    circulant embedding; zero-boundary grids only use the direct product.
    Without a configured crossover the constant is measured once per grid.
    """
    dims: Dims
    entries: Dict[Tuple[int, int, int], float]
    boundary: BoundaryCondition = BoundaryCondition.PERIODIC
    crossover: Optional[float] = None

    @classmethod
    def from_stencil(
        cls,
        stencil: StencilTable,
        dims: Sequence[int],
        boundary: BoundaryCondition = BoundaryCondition.PERIODIC,
        crossover: Optional[float] = None,
    ) -> "BandOperator":
        return cls(tuple(int(n) for n in dims), dict(stencil.entries), boundary, crossover)

    @property
    def nnz(self) -> int:
        return sum(1 for v in self.entries.values() if v != 0.0)

    def preferred_method(self) -> str:
        N = int(np.prod(self.dims))
        if self.boundary != BoundaryCondition.PERIODIC:
            return "direct"
        if self.crossover is None:
            self.crossover = measure_band_crossover(self.dims)
        return "direct" if self.nnz < self.crossover * log2(max(N, 2)) else "circulant"

    def apply(self, v: np.ndarray, method: str = "auto") -> np.ndarray:
        method = self.preferred_method() if method == "auto" else method
        if method == "circulant":
            return self.via_circulant(v)
        if method != "direct":
            raise ValueError(f"unknown band method {method!r}")
        grid, flat = _as_grid(v, self.dims)
        out = np.zeros(grid.shape, dtype=np.result_type(grid, float))
        for off, value in self.entries.items():
            if value != 0.0:
                out += value * shift_view(grid, off, self.boundary)
        return _restore(out, flat, self.dims)

    def via_circulant(self, v: np.ndarray) -> np.ndarray:
        if self.boundary != BoundaryCondition.PERIODIC:
            raise InvalidGridError("circulant embedding requires periodic boundaries")
        gen = np.zeros(self.dims)
        for off, value in self.entries.items():
            gen[tuple((-o) % n for o, n in zip(off, self.dims))] += value
        return circulant_matvec(ThreeLevelCirculant(self.dims, gen), v)


def shift_view(grid: np.ndarray, offset: Sequence[int], boundary: BoundaryCondition = BoundaryCondition.PERIODIC) -> np.ndarray:
    """out[..., i] = grid[..., i + offset], wrapping or zero-filled past the boundary"""
    offset = tuple(int(o) for o in offset)
    if boundary == BoundaryCondition.PERIODIC:
        return np.roll(grid, tuple(-o for o in offset), axis=(-3, -2, -1))
    out = np.zeros_like(grid)
    src, dst = [Ellipsis], [Ellipsis]
    for o, n in zip(offset, grid.shape[-3:]):
        if abs(o) >= n:
            return out
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n + min(-o, 0)))
    out[tuple(dst)] = grid[tuple(src)]
    return out


@dataclass(frozen=True)
class ShiftPermutation:
    """Cyclic translation by an index offset: (P v)[i] = v[i - offset]"""
    dims: Dims
    offset: Tuple[int, int, int]

    def apply(self, v: np.ndarray) -> np.ndarray:
        grid, flat = _as_grid(v, self.dims)
        return _restore(np.roll(grid, self.offset, axis=(-3, -2, -1)), flat, self.dims)

    def transpose_apply(self, v: np.ndarray) -> np.ndarray:
        return self.inverse().apply(v)

    def inverse(self) -> "ShiftPermutation":
        return ShiftPermutation(self.dims, tuple((-o) % n for o, n in zip(self.offset, self.dims)))

    def compose(self, other: "ShiftPermutation") -> "ShiftPermutation":
        return ShiftPermutation(self.dims, tuple((a + b) % n for a, b, n in zip(self.offset, other.offset, self.dims)))


def apply_band_table(table: NuclearTable, v: np.ndarray) -> np.ndarray:
    """(W v)[a] = sum_delta W_delta[a] v[a + delta], periodic"""
    grid, flat = _as_grid(v, table.dims)
    out = np.zeros(grid.shape, dtype=np.result_type(grid, float))
    for band, arr in table.bands.items():
        if np.any(arr):
            out += arr * shift_view(grid, band)
    return _restore(out, flat, table.dims)


def apply_B(nuclei, table: NuclearTable, v: np.ndarray) -> np.ndarray:
    """
    Nuclear attraction sum_s Q_s P_s W P_s^T v: one band table for a unit
    charge at the origin, translated to each nucleus by a cyclic shift.
    """
    grid, flat = _as_grid(v, table.dims)
    if grid.shape[-3:] != table.dims:
        raise DimensionMismatchError(f"vector grid {grid.shape[-3:]} != table grid {table.dims}")
    out = np.zeros(grid.shape, dtype=np.result_type(grid, float))
    for charge, index in zip(nuclei.charges, nuclei.indices):
        shift = ShiftPermutation(table.dims, tuple(int(i) % n for i, n in zip(index, table.dims)))
        out += charge * shift.apply(apply_band_table(table, shift.transpose_apply(grid)))
    return _restore(out, flat, table.dims)


# ---------------------------------------------------------------------------
# Pair products H(c) x and their adjoint
# ---------------------------------------------------------------------------

def _corner_pairs(p: int):
    """(o, o', type index) for every ordered pair of cell corners"""
    if p == 0:
        return [((0, 0, 0), (0, 0, 0), 0)]
    _, corner_map = cell_product_factors(1)
    pairs = []
    for o in product((0, 1), repeat=3):
        for o2 in product((0, 1), repeat=3):
            axis_types = [corner_map[(o[a], o2[a])] for a in range(3)]
            pairs.append((o, o2, int(np.ravel_multi_index(tuple(axis_types), (3, 3, 3)))))
    return pairs


def apply_H(c: np.ndarray, x: np.ndarray, p: int, dims: Dims) -> np.ndarray:
    """
    Pair product of two grid vectors in cell/product-type coordinates, shape (T, dims).

    Indicators give the pointwise product. Hats give, per cell g and type a,
    the sum of c[g + o] x[g + o'] over corner pairs of that type; H is
    symmetric in its two arguments.
    """
    if p not in (0, 1):
        raise UnsupportedBasisError(f"half-width {p}")
    cg, _ = _as_grid(c, dims)
    xg, _ = _as_grid(x, dims)
    n_types = 1 if p == 0 else 27
    out = np.zeros((n_types,) + tuple(dims), dtype=np.result_type(cg, xg))
    if p == 0:
        out[0] = cg * xg
        return out
    shifted_c = {o: shift_view(cg, o) for o in product((0, 1), repeat=3)}
    shifted_x = {o: shift_view(xg, o) for o in product((0, 1), repeat=3)}
    for o, o2, t in _corner_pairs(1):
        out[t] += shifted_c[o] * shifted_x[o2]
    return out


def apply_H_adjoint(c: np.ndarray, y: np.ndarray, p: int, dims: Dims) -> np.ndarray:
    """H(c)^T y: scatter pair-space values back to grid vectors, shape (dims)"""
    cg, flat = _as_grid(c, dims)
    if p == 0:
        return _restore(cg * y[0], flat, dims)
    shifted_c = {o: shift_view(cg, o) for o in product((0, 1), repeat=3)}
    out = np.zeros(tuple(dims), dtype=np.result_type(cg, y))
    for o, o2, t in _corner_pairs(1):
        # contribution lands on node g + o2
        out += np.roll(shifted_c[o] * y[t], o2, axis=(0, 1, 2))
    return _restore(out, flat, dims)


def dense_band(entries: Dict[Tuple[int, int, int], float], dims: Dims, boundary: BoundaryCondition = BoundaryCondition.PERIODIC) -> np.ndarray:
    """Explicit band matrix, for tests on small grids"""
    N = int(np.prod(dims))
    M = np.zeros((N, N))
    for pos in product(*[range(n) for n in dims]):
        i = np.ravel_multi_index(pos, dims)
        for off, value in entries.items():
            other = [a + d for a, d in zip(pos, off)]
            if boundary == BoundaryCondition.PERIODIC:
                other = [o % n for o, n in zip(other, dims)]
            elif any(o < 0 or o >= n for o, n in zip(other, dims)):
                continue
            M[i, np.ravel_multi_index(tuple(other), dims)] += value
    return M
