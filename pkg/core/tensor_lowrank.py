# core/tensor_lowrank.py
"""
Canonical (CP) low-rank tensors for orbitals and operators on n_i x n_j x n_k grids.

An orbital is stored as sum_r w_r u_r (x) v_r (x) t_r; an operator as a short
sum of Kronecker products of one-dimensional matrices, so a matvec costs
O(n^2) per axis and term.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla

from core.errors import CheckpointFormatError, DimensionMismatchError, UnknownModeError
from core.logging_setup import get_logger

logger = get_logger("tensor_lowrank")

CHECKPOINT_MAGIC = b"HFCT"
CHECKPOINT_VERSION = 1


@dataclass
class CanonicalTensor:
    """Weights nonincreasing and nonnegative; factor columns unit-norm"""
    weights: np.ndarray
    factors: Tuple[np.ndarray, np.ndarray, np.ndarray]
    error: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.factors = tuple(np.asarray(f, dtype=float) for f in self.factors)
        for f in self.factors:
            if f.shape[1] != self.weights.size:
                raise DimensionMismatchError(f"factor with {f.shape[1]} columns for rank {self.weights.size}")

    @classmethod
    def from_factors(cls, weights: Sequence[float], factors: Sequence[np.ndarray], error: float = 0.0) -> "CanonicalTensor":
        """Normalize columns, move signs into the first factor, sort weights"""
        weights = np.asarray(weights, dtype=float).copy()
        normed = [np.array(f, dtype=float, copy=True) for f in factors]
        for f in normed:
            norms = np.linalg.norm(f, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            f /= safe
            weights = weights * norms
        negative = weights < 0
        normed[0][:, negative] *= -1.0
        weights = np.abs(weights)
        keep = weights > 0
        order = np.argsort(-weights[keep], kind="stable")
        return cls(weights[keep][order], tuple(f[:, keep][:, order] for f in normed), error)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "CanonicalTensor":
        return cls(np.zeros(0), tuple(np.zeros((n, 0)) for n in dims))

    @classmethod
    def from_dense(cls, X: np.ndarray, tol: float = 0.0) -> "CanonicalTensor":
        """
        Error-controlled CP form of a dense tensor: SVD of the mode-1 unfolding,
        then an SVD of every resulting n_j x n_k matrix; terms are dropped from
        the tail while the discarded energy stays within tol.
        """
        X = np.asarray(X, dtype=float)
        ni, nj, nk = X.shape
        U, s, Vt = np.linalg.svd(X.reshape(ni, nj * nk), full_matrices=False)
        weights, cols = [], ([], [], [])
        for r in range(len(s)):
            if s[r] == 0:
                continue
            M = Vt[r].reshape(nj, nk)
            P, q, Rt = np.linalg.svd(M, full_matrices=False)
            for t in range(len(q)):
                if q[t] == 0:
                    continue
                weights.append(s[r] * q[t])
                cols[0].append(U[:, r])
                cols[1].append(P[:, t])
                cols[2].append(Rt[t])
        if not weights:
            return cls.zeros(X.shape)
        weights = np.array(weights)
        order = np.argsort(-weights)
        weights = weights[order]
        total = float(np.sum(weights ** 2))
        # terms are mutually orthogonal, so discarded energy adds up exactly
        tail = np.cumsum((weights ** 2)[::-1])[::-1]
        budget = (tol ** 2) * total
        keep = len(weights)
        while keep > 1 and tail[keep - 1] <= budget:
            keep -= 1
        error = float(np.sqrt(tail[keep] / total)) if keep < len(weights) else 0.0
        factors = tuple(np.column_stack([c[i] for i in order[:keep]]) for c in cols)
        return cls.from_factors(weights[:keep], factors, error)

    @property
    def rank(self) -> int:
        return int(self.weights.size)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(f.shape[0] for f in self.factors)

    def full(self) -> np.ndarray:
        U, V, W = self.factors
        return np.einsum("r,ir,jr,kr->ijk", self.weights, U, V, W, optimize=True)

    def inner(self, other: "CanonicalTensor") -> float:
        grams = [a.T @ b for a, b in zip(self.factors, other.factors)]
        return float(self.weights @ (grams[0] * grams[1] * grams[2]) @ other.weights)

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def scaled(self, alpha: float) -> "CanonicalTensor":
        return CanonicalTensor.from_factors(self.weights * alpha, self.factors, self.error)

    def __add__(self, other: "CanonicalTensor") -> "CanonicalTensor":
        if self.dims != other.dims:
            raise DimensionMismatchError(f"{self.dims} vs {other.dims}")
        return CanonicalTensor.from_factors(
            np.concatenate([self.weights, other.weights]),
            [np.hstack([a, b]) for a, b in zip(self.factors, other.factors)],
        )


@dataclass
class TensorOperator:
    """sum_t M^x_t (x) M^y_t (x) M^z_t with 1-D matrices per axis"""
    terms: List[Tuple[np.ndarray, np.ndarray, np.ndarray]]
    dims: Tuple[int, int, int]
    accuracy: float = 0.0
    achieved: bool = True
    kind: str = "general"

    @property
    def rank(self) -> int:
        return len(self.terms)

    def dense(self) -> np.ndarray:
        N = int(np.prod(self.dims))
        out = np.zeros((N, N))
        for Mx, My, Mz in self.terms:
            out += np.kron(Mx, np.kron(My, Mz))
        return out

    def apply_dense(self, v: np.ndarray) -> np.ndarray:
        X = np.asarray(v, dtype=float).reshape(self.dims)
        out = np.zeros(self.dims)
        for Mx, My, Mz in self.terms:
            out += np.einsum("ai,bj,ck,ijk->abc", Mx, My, Mz, X, optimize=True)
        return out.reshape(-1)


def tensor_matvec(op: TensorOperator, x: CanonicalTensor) -> CanonicalTensor:
    """Exact product; rank of the result is op.rank * x.rank before normalization"""
    if op.dims != x.dims:
        raise DimensionMismatchError(f"operator dims {op.dims} != tensor dims {x.dims}")
    if op.rank == 0 or x.rank == 0:
        return CanonicalTensor.zeros(x.dims)
    U, V, W = x.factors
    blocks = [[], [], []]
    for Mx, My, Mz in op.terms:
        blocks[0].append(Mx @ U)
        blocks[1].append(My @ V)
        blocks[2].append(Mz @ W)
    weights = np.tile(x.weights, op.rank)
    factors = [np.hstack(b) for b in blocks]
    out = CanonicalTensor(weights, tuple(factors))
    return out


def normalize(x: CanonicalTensor) -> CanonicalTensor:
    return CanonicalTensor.from_factors(x.weights, x.factors, x.error)


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------

def merge_parallel_terms(x: CanonicalTensor, tol: float = 1e-12) -> CanonicalTensor:
    """Combine terms whose three factor columns are parallel"""
    x = normalize(x)
    kept_w: List[float] = []
    kept: List[List[np.ndarray]] = []
    for r in range(x.rank):
        cols = [f[:, r] for f in x.factors]
        for idx, other in enumerate(kept):
            dots = [float(a @ b) for a, b in zip(cols, other)]
            if all(abs(abs(d) - 1.0) <= tol for d in dots):
                kept_w[idx] += x.weights[r] * float(np.prod(np.sign(dots)))
                break
        else:
            kept.append(cols)
            kept_w.append(float(x.weights[r]))
    if not kept:
        return CanonicalTensor.zeros(x.dims)
    factors = [np.column_stack([k[a] for k in kept]) for a in range(3)]
    return CanonicalTensor.from_factors(kept_w, factors, x.error)


def _relative_error(x: CanonicalTensor, y: CanonicalTensor, x_norm2: float) -> float:
    diff2 = x_norm2 - 2.0 * x.inner(y) + y.inner(y)
    return float(np.sqrt(max(diff2, 0.0) / x_norm2)) if x_norm2 > 0 else 0.0


def _als(x: CanonicalTensor, rank: int, rng: np.random.Generator, sweeps: int, ridge: float = 1e-14) -> CanonicalTensor:
    """Alternating least squares for a rank-`rank` fit of a canonical tensor"""
    X = [f * 1.0 for f in x.factors]
    lam = x.weights
    seeds = min(rank, x.rank)
    Y = []
    for f in X:
        cols = f[:, :seeds]
        if rank > seeds:
            cols = np.hstack([cols, rng.standard_normal((f.shape[0], rank - seeds))])
        Y.append(cols + 1e-3 * rng.standard_normal(cols.shape))
    Y[0] = Y[0] * np.concatenate([lam[:seeds], np.ones(rank - seeds)])[None, :]
    x_norm2 = x.inner(x)
    previous = np.inf
    result = None
    for _ in range(sweeps):
        for mode in range(3):
            a, b = [m for m in range(3) if m != mode]
            rhs = X[mode] @ (lam[:, None] * ((X[a].T @ Y[a]) * (X[b].T @ Y[b])))
            G = (Y[a].T @ Y[a]) * (Y[b].T @ Y[b]) + ridge * np.eye(rank)
            Y[mode] = sla.solve(G, rhs.T, assume_a="pos").T
        result = CanonicalTensor.from_factors(np.ones(rank), Y)
        err = _relative_error(x, result, x_norm2)
        if abs(previous - err) < 1e-15 or err < 1e-14:
            break
        previous = err
    result.error = _relative_error(x, result, x_norm2)
    return result


def compress(
    x: CanonicalTensor,
    tol: float,
    R_max: int,
    seed: int = 0,
    restarts: int = 3,
    sweeps: int = 500,
) -> CanonicalTensor:
    """
    Lowest rank <= R_max whose ALS fit reaches relative error tol; the best
    fit found is returned with its error when tol is out of reach.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    merged = merge_parallel_terms(x)
    if merged.rank == 0:
        return merged
    rng = np.random.default_rng(seed)
    x_norm2 = merged.inner(merged)
    best: Optional[CanonicalTensor] = None
    for rank in range(1, min(R_max, merged.rank) + 1):
        if rank == merged.rank:
            candidate = CanonicalTensor.from_factors(merged.weights, merged.factors)
            candidate.error = 0.0
        else:
            candidate = min((_als(merged, rank, rng, sweeps) for _ in range(restarts)), key=lambda t: t.error)
        if best is None or candidate.error < best.error:
            best = candidate
        if candidate.error <= tol:
            best = candidate
            break
    logger.debug("tensor compressed", extra={"input_rank": x.rank, "rank": best.rank, "error": best.error})
    # error is relative to the input, merging is exact
    best.error = _relative_error(merged, best, x_norm2)
    return best


# ---------------------------------------------------------------------------
# Operators in tensor form
# ---------------------------------------------------------------------------

def circulant_1d(column: np.ndarray) -> np.ndarray:
    return sla.circulant(column)


def _stencil_1d(table: Dict[int, float], n: int) -> np.ndarray:
    col = np.zeros(n)
    for d, value in table.items():
        col[(-d) % n] += value
    return circulant_1d(col)


def _dense_cp(X: np.ndarray, tol: float, R_max: int, seed: int) -> Tuple[CanonicalTensor, bool]:
    start = CanonicalTensor.from_dense(X, 0.0)
    result = compress(start, tol, R_max, seed=seed)
    return result, result.error <= tol


def decompose_operator(kind: str, source, tol: float = 1e-6, R_max: int = 6, seed: int = 0) -> TensorOperator:
    """
    Tensor form of a grid operator.

    kind:
        kinetic_A: source = (overlap_1d, kinetic_1d, dims) tables; exact 3-term sum
        coulomb_T: source = ThreeLevelCirculant; CP fit of its generator gives
                   Kronecker products of 1-D circulants
        nuclear_B: source = (dense B, dims); CP fit of the (ii', jj', kk') reshaping
    """
    if kind == "kinetic_A":
        overlap_1d, kinetic_1d, dims = source
        terms = []
        for axis in range(3):
            mats = [_stencil_1d(kinetic_1d if a == axis else overlap_1d, n) for a, n in enumerate(dims)]
            terms.append(tuple(mats))
        return TensorOperator(terms, tuple(dims), 0.0, True, kind)
    if kind == "coulomb_T":
        dims = source.dims
        cp, ok = _dense_cp(np.asarray(source.generator).real, tol, R_max, seed)
        terms = [
            (cp.weights[r] * circulant_1d(cp.factors[0][:, r]), circulant_1d(cp.factors[1][:, r]), circulant_1d(cp.factors[2][:, r]))
            for r in range(cp.rank)
        ]
        logger.info("coulomb operator decomposed", extra={"rank": cp.rank, "error": cp.error})
        return TensorOperator(terms, dims, cp.error, ok, kind)
    if kind == "nuclear_B":
        B, dims = source
        ni, nj, nk = dims
        X = np.asarray(B).reshape(ni, nj, nk, ni, nj, nk).transpose(0, 3, 1, 4, 2, 5).reshape(ni * ni, nj * nj, nk * nk)
        cp, ok = _dense_cp(X, tol, R_max, seed)
        terms = [
            (cp.weights[r] * cp.factors[0][:, r].reshape(ni, ni), cp.factors[1][:, r].reshape(nj, nj), cp.factors[2][:, r].reshape(nk, nk))
            for r in range(cp.rank)
        ]
        logger.info("nuclear operator decomposed", extra={"rank": cp.rank, "error": cp.error})
        return TensorOperator(terms, tuple(dims), cp.error, ok, kind)
    raise UnknownModeError(f"unknown operator kind {kind!r}")


# ---------------------------------------------------------------------------
# Orbital storage and checkpoints
# ---------------------------------------------------------------------------

def orthonormalize_tensors(tensors: Sequence[CanonicalTensor], tol: float, R_max: int) -> List[CanonicalTensor]:
    """Loewdin orthonormalization through the m x m Gram matrix of the tensors"""
    m = len(tensors)
    G = np.array([[a.inner(b) for b in tensors] for a in tensors])
    L = sla.fractional_matrix_power(G, -0.5).real
    out = []
    for i in range(m):
        combo = CanonicalTensor.zeros(tensors[0].dims)
        for j in range(m):
            if L[j, i] != 0.0:
                combo = combo + tensors[j].scaled(L[j, i])
        out.append(CanonicalTensor.from_dense(combo.full(), tol) if combo.rank > R_max else combo)
    return out


@dataclass
class TensorStorage:
    """Keeps SCF orbitals in canonical form between outer iterations"""
    dims: Tuple[int, int, int]
    tol: float = 1e-8
    R_max: int = 64
    ranks: List[List[int]] = field(default_factory=list)
    tensors: List[CanonicalTensor] = field(default_factory=list)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        tensors = [CanonicalTensor.from_dense(X[:, i].reshape(self.dims), self.tol) for i in range(X.shape[1])]
        tensors = [t if t.rank <= self.R_max else compress(t, self.tol, self.R_max) for t in tensors]
        tensors = orthonormalize_tensors(tensors, self.tol, self.R_max)
        self.tensors = tensors
        self.ranks.append([t.rank for t in tensors])
        return np.column_stack([t.full().reshape(-1) for t in tensors])

    @property
    def peak_rank(self) -> int:
        return max((max(r) for r in self.ranks if r), default=0)


def save_checkpoint(path: Union[str, Path], tensors: Sequence[CanonicalTensor]) -> None:
    """HFCT: magic, version, count, then per tensor dims, R, weights and factors (LE f64)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for t in tensors:
            fh.write(struct.pack("<IIII", *t.dims, t.rank))
            fh.write(t.weights.astype("<f8").tobytes())
            for f in t.factors:
                fh.write(np.ascontiguousarray(f).astype("<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> List[CanonicalTensor]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        offset = 12
        out = []
        for _ in range(count):
            ni, nj, nk, rank = struct.unpack_from("<IIII", data, offset)
            offset += 16
            weights = np.frombuffer(data, dtype="<f8", count=rank, offset=offset).copy()
            offset += 8 * rank
            factors = []
            for n in (ni, nj, nk):
                factors.append(np.frombuffer(data, dtype="<f8", count=n * rank, offset=offset).reshape(n, rank).copy())
                offset += 8 * n * rank
            out.append(CanonicalTensor(weights, tuple(factors)))
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return out
