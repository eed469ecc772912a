# core/eigensolver.py
"""
Davidson eigensolver with circulant preconditioning, and the SCF outer loop.

Each Davidson iteration applies the operator twice (residual and new search
direction) and keeps only the search basis, never its image under A.
Several eigenpairs are found one after another, each orthogonalized against
the already converged vectors.
"""

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla

from core.errors import SingularSpectrumError, StagnationError, UnknownModeError
from core.fock_operator import EnergyBreakdown, FockOperator, OrbitalSet, fit_rank1_repulsion
from core.logging_setup import get_logger
from core.structured_matrix import ThreeLevelCirculant, circulant_apply_function

logger = get_logger("eigensolver")

GUARD = 1e-12
GUARD_SHIFT = 1e-10


class PreconditionerKind(Enum):
    KINETIC_INVERSE = "kinetic_inverse"
    CIRCULANT_FIT = "circulant_fit"


@dataclass
class Preconditioner:
    """
    Circulant approximation C of the operator; applies (C - nu I)^-1 through
    its spectrum. A spectral value within the guard of nu shifts nu down once.
    """
    kind: PreconditionerKind
    circulant: ThreeLevelCirculant
    fit_ratio: float = 0.0
    guard: float = GUARD
    guard_shift: float = GUARD_SHIFT
    shifts: int = 0

    def solve(self, r: np.ndarray, nu: float) -> np.ndarray:
        lam = np.asarray(self.circulant.eigenvalues()).real
        if np.min(np.abs(lam - nu)) < self.guard:
            nu -= self.guard_shift
            self.shifts += 1
            logger.debug("preconditioner shift applied", extra={"nu": nu})
        gap = lam - nu
        closest = int(np.argmin(np.abs(gap)))
        if abs(gap.ravel()[closest]) < self.guard:
            raise SingularSpectrumError(complex(lam.ravel()[closest]), closest)
        return circulant_apply_function(self.circulant, lambda values: 1.0 / (values.real - nu), r)

    def condition_number(self, nu: float = 0.0) -> float:
        gap = np.abs(np.asarray(self.circulant.eigenvalues()).real - nu)
        return float(gap.max() / gap.min())


def _overlap_transformed(op: FockOperator, circulant: ThreeLevelCirculant) -> ThreeLevelCirculant:
    """S^-1/2 C S^-1/2 as a circulant (all factors share the Fourier basis)"""
    if op.identity_overlap:
        return circulant
    lam_S = np.asarray(op.S.eigenvalues()).real
    return circulant.function(lambda lam: lam.real / lam_S)


def build_preconditioner(
    kind: str,
    op: FockOperator,
    z: Optional[np.ndarray] = None,
    m: int = 1,
    rank1=None,
    guard: float = GUARD,
    guard_shift: float = GUARD_SHIFT,
) -> Preconditioner:
    """
    kinetic_inverse: C = (2/h^2) A.
    circulant_fit: the Frobenius-closest circulant to
        (2/h^2) A - (4/h) B + (4/h) alpha diag(z) + (4/h) beta (2m - 1) I,
    i.e. the diagonal averages of each term; the ratio ||M - C||_F / ||C||_F is recorded.
    """
    try:
        kind_enum = PreconditionerKind(kind)
    except ValueError as exc:
        raise UnknownModeError(f"unknown preconditioner {kind!r}") from exc
    h = op.h
    dims = op.dims
    N = op.system.N
    kinetic_gen = 2.0 / h ** 2 * op.system.kinetic.generator(dims)
    if kind_enum == PreconditionerKind.KINETIC_INVERSE:
        C = ThreeLevelCirculant(dims, kinetic_gen)
        return Preconditioner(kind_enum, _overlap_transformed(op, C), guard=guard, guard_shift=guard_shift)

    rank1 = rank1 or op.rank1 or fit_rank1_repulsion(op.T_density)
    z = np.zeros(N) if z is None else np.asarray(z, dtype=float).reshape(-1)
    charges = np.asarray(op.system.nuclei.charges, dtype=float)
    gen = kinetic_gen.copy()
    deviation2 = 0.0
    for band, arr in op.system.nuclear.bands.items():
        total = np.zeros(dims)
        for q, idx in zip(charges, op.system.nuclei.indices):
            total += q * np.roll(arr, tuple(idx), axis=(0, 1, 2))
        band_values = -4.0 / h * total
        if band == (0, 0, 0):
            band_values = band_values + 4.0 / h * rank1.alpha * z.reshape(dims)
        mean = float(band_values.mean())
        deviation2 += float(np.sum((band_values - mean) ** 2))
        gen[tuple((-b) % n for b, n in zip(band, dims))] += mean
    gen[0, 0, 0] += 4.0 / h * rank1.beta * (2 * m - 1)
    C = ThreeLevelCirculant(dims, gen)
    norm_C = float(np.sqrt(N * np.sum(gen ** 2)))
    ratio = float(np.sqrt(deviation2) / norm_C) if norm_C > 0 else 0.0
    logger.info("circulant preconditioner fitted", extra={"ratio": ratio, "N": N})
    return Preconditioner(kind_enum, _overlap_transformed(op, C), fit_ratio=ratio, guard=guard, guard_shift=guard_shift)


# ---------------------------------------------------------------------------
# Davidson
# ---------------------------------------------------------------------------

@dataclass
class DavidsonResult:
    nu: float
    psi: np.ndarray
    iterations: int
    matvecs: int
    residual: float
    log: List[Dict[str, float]] = field(default_factory=list)
    peak_vectors: int = 0


def _orthogonalize(q: np.ndarray, basis: Sequence[np.ndarray], passes: int = 2) -> np.ndarray:
    """Modified Gram-Schmidt, repeated"""
    for _ in range(passes):
        for b in basis:
            q = q - (b @ q) * b
    return q


def davidson(
    apply_A: Callable[[np.ndarray], np.ndarray],
    P: Preconditioner,
    psi0: np.ndarray,
    eps: float = 1e-8,
    maxspace: int = 30,
    locked: Optional[Sequence[np.ndarray]] = None,
    max_iterations: int = 10000,
    outer_index: int = 0,
) -> DavidsonResult:
    """
    Smallest eigenpair of a symmetric operator in the complement of `locked`.

    Args:
        apply_A: operator action on a vector
        P: circulant preconditioner
        psi0: start vector, normalized and orthogonal to the locked set
        eps: residual norm at which the iteration stops
        maxspace: search-space size that triggers a restart from the current vector
        locked: already converged eigenvectors
        outer_index: tag written to the iteration log

    Returns:
        DavidsonResult with the eigenpair and the per-iteration log
    """
    locked = list(locked or [])
    psi = _orthogonalize(np.asarray(psi0, dtype=float).copy(), locked)
    psi /= np.linalg.norm(psi)
    start = time.perf_counter()

    Q: List[np.ndarray] = [psi]
    H = np.zeros((1, 1))
    nu: Optional[float] = None
    log: List[Dict[str, float]] = []
    matvecs = 0
    best = np.inf
    since_best = 0
    peak = len(locked) + 4

    for iteration in range(1, max_iterations + 1):
        A_psi = apply_A(psi)
        matvecs += 1
        if nu is None:
            nu = float(psi @ A_psi)
            H[0, 0] = nu
        r = A_psi - nu * psi
        res = float(np.linalg.norm(r))
        log.append({"outer": outer_index, "inner": iteration, "nu": nu, "residual": res, "wall": time.perf_counter() - start})
        if res < eps:
            return DavidsonResult(nu, psi, iteration, matvecs, res, log, peak)
        if res < best:
            best, since_best = res, 0
        else:
            since_best += 1
            if since_best >= 3 * maxspace:
                raise StagnationError(iteration, log)

        q = P.solve(r, nu)
        q = _orthogonalize(q, locked + Q)
        norm = np.linalg.norm(q)
        if norm < 1e-14:
            # preconditioned residual already in the search space: restart on psi
            Q, H = [psi], np.array([[nu]])
            q = _orthogonalize(r.copy(), locked + Q)
            norm = np.linalg.norm(q)
            if norm < 1e-14:
                return DavidsonResult(nu, psi, iteration, matvecs, res, log, peak)
        q /= norm
        A_q = apply_A(q)
        matvecs += 1
        column = np.array([b @ A_q for b in Q])
        k = len(Q)
        H_new = np.zeros((k + 1, k + 1))
        H_new[:k, :k] = H
        H_new[:k, k] = column
        H_new[k, :k] = column
        H_new[k, k] = q @ A_q
        H = H_new
        Q.append(q)
        peak = max(peak, len(Q) + len(locked) + 3)

        values, vectors = sla.eigh(H)
        nu = float(values[0])
        alpha = vectors[:, 0]
        psi = np.sum([a * b for a, b in zip(alpha, Q)], axis=0)
        psi /= np.linalg.norm(psi)

        if len(Q) > maxspace:
            Q, H = [psi], np.array([[nu]])
    raise StagnationError(max_iterations, log)


def lowest_eigenpairs(
    apply_A: Callable[[np.ndarray], np.ndarray],
    P: Preconditioner,
    starts: np.ndarray,
    eps: float,
    maxspace: int,
    outer_index: int = 0,
) -> Tuple[np.ndarray, np.ndarray, List[DavidsonResult]]:
    """Sequential deflation: the k-th pair is sought orthogonal to the first k - 1"""
    locked: List[np.ndarray] = []
    values, results = [], []
    for k in range(starts.shape[1]):
        start = _orthogonalize(starts[:, k].copy(), locked)
        if np.linalg.norm(start) < 1e-10:
            start = _orthogonalize(np.random.default_rng(k).standard_normal(starts.shape[0]), locked)
        result = davidson(apply_A, P, start / np.linalg.norm(start), eps, maxspace, locked, outer_index=outer_index)
        locked.append(result.psi)
        values.append(result.nu)
        results.append(result)
    order = np.argsort(values)
    vectors = np.column_stack(locked)[:, order]
    return np.asarray(values)[order], vectors, [results[i] for i in order]


# ---------------------------------------------------------------------------
# SCF outer loop
# ---------------------------------------------------------------------------

@dataclass
class ScfSettings:
    inner_tol: float = 1e-8
    outer_tol: float = 1e-8
    max_outer: int = 100
    maxspace: int = 30
    warm_start: bool = False
    warm_max_outer: int = 50
    mixing: float = 0.0
    preconditioner: str = "circulant_fit"
    seed: int = 0
    guard: float = GUARD
    guard_shift: float = GUARD_SHIFT


@dataclass
class ScfState:
    iteration: int = 0
    energy_history: List[float] = field(default_factory=list)
    delta_energy: float = float("inf")
    max_residual: float = float("inf")
    inner_iterations: int = 0
    warm_inner_iterations: int = 0
    peak_vectors: int = 0
    converged: bool = False
    log: List[Dict[str, float]] = field(default_factory=list)
    eigenvalues: Optional[np.ndarray] = None

    def log_tsv(self) -> str:
        lines = ["outer\tinner\tnu\tresidual\twall"]
        for row in self.log:
            lines.append(f"{row['outer']}\t{row['inner']}\t{row['nu']:.16e}\t{row['residual']:.6e}\t{row['wall']:.6f}")
        return "\n".join(lines) + "\n"


class _Coordinates:
    """Maps raw coefficients to the orthonormal frame x = S^1/2 c and back"""

    def __init__(self, op: FockOperator):
        self.op = op
        self.identity = op.identity_overlap

    def to_raw(self, x: np.ndarray) -> np.ndarray:
        if self.identity:
            return x
        return circulant_apply_function(self.op.S, lambda lam: lam.real ** -0.5, x)

    def from_raw(self, c: np.ndarray) -> np.ndarray:
        if self.identity:
            return c
        return circulant_apply_function(self.op.S, lambda lam: lam.real ** 0.5, c)

    def operator(self, apply_raw: Callable[[np.ndarray], np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
        if self.identity:
            return apply_raw
        return lambda x: self.to_raw(apply_raw(self.to_raw(x)))


def _initial_vectors(N: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, m)) + 1.0
    q, _ = np.linalg.qr(X)
    return q


def _linear_step(op: FockOperator, coords: _Coordinates, P: Preconditioner, m: int, settings: ScfSettings, state: ScfState) -> np.ndarray:
    h = op.h

    def apply_linear(c):
        return 2.0 / h ** 2 * op.apply_kinetic(c) - 4.0 / h * op.apply_nuclear(c)

    values, X, results = lowest_eigenpairs(coords.operator(apply_linear), P, _initial_vectors(op.system.N, m, settings.seed), settings.inner_tol, settings.maxspace)
    _record(state, results, 0)
    return X


def _record(state: ScfState, results: List[DavidsonResult], outer: int, warm: bool = False) -> None:
    for res in results:
        state.log.extend(res.log)
        if warm:
            state.warm_inner_iterations += res.iterations
        else:
            state.inner_iterations += res.iterations
        state.peak_vectors = max(state.peak_vectors, res.peak_vectors)
    state.max_residual = max((res.residual for res in results), default=0.0)


def _outer_loop(
    op: FockOperator,
    coords: _Coordinates,
    X: np.ndarray,
    settings: ScfSettings,
    state: ScfState,
    max_outer: int,
    warm: bool = False,
    storage: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray, bool]:
    m = X.shape[1]
    energy = op.energy(OrbitalSet(coords.to_raw(X))).total
    state.energy_history.append(energy)
    previous_bound = None
    values = np.zeros(m)
    for outer in range(1, max_outer + 1):
        raw = coords.to_raw(X)
        bound = op.fock_apply(OrbitalSet(raw))
        if settings.mixing > 0 and previous_bound is not None and bound.T_rho is not None:
            bound.T_rho = (1.0 - settings.mixing) * previous_bound.T_rho + settings.mixing * bound.T_rho
            logger.info("potential mixing applied", extra={"weight": settings.mixing, "outer": outer})
        previous_bound = bound
        z = np.sum(raw ** 2, axis=1)
        P = build_preconditioner(settings.preconditioner, op, z=z, m=m, guard=settings.guard, guard_shift=settings.guard_shift)
        values, X_new, results = lowest_eigenpairs(coords.operator(bound), P, X, settings.inner_tol, settings.maxspace, outer_index=outer)
        _record(state, results, outer, warm)
        X = storage(X_new) if storage is not None else X_new
        energy = op.energy(OrbitalSet(coords.to_raw(X))).total
        state.delta_energy = abs(energy - state.energy_history[-1])
        state.energy_history.append(energy)
        state.iteration += 1
        logger.info(
            "scf outer step",
            extra={"outer": outer, "energy": energy, "delta": state.delta_energy, "mode": op.model.name if op.model else "none", "warm": warm},
        )
        if state.delta_energy < settings.outer_tol and state.max_residual < settings.inner_tol:
            return X, values, True
    return X, values, False


def scf_solve(
    op: FockOperator,
    m: int,
    settings: Optional[ScfSettings] = None,
    storage: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[OrbitalSet, EnergyBreakdown, ScfState]:
    """
    Fixed-point SCF: start from the lowest eigenvectors of the one-electron
    operator, then repeatedly solve F(previous orbitals) c = eps c.

    With warm_start the rank-1 repulsion problem is converged first and its
    orbitals start the full problem. Non-convergence is reported through
    ScfState.converged, not raised. A storage callable (for example
    TensorStorage) receives the orthonormal-frame orbitals after every outer
    step and returns their stored approximation.
    """
    settings = settings or ScfSettings()
    if m > op.system.N:
        raise ValueError(f"m = {m} exceeds N = {op.system.N}")
    coords = _Coordinates(op)
    state = ScfState()
    P0 = build_preconditioner("kinetic_inverse", op, guard=settings.guard, guard_shift=settings.guard_shift)
    X = _linear_step(op, coords, P0, m, settings, state)

    if settings.warm_start and op.model is not None:
        warm_op = FockOperator(op.system, "rank1", deterministic=op.deterministic, band_crossover=op.kinetic_op.crossover)
        warm_state = ScfState()
        X, _, warm_ok = _outer_loop(warm_op, coords, X, settings, warm_state, settings.warm_max_outer, warm=True)
        state.warm_inner_iterations = warm_state.warm_inner_iterations
        state.log.extend(warm_state.log)
        logger.info("warm start finished", extra={"converged": warm_ok, "inner_iterations": warm_state.warm_inner_iterations})

    X, values, converged = _outer_loop(op, coords, X, settings, state, settings.max_outer, storage=storage)
    state.converged = converged
    state.eigenvalues = values
    orbitals = OrbitalSet(coords.to_raw(X), eps=values)
    energies = op.energy(orbitals)
    if not converged:
        logger.warning("scf did not converge", extra={"iterations": state.iteration, "delta": state.delta_energy})
    return orbitals, energies, state
