# core/fock_operator.py
"""
Closed-shell Hartree-Fock functional on a structured basis.

Energies, gradients and Fock actions are evaluated through the pair-product
map H(c) x and a circulant Coulomb operator T; the four-index tensor is never
formed. Orbitals are real coefficient vectors (all operators are real symmetric).

Energy:  E = (1/h^2) sum c^T A c - (2/h) sum c^T B c
             + (1/h) [2 sum_sq rho_s^T T rho_q - sum_sq rho_sq^T T rho_sq]
with rho_s = H(c_s) c_s and rho_sq = H(c_q) c_s.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from core.errors import (
    DimensionMismatchError,
    InvalidGridError,
    NonOrthonormalFrameError,
    UnknownModeError,
    UnsupportedBasisError,
)
from core.grid import BasisFamily, BasisMode, GridSpec, NucleusList, wrap_signed
from core.integral_engine import (
    FourCenterTable,
    IntegralEngine,
    NuclearTable,
    StencilTable,
    build_density_coulomb_table,
    build_four_center_table,
    build_nuclear_W,
    build_stencils,
    cell_product_factors,
)
from core.logging_setup import get_logger
from core.structured_matrix import (
    BAND_CROSSOVER,
    BandOperator,
    BlockCirculant,
    ThreeLevelCirculant,
    apply_B,
    apply_H,
    apply_H_adjoint,
    circulant_apply_function,
    shift_view,
)

logger = get_logger("fock_operator")


class RepulsionMode(Enum):
    EXACT = "exact"
    REFINED = "refined"
    NEGLECT_RESIDUAL = "neglect_residual"
    RANK1 = "rank1"
    NONE = "none"

    @classmethod
    def parse(cls, text: str) -> Tuple["RepulsionMode", int]:
        """'exact', 'rank1', 'refined(4)' ... -> (mode, refinement factor)"""
        text = text.strip().lower()
        if text.startswith("refined"):
            inner = text[len("refined"):].strip("() ")
            return cls.REFINED, int(inner or 2)
        try:
            return cls(text), 1
        except ValueError as exc:
            raise UnknownModeError(f"unknown repulsion mode {text!r}; expected one of {[m.value for m in cls]}") from exc


@dataclass
class OrbitalSet:
    """m real orbitals stored column-wise, with eigenvalue estimates"""
    coeffs: np.ndarray  # (N, m)
    eps: Optional[np.ndarray] = None
    storage: str = "dense"

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[0] < self.coeffs.shape[1]:
            raise DimensionMismatchError(f"m = {self.coeffs.shape[1]} exceeds N = {self.coeffs.shape[0]}")
        if self.eps is not None:
            self.eps = np.asarray(self.eps, dtype=float)

    @property
    def m(self) -> int:
        return self.coeffs.shape[1]

    @property
    def N(self) -> int:
        return self.coeffs.shape[0]

    def column(self, i: int) -> np.ndarray:
        return self.coeffs[:, i]

    def gram(self, metric: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
        rhs = self.coeffs if metric is None else metric(self.coeffs)
        return self.coeffs.T @ rhs

    def orthonormality_error(self, metric: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
        return float(np.abs(self.gram(metric) - np.eye(self.m)).max())


@dataclass
class EnergyBreakdown:
    kinetic: float
    nuclear: float
    electron: float
    mode: str
    nuclear_repulsion: float = 0.0

    @property
    def total(self) -> float:
        return self.kinetic + self.nuclear + self.electron

    @property
    def total_with_nuclear_repulsion(self) -> float:
        return self.total + self.nuclear_repulsion

    def report_lines(self) -> List[str]:
        rows = [
            ("T_e", self.kinetic),
            ("V_en", self.nuclear),
            ("V_ee", self.electron),
            ("E", self.total),
            ("V_nn", self.nuclear_repulsion),
            ("E_total", self.total_with_nuclear_repulsion),
        ]
        return [f"{name}\t{value:.16e}\t{self.mode}" for name, value in rows]

    def to_dict(self) -> Dict[str, object]:
        return {
            "T_e": self.kinetic,
            "V_en": self.nuclear,
            "V_ee": self.electron,
            "E": self.total,
            "V_nn": self.nuclear_repulsion,
            "E_total": self.total_with_nuclear_repulsion,
            "mode": self.mode,
        }


@dataclass
class Rank1Repulsion:
    """T ~ alpha I + beta u u^T with u the all-ones vector"""
    alpha: float
    beta: float
    ratio: float
    norm: str = "frobenius"

    def apply(self, y: np.ndarray) -> np.ndarray:
        return self.alpha * y + self.beta * np.sum(y, axis=(-3, -2, -1), keepdims=True)

    def closed_form_energy(self, coeffs: np.ndarray, h: float) -> float:
        """(1/h)(alpha z.z + beta (2m - 1) m), z = sum_s c_s^2; exact for orthonormal sets"""
        z = np.sum(coeffs ** 2, axis=1)
        m = coeffs.shape[1]
        return float((self.alpha * z @ z + self.beta * (2 * m - 1) * m) / h)


def fit_rank1_repulsion(T: ThreeLevelCirculant, norm: str = "frobenius") -> Rank1Repulsion:
    """
    Closest alpha I + beta u u^T to a circulant T. u u^T has eigenvalue N on the
    zero frequency and 0 elsewhere, so beta absorbs the zero-frequency mismatch
    and alpha is fitted to the remaining eigenvalues.
    """
    lam = np.asarray(T.eigenvalues()).real.ravel()
    N = lam.size
    rest = lam[1:]
    if norm == "frobenius":
        alpha = float(rest.mean()) if rest.size else float(lam[0])
        residual = float(np.sqrt(np.sum((rest - alpha) ** 2)))
        scale = float(np.sqrt(np.sum(lam ** 2)))
    elif norm == "spectral":
        alpha = float(0.5 * (rest.max() + rest.min())) if rest.size else float(lam[0])
        residual = float(np.max(np.abs(rest - alpha))) if rest.size else 0.0
        scale = float(np.max(np.abs(lam)))
    else:
        raise UnknownModeError(f"unknown fit norm {norm!r}")
    beta = float((lam[0] - alpha) / N)
    ratio = residual / scale if scale > 0 else 0.0
    logger.info("rank-1 repulsion fit", extra={"alpha": alpha, "beta": beta, "ratio": ratio, "norm": norm})
    return Rank1Repulsion(alpha, beta, ratio, norm)


# ---------------------------------------------------------------------------
# Product models: how orbital products reach the Coulomb operator
# ---------------------------------------------------------------------------

def refinement_matrix(n: int, K: int, p: int) -> np.ndarray:
    """Values at the K-times finer periodic grid of a 1-D coefficient vector"""
    M = np.zeros((n * K, n))
    for j in range(n * K):
        i, r = divmod(j, K)
        if p == 0:
            M[j, i] = 1.0
        else:
            theta = r / K
            M[j, i] += 1.0 - theta
            M[j, (i + 1) % n] += theta
    return M


@dataclass
class ProductModel:
    """
    Pair map H, its adjoint and the Coulomb action on pair space.
    Energies and gradients are written once against this interface.
    """
    name: str
    pair: Callable[[np.ndarray, np.ndarray], np.ndarray]
    pair_adjoint: Callable[[np.ndarray, np.ndarray], np.ndarray]
    coulomb: Callable[[np.ndarray], np.ndarray]


def _nodal_model(name: str, dims, coulomb: Callable[[np.ndarray], np.ndarray]) -> ProductModel:
    def pair(c, x):
        return (c * x).reshape((1,) + tuple(dims))

    def adjoint(c, y):
        return c * y.reshape(-1)

    return ProductModel(name, pair, adjoint, coulomb)


def _refined_model(dims, K: int, p: int, coulomb: Callable[[np.ndarray], np.ndarray]) -> ProductModel:
    mats = [refinement_matrix(n, K, p) for n in dims]
    fine = tuple(n * K for n in dims)

    def up(v):
        return np.einsum("ai,bj,ck,ijk->abc", mats[0], mats[1], mats[2], v.reshape(dims), optimize=True)

    def down(y):
        return np.einsum("ai,bj,ck,abc->ijk", mats[0], mats[1], mats[2], y, optimize=True).reshape(-1)

    def pair(c, x):
        return (up(c) * up(x)).reshape((1,) + fine)

    def adjoint(c, y):
        return down(up(c) * y.reshape(fine))

    return ProductModel(f"refined({K})", pair, adjoint, coulomb)


# ---------------------------------------------------------------------------
# System and operator
# ---------------------------------------------------------------------------

@dataclass
class HartreeFockSystem:
    """Grid, basis, nuclei and every integral table an SCF run needs"""
    grid: GridSpec
    basis: BasisFamily
    nuclei: NucleusList
    overlap: StencilTable
    kinetic: StencilTable
    nuclear: NuclearTable
    coulomb: Optional[FourCenterTable] = None
    density_coulomb: Optional[FourCenterTable] = None
    engine: Optional[IntegralEngine] = field(default=None, repr=False)
    fine_tables: Dict[int, FourCenterTable] = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        grid: GridSpec,
        basis: BasisFamily,
        nuclei: NucleusList,
        eta: float,
        drop_tol: float = 0.0,
        calibration: Optional[Dict[int, Dict[str, object]]] = None,
        exact_pairs: bool = True,
    ) -> "HartreeFockSystem":
        if not grid.periodic:
            raise InvalidGridError("the Hartree-Fock operator needs a periodic grid")
        if grid.p != basis.p:
            raise UnsupportedBasisError(f"grid half-width {grid.p} does not match basis degree {basis.degree}")
        nuclei.validate(grid)
        engine = IntegralEngine(basis, eta, calibration)
        S, A = build_stencils(grid, basis)
        W = build_nuclear_W(grid, basis, eta, drop_tol, engine)
        density = build_density_coulomb_table(grid.dims, basis, eta, engine)
        if basis.degree == 0:
            coulomb = density
        else:
            coulomb = build_four_center_table(grid, basis, eta, engine) if exact_pairs else None
        logger.info("system assembled", extra={"grid": grid.describe(), "nuclei": len(nuclei), "engine": dict(engine.stats)})
        return cls(grid, basis, nuclei, S, A, W, coulomb, density, engine)

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def N(self) -> int:
        return self.grid.N

    def fine_density_table(self, K: int) -> FourCenterTable:
        if K == 1:
            return self.density_coulomb
        if K not in self.fine_tables:
            fine = tuple(n * K for n in self.grid.dims)
            self.fine_tables[K] = build_density_coulomb_table(fine, self.basis, self.engine.eta, self.engine)
        return self.fine_tables[K]

    def nuclear_repulsion(self) -> float:
        total = 0.0
        for s in range(len(self.nuclei)):
            for t in range(s + 1, len(self.nuclei)):
                d = np.array(self.nuclei.indices[s]) - np.array(self.nuclei.indices[t])
                d = wrap_signed(d, np.array(self.grid.dims))
                total += self.nuclei.charges[s] * self.nuclei.charges[t] / (self.h * float(np.linalg.norm(d)))
        return total


class FockOperator:
    """
    Energy, gradient and Fock action for one repulsion mode.

    Orbitals are raw coefficients, orthonormal in the overlap metric S. The
    Fock action F v is the derivative of E with respect to one orbital, so the
    orbital gradient is F c_i - eps_i S c_i.

    With deterministic set, every scalar reduction is an exactly rounded
    math.fsum and the band/FFT choice uses a fixed crossover, so reruns agree
    bit for bit.
    """

    def __init__(
        self,
        system: HartreeFockSystem,
        mode: str = "exact",
        rank1: Optional[Rank1Repulsion] = None,
        rank1_norm: str = "frobenius",
        deterministic: bool = False,
        band_crossover: Optional[float] = None,
    ):
        self.system = system
        self.mode, self.refinement = RepulsionMode.parse(mode) if isinstance(mode, str) else (mode, 1)
        self.dims = system.grid.dims
        self.h = system.h
        self.deterministic = deterministic
        if deterministic and band_crossover is None:
            band_crossover = BAND_CROSSOVER
        self.kinetic_op = BandOperator.from_stencil(system.kinetic, self.dims, crossover=band_crossover)
        self.S = ThreeLevelCirculant.from_stencil(system.overlap, self.dims)
        self.identity_overlap = len(system.overlap) == 1 and system.overlap.entries.get((0, 0, 0)) == 1.0
        self.T_density = ThreeLevelCirculant(self.dims, system.density_coulomb.block_generators()[0, 0])
        self.rank1 = rank1
        if self.mode == RepulsionMode.RANK1 and self.rank1 is None:
            self.rank1 = fit_rank1_repulsion(self.T_density, rank1_norm)
        self.model = self._product_model()

    def _product_model(self) -> Optional[ProductModel]:
        p = self.system.basis.p
        dims = self.dims
        if self.mode == RepulsionMode.NONE:
            return None
        if self.mode == RepulsionMode.EXACT:
            if p == 0:
                return _nodal_model("exact", dims, self.T_density.matvec)
            if self.system.coulomb is None:
                raise UnsupportedBasisError("exact mode needs the four-center pair table")
            T = BlockCirculant.from_table(self.system.coulomb)
            return ProductModel(
                "exact",
                lambda c, x: apply_H(c, x, 1, dims),
                lambda c, y: apply_H_adjoint(c, y, 1, dims),
                T.matvec,
            )
        if self.mode == RepulsionMode.NEGLECT_RESIDUAL:
            return _nodal_model("neglect_residual", dims, self.T_density.matvec)
        if self.mode == RepulsionMode.RANK1:
            return _nodal_model("rank1", dims, self.rank1.apply)
        if self.mode == RepulsionMode.REFINED:
            K = self.refinement
            table = self.system.fine_density_table(K)
            fine = ThreeLevelCirculant(table.dims, table.block_generators()[0, 0] * float(K) ** -5)
            return _refined_model(dims, K, p, fine.matvec)
        raise UnknownModeError(self.mode)

    # --- one-electron parts -------------------------------------------------

    def apply_kinetic(self, v: np.ndarray) -> np.ndarray:
        return self.kinetic_op.apply(v)

    def apply_nuclear(self, v: np.ndarray) -> np.ndarray:
        return apply_B(self.system.nuclei, self.system.nuclear, v)

    def apply_overlap(self, v: np.ndarray) -> np.ndarray:
        if self.identity_overlap:
            return np.array(v, dtype=float, copy=True)
        return self.S.matvec(v)

    def _inner(self, a: np.ndarray, b: np.ndarray) -> float:
        if self.deterministic:
            return math.fsum((np.asarray(a) * np.asarray(b)).ravel())
        return float(np.sum(a * b))

    def _total(self, values: Sequence[float]) -> float:
        return math.fsum(values) if self.deterministic else float(sum(values))

    def kinetic_energy(self, orbitals: OrbitalSet) -> float:
        c = orbitals.coeffs
        return self._inner(c, self.apply_kinetic(c)) / self.h ** 2

    def nuclear_energy(self, orbitals: OrbitalSet) -> float:
        c = orbitals.coeffs
        return -2.0 * self._inner(c, self.apply_nuclear(c)) / self.h

    # --- electron repulsion -------------------------------------------------

    def _densities(self, c: np.ndarray) -> np.ndarray:
        model = self.model
        return sum(model.pair(c[:, s], c[:, s]) for s in range(c.shape[1]))

    def electron_energy(self, orbitals: OrbitalSet) -> float:
        """(1/h)[2 J - K] over all orbital pairs, summed in a fixed order"""
        if self.model is None:
            return 0.0
        c = orbitals.coeffs
        model = self.model
        rho = self._densities(c)
        coulomb = self._inner(rho, model.coulomb(rho))
        terms = []
        m = c.shape[1]
        for s in range(m):
            for q in range(s, m):
                rho_sq = model.pair(c[:, q], c[:, s])
                value = self._inner(rho_sq, model.coulomb(rho_sq))
                terms.append(value if s == q else 2.0 * value)
        return (2.0 * coulomb - self._total(terms)) / self.h

    def energy(self, orbitals: OrbitalSet) -> EnergyBreakdown:
        return EnergyBreakdown(
            kinetic=self.kinetic_energy(orbitals),
            nuclear=self.nuclear_energy(orbitals),
            electron=self.electron_energy(orbitals),
            mode=self.model.name if self.model else "none",
            nuclear_repulsion=self.system.nuclear_repulsion(),
        )

    # --- derivatives --------------------------------------------------------

    def fock_apply(self, orbitals: OrbitalSet) -> "BoundFock":
        """The Fock operator v -> F v of the given orbitals, as a callable"""
        return BoundFock(self, orbitals.coeffs)

    def rayleigh_quotients(self, orbitals: OrbitalSet) -> np.ndarray:
        bound = self.fock_apply(orbitals)
        c = orbitals.coeffs
        num = np.array([self._inner(c[:, i], bound(c[:, i])) for i in range(orbitals.m)])
        den = np.array([self._inner(c[:, i], self.apply_overlap(c[:, i])) for i in range(orbitals.m)])
        return num / den

    def gradient(self, orbitals: OrbitalSet) -> np.ndarray:
        """dE_i = F c_i - eps_i S c_i; eps defaults to the current Rayleigh quotients"""
        eps = orbitals.eps if orbitals.eps is not None else self.rayleigh_quotients(orbitals)
        bound = self.fock_apply(orbitals)
        c = orbitals.coeffs
        out = np.empty_like(c)
        for i in range(orbitals.m):
            out[:, i] = bound.apply(c[:, i]) - eps[i] * self.apply_overlap(c[:, i])
        return out

    def hessian_matvec_p0(self, orbitals: OrbitalSet, x: np.ndarray) -> np.ndarray:
        """Second derivative of E - sum_i eps_i/2 (c_i^T c_i - 1) applied to x, indicator basis only"""
        if self.system.basis.p != 0:
            raise UnsupportedBasisError("the orbital Hessian is available for the indicator basis only")
        c = orbitals.coeffs
        eps = orbitals.eps if orbitals.eps is not None else self.rayleigh_quotients(orbitals)
        x = np.asarray(x, dtype=float).reshape(c.shape)
        h = self.h
        out = 2.0 / h ** 2 * self.apply_kinetic(x) - 4.0 / h * self.apply_nuclear(x) - x * eps[None, :]
        if self.model is None:
            return out
        model = self.model
        rho = self._densities(c)
        T_rho = model.coulomb(rho)
        d_rho = 2.0 * sum(model.pair(c[:, s], x[:, s]) for s in range(c.shape[1]))
        T_drho = model.coulomb(d_rho)
        m = c.shape[1]
        for i in range(m):
            acc = 2.0 * model.pair_adjoint(x[:, i], T_rho) + 2.0 * model.pair_adjoint(c[:, i], T_drho)
            for q in range(m):
                acc -= model.pair_adjoint(x[:, q], model.coulomb(model.pair(c[:, q], c[:, i])))
                acc -= model.pair_adjoint(c[:, q], model.coulomb(model.pair(x[:, q], c[:, i])))
                acc -= model.pair_adjoint(c[:, q], model.coulomb(model.pair(c[:, q], x[:, i])))
            out[:, i] += 4.0 / h * acc
        return out


class BoundFock:
    """Fock action for fixed orbitals; the Coulomb potential is computed once"""

    def __init__(self, op: FockOperator, coeffs: np.ndarray):
        self.op = op
        self.coeffs = coeffs
        model = op.model
        self.T_rho = model.coulomb(op._densities(coeffs)) if model is not None else None

    def apply(self, v: np.ndarray) -> np.ndarray:
        op = self.op
        h = op.h
        out = 2.0 / h ** 2 * op.apply_kinetic(v) - 4.0 / h * op.apply_nuclear(v)
        if op.model is None:
            return out
        model = op.model
        acc = 2.0 * model.pair_adjoint(v, self.T_rho)
        for q in range(self.coeffs.shape[1]):
            cq = self.coeffs[:, q]
            acc = acc - model.pair_adjoint(cq, model.coulomb(model.pair(cq, v)))
        return out + 4.0 / h * acc

    __call__ = apply


def rank1_gradient(orbitals: OrbitalSet, op: FockOperator) -> np.ndarray:
    """
    Closed-form gradient of the rank-1 repulsion model for orthonormal orbitals:
    (2/h^2) A c - (4/h) B c + (4/h) alpha z*c_i + (4/h) beta (2m - 1) c_i - eps_i c_i.
    """
    if op.rank1 is None:
        raise UnknownModeError("rank1_gradient needs an operator in rank1 mode")
    c = orbitals.coeffs
    h = op.h
    m = c.shape[1]
    eps = orbitals.eps if orbitals.eps is not None else op.rayleigh_quotients(orbitals)
    z = np.sum(c ** 2, axis=1)
    linear = 2.0 / h ** 2 * op.apply_kinetic(c) - 4.0 / h * op.apply_nuclear(c)
    repulsion = 4.0 / h * (op.rank1.alpha * z[:, None] * c + op.rank1.beta * (2 * m - 1) * c)
    return linear + repulsion - c * eps[None, :]


# ---------------------------------------------------------------------------
# Complement-subspace form of the energy
# ---------------------------------------------------------------------------

@dataclass
class ComplementEnergy:
    constant: float
    complement: float

    @property
    def total(self) -> float:
        return self.constant + self.complement


def complement_energy(op: FockOperator, frame: np.ndarray, m: int) -> ComplementEnergy:
    """
    Energy of the leading m vectors of an orthonormal frame, written through the
    trailing N - m vectors: P = I - Q with Q the complement projector.

    E(I - Q) = E(I) - [tr(hQ) + 4 J(I, Q) - 2 K(I, Q)] + [2 J(Q, Q) - K(Q, Q)]
    """
    frame = np.asarray(frame, dtype=float)
    N = frame.shape[0]
    if frame.shape != (N, N):
        raise DimensionMismatchError(f"frame must be square, got {frame.shape}")
    if not op.identity_overlap:
        raise UnsupportedBasisError("the complement form needs an orthonormal basis")
    deviation = float(np.abs(frame.T @ frame - np.eye(N)).max())
    if deviation > 1e-8:
        raise NonOrthonormalFrameError(deviation)
    h = op.h
    Q = frame[:, m:]
    model = op.model

    def one_electron(v):
        return op.apply_kinetic(v) / h ** 2 - 2.0 / h * op.apply_nuclear(v)

    eye_diag = np.eye(N)
    trace_h = float(np.trace(one_electron(eye_diag)))
    trace_hQ = float(np.sum(Q * one_electron(Q))) if Q.size else 0.0
    constant = trace_h
    complement = -trace_hQ
    if model is not None:
        rho_I = model.pair(np.ones(N), np.ones(N))
        T_rho_I = model.coulomb(rho_I)
        J_II = float(np.sum(rho_I * T_rho_I))

        def exchange_identity(v):
            # sum_a H(e_a)^T T H(e_a) v, a pointwise map for nodal products
            return np.array([model.pair_adjoint(e, model.coulomb(model.pair(e, v))) for e in eye_diag]).sum(axis=0)

        K_I = float(np.trace(np.array([exchange_identity(e) for e in eye_diag])))
        constant += (2.0 * J_II - K_I) / h
        if Q.size:
            rho_Q = sum(model.pair(Q[:, i], Q[:, i]) for i in range(Q.shape[1]))
            J_IQ = float(np.sum(T_rho_I * rho_Q))
            K_IQ = float(sum(Q[:, i] @ exchange_identity(Q[:, i]) for i in range(Q.shape[1])))
            J_QQ = float(np.sum(rho_Q * model.coulomb(rho_Q)))
            K_QQ = 0.0
            for i in range(Q.shape[1]):
                for j in range(Q.shape[1]):
                    pair = model.pair(Q[:, j], Q[:, i])
                    K_QQ += float(np.sum(pair * model.coulomb(pair)))
            complement += (-4.0 * J_IQ + 2.0 * K_IQ + 2.0 * J_QQ - K_QQ) / h
    return ComplementEnergy(constant, complement)


# ---------------------------------------------------------------------------
# Product projection onto the basis
# ---------------------------------------------------------------------------

# per-axis expansion of the two corner hats of a cell in the product types (LL, LR, RR)
_CORNER_IN_TYPES = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])


@dataclass
class ProductProjection:
    xi: np.ndarray        # nodal coefficients of the projected product
    residual: np.ndarray  # per-cell residual in product-type coordinates, (T, dims)
    p: int

    def residual_at(self, points: np.ndarray) -> np.ndarray:
        """Residual psi*phi - xi at points given in unit grid coordinates"""
        return evaluate_pair_space(self.residual, self.p, points)


def evaluate_pair_space(coeffs: np.ndarray, p: int, points: np.ndarray) -> np.ndarray:
    """Evaluate a function given by cell/product-type coefficients at points (unit coordinates)"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dims = coeffs.shape[1:]
    out = np.zeros(len(points))
    pieces, _ = cell_product_factors(p)
    for idx, point in enumerate(points):
        if p == 0:
            cell = tuple(int(np.floor(x + 0.5)) % n for x, n in zip(point, dims))
            out[idx] = coeffs[(0,) + cell]
            continue
        base = np.floor(point).astype(int)
        local = point - base - 0.5
        cell = tuple(int(b) % n for b, n in zip(base, dims))
        per_axis = [np.array([f(np.array([x]))[0] for f in pieces]) for x in local]
        values = np.einsum("a,b,c->abc", *per_axis).reshape(-1)
        out[idx] = float(values @ coeffs[(slice(None),) + cell])
    return out


def project_product_to_grid(a: np.ndarray, b: np.ndarray, basis: BasisFamily, dims: Sequence[int]) -> ProductProjection:
    """
    Nodal interpolation xi of the product of two expansions, plus the residual.
    Indicator products are exact; hat products leave a residual living inside
    each cell that vanishes at every node.
    """
    dims = tuple(dims)
    if basis.p not in (0, 1):
        raise UnsupportedBasisError(f"degree {basis.degree}")
    ag = np.asarray(a, dtype=float).reshape(dims)
    bg = np.asarray(b, dtype=float).reshape(dims)
    xi = ag * bg
    if basis.p == 0:
        return ProductProjection(xi.reshape(-1), np.zeros((1,) + dims), 0)
    products = apply_H(ag, bg, 1, dims)
    interp = np.zeros_like(products)
    for o in np.ndindex(2, 2, 2):
        weights = np.einsum("a,b,c->abc", _CORNER_IN_TYPES[o[0]], _CORNER_IN_TYPES[o[1]], _CORNER_IN_TYPES[o[2]]).reshape(-1)
        interp += weights[:, None, None, None] * shift_view(xi, o)[None]
    return ProductProjection(xi.reshape(-1), products - interp, 1)


# ---------------------------------------------------------------------------
# Norm ratios of the operator terms
# ---------------------------------------------------------------------------

@dataclass
class NormRatioReport:
    n: int
    N: int
    h: float
    frobenius_kinetic_nuclear: float
    frobenius_kinetic_repulsion: float
    spectral_kinetic_nuclear: float
    spectral_kinetic_repulsion: float

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def _nuclear_bands(system: HartreeFockSystem) -> Dict[Tuple[int, int, int], np.ndarray]:
    bands = {}
    for band, arr in system.nuclear.bands.items():
        total = np.zeros(system.grid.dims)
        for q, idx in zip(system.nuclei.charges, system.nuclei.indices):
            total += q * np.roll(arr, tuple(idx), axis=(0, 1, 2))
        bands[band] = total
    return bands


def norm_ratio_diagnostics(system: HartreeFockSystem) -> NormRatioReport:
    """
    Frobenius and spectral ratios of the kinetic term against the nuclear
    attraction and against the Coulomb potential of a uniform unit density.
    """
    h = system.h
    N = system.N
    dims = system.grid.dims
    A = ThreeLevelCirculant.from_stencil(system.kinetic, dims)
    lam_A = np.abs(A.eigenvalues()) / h ** 2
    kin_fro2 = float(np.sum(lam_A ** 2))
    kin_2 = float(lam_A.max())

    bands = _nuclear_bands(system)
    nuc_fro2 = float(sum(np.sum(arr ** 2) for arr in bands.values())) / h ** 2
    operator = LinearOperator((N, N), matvec=lambda v: apply_B(system.nuclei, system.nuclear, v) / h, dtype=float)
    if N > 2:
        nuc_2 = float(np.abs(eigsh(operator, k=1, which="LM", return_eigenvectors=False, tol=1e-8)[0]))
    else:
        nuc_2 = float(np.abs(np.linalg.eigvalsh(np.column_stack([operator.matvec(e) for e in np.eye(N)]))).max())

    T = ThreeLevelCirculant(dims, system.density_coulomb.block_generators()[0, 0])
    # potential of the uniform density 1/N per function: a multiple of the identity
    potential = float(np.sum(T.generator)) / (N * h)
    rep_fro2 = N * potential ** 2
    rep_2 = abs(potential)

    def ratio(num, den):
        return float("inf") if den == 0 else num / den

    return NormRatioReport(
        n=int(round(N ** (1.0 / 3.0))),
        N=N,
        h=h,
        frobenius_kinetic_nuclear=ratio(kin_fro2, nuc_fro2),
        frobenius_kinetic_repulsion=ratio(kin_fro2, rep_fro2),
        spectral_kinetic_nuclear=ratio(kin_2, nuc_2),
        spectral_kinetic_repulsion=ratio(kin_2, rep_2),
    )


def log_log_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
