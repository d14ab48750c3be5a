"""Mixed Dirichlet-Neumann boundary value problems via the block boundary system.

Unknowns are ``g1`` (P1 on interior-Γ₂ vertices, the missing Dirichlet trace)
and ``g2`` (P0 on Γ₁ panels, the missing Neumann trace). The block system is

    [[K21, -S11], [D22, -K*12]] (g1, g2) = (F, G)

tested with P0 on Γ₁ and with the P1 hats of interior-Γ₂ vertices.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from app.services.errors import NearSingularError, ProblemDefinitionError, SolverError
from app.services.geometry import BoundaryPartition, SurfaceMesh
from app.services.kernels import WaveNumber
from app.services.operators import (
    DensityVector,
    OperatorMatrix,
    Space,
    VolumeSourceSpec,
    assemble_operators,
    l2_norm,
    mass_matrix_sparse,
    newton_potential_eval,
    newton_potential_gradient,
    newton_traces,
    restrict,
    restrict_block,
    zero_extend,
)
from app.services.potentials import (
    check_points,
    double_layer_gradient,
    double_layer_potential,
    single_layer_gradient,
    single_layer_potential,
)
from app.services.quadrature import QuadratureSettings

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
RATIO_GUARD = 1e-30


class Side(str, Enum):
    INTERIOR = "interior"
    EXTERIOR = "exterior"

    @property
    def sign(self) -> int:
        return 1 if self is Side.INTERIOR else -1


@dataclass(frozen=True, eq=False)
class MixedProblem:
    """Dirichlet data f1 on Γ₁, Neumann data f2 on Γ₂, optional volume source (interior only)."""

    mesh: SurfaceMesh
    partition: BoundaryPartition
    wavenumber: WaveNumber
    side: Side
    f1: DensityVector
    f2: DensityVector
    volume: VolumeSourceSpec = field(default_factory=VolumeSourceSpec)

    def __post_init__(self):
        self.partition.require_mixed()
        if self.partition.labels.shape[0] != self.mesh.num_triangles:
            raise ProblemDefinitionError("partition does not belong to this mesh")
        object.__setattr__(self, "side", Side(self.side))
        if not isinstance(self.wavenumber, WaveNumber):
            object.__setattr__(self, "wavenumber", WaveNumber(self.wavenumber))
        object.__setattr__(self, "f1", self._coerce(self.f1, Space.P1_GAMMA1))
        object.__setattr__(self, "f2", self._coerce(self.f2, Space.P0_GAMMA2))
        if self.side is Side.EXTERIOR and not self.volume.is_empty:
            raise ProblemDefinitionError("exterior problems take no volume source")
        lam = self.wavenumber.value
        if lam.imag == 0 and lam.real != 0:
            logger.warning(
                f"Real wavenumber λ={self.wavenumber}: unique solvability is only guaranteed for "
                "Im(λ) > 0 or λ = 0; watch the condition estimate"
            )

    def _coerce(self, d: DensityVector, space: Space) -> DensityVector:
        if d.space is space:
            if d.dofs.shape[0] != self.partition_dofs(space).shape[0]:
                raise ProblemDefinitionError(f"{space.value} data have the wrong number of dofs")
            return d
        if d.space.parent is not space.parent:
            raise ProblemDefinitionError(f"expected {space.value} data, got {d.space.value}")
        return restrict(d, space, self.mesh, self.partition)

    def partition_dofs(self, space: Space) -> np.ndarray:
        return DensityVector.zeros(space, self.mesh, self.partition).dofs

    @classmethod
    def homogeneous(cls, mesh, partition, wavenumber, side=Side.INTERIOR) -> "MixedProblem":
        return cls(
            mesh=mesh,
            partition=partition,
            wavenumber=wavenumber,
            side=side,
            f1=DensityVector.zeros(Space.P1_GAMMA1, mesh, partition),
            f2=DensityVector.zeros(Space.P0_GAMMA2, mesh, partition),
        )

    def with_data(self, f1=None, f2=None, volume=None) -> "MixedProblem":
        return replace(
            self,
            f1=self.f1 if f1 is None else f1,
            f2=self.f2 if f2 is None else f2,
            volume=self.volume if volume is None else volume,
        )

    def scaled(self, factor: complex) -> "MixedProblem":
        return replace(
            self, f1=self.f1.scaled(factor), f2=self.f2.scaled(factor), volume=self.volume.scaled(factor)
        )


@dataclass(frozen=True, eq=False)
class CauchyData:
    phi: DensityVector
    psi: DensityVector


@dataclass(frozen=True, eq=False)
class BoundaryOperators:
    """S, K, K*, D on the whole of Γ plus the sparse mixed mass matrix."""

    S: OperatorMatrix
    K: OperatorMatrix
    Kstar: OperatorMatrix
    D: OperatorMatrix
    mass_mixed: object

    @classmethod
    def assemble(
        cls,
        mesh: SurfaceMesh,
        wavenumber,
        settings: Optional[QuadratureSettings] = None,
        threads: Optional[int] = None,
        dof_cap: Optional[int] = None,
    ) -> "BoundaryOperators":
        ops = assemble_operators(mesh, wavenumber, ("S", "K", "Kstar", "D"), settings, threads, dof_cap)
        return cls(ops["S"], ops["K"], ops["Kstar"], ops["D"], mass_matrix_sparse(mesh, "mixed"))

    @property
    def wavenumber(self) -> WaveNumber:
        return self.S.wavenumber


@dataclass(frozen=True, eq=False)
class BlockOperator:
    K21: np.ndarray
    S11: np.ndarray
    D22: np.ndarray
    Kstar12: np.ndarray

    def __post_init__(self):
        n1, n2 = self.K21.shape
        if self.S11.shape != (n1, n1) or self.D22.shape != (n2, n2) or self.Kstar12.shape != (n2, n1):
            raise SolverError(
                f"inconsistent block shapes K21{self.K21.shape} S11{self.S11.shape} "
                f"D22{self.D22.shape} K*12{self.Kstar12.shape}"
            )

    @classmethod
    def from_blocks(cls, K21, S11, D22, Kstar12) -> "BlockOperator":
        return cls(*(np.atleast_2d(np.asarray(b, dtype=complex)) for b in (K21, S11, D22, Kstar12)))

    @property
    def n_gamma1(self) -> int:
        return self.S11.shape[0]

    @property
    def n_interior(self) -> int:
        return self.D22.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return np.block([[self.K21, -self.S11], [self.D22, -self.Kstar12]])

    def apply(self, g1, g2) -> Tuple[np.ndarray, np.ndarray]:
        g1 = np.asarray(g1, dtype=complex)
        g2 = np.asarray(g2, dtype=complex)
        return self.K21 @ g1 - self.S11 @ g2, self.D22 @ g1 - self.Kstar12 @ g2

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[: self.n_interior], x[self.n_interior :]


def assemble_block_A(problem: MixedProblem, operators: BoundaryOperators) -> BlockOperator:
    mesh, partition = problem.mesh, problem.partition
    return BlockOperator(
        K21=restrict_block(operators.K, Space.P0_GAMMA1, Space.P1_INTERIOR_GAMMA2, mesh, partition).entries,
        S11=restrict_block(operators.S, Space.P0_GAMMA1, Space.P0_GAMMA1, mesh, partition).entries,
        D22=restrict_block(
            operators.D, Space.P1_INTERIOR_GAMMA2, Space.P1_INTERIOR_GAMMA2, mesh, partition
        ).entries,
        Kstar12=restrict_block(
            operators.Kstar, Space.P1_INTERIOR_GAMMA2, Space.P0_GAMMA1, mesh, partition
        ).entries,
    )


def build_rhs(problem: MixedProblem, operators: BoundaryOperators) -> Tuple[np.ndarray, np.ndarray]:
    """Galerkin loads (F on Γ₁ panels, G on interior-Γ₂ vertices).

    F = -s/2 M f1° - K f1° + S f2° [+ M γ_D N h]
    G = -s/2 Mᵀ f2° - D f1° + K* f2° [+ Mᵀ γ_N N h]
    with s = +1 inside and -1 outside.
    """
    if operators.wavenumber != problem.wavenumber:
        raise ProblemDefinitionError(
            f"operators were assembled for λ={operators.wavenumber}, problem has λ={problem.wavenumber}"
        )
    partition = problem.partition
    half = 0.5 * problem.side.sign
    mass = operators.mass_mixed
    f1 = zero_extend(problem.f1).coefficients
    f2 = zero_extend(problem.f2).coefficients

    F = -half * (mass @ f1) - operators.K.entries @ f1 + operators.S.entries @ f2
    G = -half * (mass.T @ f2) - operators.D.entries @ f1 + operators.Kstar.entries @ f2
    if problem.side is Side.INTERIOR and not problem.volume.is_empty:
        dirichlet, neumann = newton_traces(problem.volume, problem.wavenumber, problem.mesh)
        F = F + mass @ dirichlet.coefficients
        G = G + mass.T @ neumann.coefficients
    return F[partition.gamma1_triangles], G[partition.interior_gamma2_vertices]


def _condition(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 1.0
    with np.errstate(all="ignore"):
        value = float(np.linalg.cond(matrix, 1))
    return value if np.isfinite(value) else float("inf")


def _checked_lu(matrix: np.ndarray, name: str):
    cond = _condition(matrix)
    if cond > CONDITION_LIMIT:
        raise NearSingularError(
            f"{name} is near-singular (1-norm condition ≈ {cond:.3g}); λ² may be close to an eigenvalue",
            condition_estimate=cond,
        )
    return lu_factor(matrix, check_finite=False), cond


class SchurFactors:
    """LU factors of D22 and of H = S11 - K21 D22⁻¹ K*12, reusable across right-hand sides."""

    def __init__(self, A: BlockOperator):
        self.A = A
        self.d22_lu, self.d22_condition = _checked_lu(A.D22, "D22")
        H = A.S11 - A.K21 @ lu_solve(self.d22_lu, A.Kstar12)
        self.h_lu, self.h_condition = _checked_lu(H, "Schur complement H")

    def solve(self, F, G) -> Tuple[np.ndarray, np.ndarray]:
        F = np.asarray(F, dtype=complex)
        G = np.asarray(G, dtype=complex)
        g2 = lu_solve(self.h_lu, self.A.K21 @ lu_solve(self.d22_lu, G) - F)
        g1 = lu_solve(self.d22_lu, self.A.Kstar12 @ g2 + G)
        return g1, g2


class MonolithicFactors:
    def __init__(self, A: BlockOperator):
        self.A = A
        matrix = A.matrix
        self.condition = _condition(matrix)
        lu, piv = lu_factor(matrix, check_finite=False)
        if np.any(np.abs(np.diag(lu)) == 0.0):
            raise SolverError("block matrix is exactly singular")
        self.lu = (lu, piv)

    def solve(self, F, G) -> Tuple[np.ndarray, np.ndarray]:
        rhs = np.concatenate([np.asarray(F, dtype=complex), np.asarray(G, dtype=complex)])
        return self.A.split(lu_solve(self.lu, rhs))


def solve_schur(A: BlockOperator, F, G) -> Tuple[np.ndarray, np.ndarray]:
    """g2 = H⁻¹(K21 D22⁻¹ G - F), g1 = D22⁻¹(K*12 g2 + G)."""
    return SchurFactors(A).solve(F, G)


def solve_monolithic(A: BlockOperator, F, G) -> Tuple[np.ndarray, np.ndarray]:
    return MonolithicFactors(A).solve(F, G)


def relative_residual(A: BlockOperator, g1, g2, F, G) -> float:
    rF, rG = A.apply(g1, g2)
    residual = np.linalg.norm(np.concatenate([rF - F, rG - G]))
    scale = np.linalg.norm(np.concatenate([F, G]))
    return float(residual / scale) if scale > 0 else float(residual)


def _relative_gap(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    gap = np.linalg.norm(a - b)
    return float(gap / scale) if scale > 0 else float(gap)


def make_cauchy(problem: MixedProblem, g1, g2) -> CauchyData:
    """φ = f1° + g̃1, ψ = f2° + g̃2."""
    mesh, partition = problem.mesh, problem.partition
    g1 = DensityVector.on(Space.P1_INTERIOR_GAMMA2, g1, mesh, partition)
    g2 = DensityVector.on(Space.P0_GAMMA1, g2, mesh, partition)
    phi = zero_extend(problem.f1).coefficients + zero_extend(g1).coefficients
    psi = zero_extend(problem.f2).coefficients + zero_extend(g2).coefficients
    return CauchyData(
        phi=DensityVector.on(Space.P1, phi, mesh),
        psi=DensityVector.on(Space.P0, psi, mesh),
    )


def evaluate(problem: MixedProblem, cauchy: CauchyData, points, threads=None, check: bool = True) -> np.ndarray:
    """Representation formula: N h - 𝕂φ + 𝕊ψ inside, 𝕂φ - 𝕊ψ outside."""
    mesh, lam = problem.mesh, problem.wavenumber
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return np.zeros(0, dtype=complex)
    if check:
        check_points(mesh, pts, problem.side.value)
    layers = single_layer_potential(mesh, lam, cauchy.psi, pts, threads=threads) - double_layer_potential(
        mesh, lam, cauchy.phi, pts, threads=threads
    )
    if problem.side is Side.EXTERIOR:
        return -layers
    if not problem.volume.is_empty:
        layers = layers + newton_potential_eval(problem.volume, lam, pts)
    return layers


def evaluate_gradient(
    problem: MixedProblem, cauchy: CauchyData, points, threads=None, check: bool = True, include_volume: bool = True
) -> np.ndarray:
    """∇u from the representation formula, shape (n, 3)."""
    mesh, lam = problem.mesh, problem.wavenumber
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return np.zeros((0, 3), dtype=complex)
    if check:
        check_points(mesh, pts, problem.side.value)
    layers = single_layer_gradient(mesh, lam, cauchy.psi, pts, threads=threads) - double_layer_gradient(
        mesh, lam, cauchy.phi, pts, threads=threads
    )
    if problem.side is Side.EXTERIOR:
        return -layers
    if include_volume and not problem.volume.is_empty:
        layers = layers + newton_potential_gradient(problem.volume, lam, pts)
    return layers


@dataclass(frozen=True, eq=False)
class SolveReport:
    g1: DensityVector
    g2: DensityVector
    cauchy: CauchyData
    schur_residual: float
    path_discrepancy: Optional[float]
    condition_estimate: float
    stability_ratio: float
    method: str = "schur"
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.schur_residual < 1e-8


def stability_ratio(problem: MixedProblem, cauchy: CauchyData) -> float:
    """(‖φ‖ + ‖ψ‖) / (‖f1‖_{Γ₁} + ‖f2‖_{Γ₂} + ‖h‖_TV), L² norms standing in for the trace norms."""
    mesh, partition = problem.mesh, problem.partition
    numerator = l2_norm(mesh, cauchy.phi) + l2_norm(mesh, cauchy.psi)
    denominator = (
        l2_norm(mesh, problem.f1, partition.gamma1_triangles)
        + l2_norm(mesh, problem.f2, partition.gamma2_triangles)
        + problem.volume.total_variation
    )
    return float(numerator / (denominator + RATIO_GUARD))


class MixedSolver:
    """Assembled operators and factorizations for one (mesh, partition, λ, side).

    Every call to :meth:`solve` reuses them, so sequences of right-hand sides
    cost one assembly.
    """

    def __init__(
        self,
        mesh: SurfaceMesh,
        partition: BoundaryPartition,
        wavenumber,
        side=Side.INTERIOR,
        settings: Optional[QuadratureSettings] = None,
        threads: Optional[int] = None,
        dof_cap: Optional[int] = None,
        operators: Optional[BoundaryOperators] = None,
    ):
        self.mesh = mesh
        self.partition = partition
        self.side = Side(side)
        self.wavenumber = wavenumber if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber)
        self.threads = threads
        self.timings: Dict[str, float] = {}
        partition.require_mixed()

        start = time.perf_counter()
        self.operators = operators or BoundaryOperators.assemble(mesh, self.wavenumber, settings, threads, dof_cap)
        self.timings["assembly"] = time.perf_counter() - start

        start = time.perf_counter()
        template = MixedProblem.homogeneous(mesh, partition, self.wavenumber, self.side)
        self.A = assemble_block_A(template, self.operators)
        self.monolithic = MonolithicFactors(self.A)
        try:
            self.schur: Optional[SchurFactors] = SchurFactors(self.A)
        except NearSingularError as e:
            logger.warning(f"Schur path unavailable ({e}); falling back to the monolithic solve")
            self.schur = None
        self.timings["factorization"] = time.perf_counter() - start
        logger.info(
            f"Block system {self.A.matrix.shape} ready: {self.A.n_interior} interior-Γ₂ unknowns, "
            f"{self.A.n_gamma1} Γ₁ unknowns, cond₁ ≈ {self.monolithic.condition:.3g}"
        )

    def problem(self, f1=None, f2=None, volume=None) -> MixedProblem:
        base = MixedProblem.homogeneous(self.mesh, self.partition, self.wavenumber, self.side)
        return base.with_data(f1=f1, f2=f2, volume=volume)

    def solve(self, problem: MixedProblem) -> SolveReport:
        if problem.mesh is not self.mesh or problem.side is not self.side:
            raise ProblemDefinitionError("problem does not match the solver's mesh and side")
        timings = dict(self.timings)
        start = time.perf_counter()
        F, G = build_rhs(problem, self.operators)
        timings["rhs"] = time.perf_counter() - start

        start = time.perf_counter()
        mono = self.monolithic.solve(F, G)
        if self.schur is not None:
            g1, g2 = self.schur.solve(F, G)
            discrepancy = _relative_gap(np.concatenate([g1, g2]), np.concatenate(mono))
            method = "schur"
        else:
            g1, g2 = mono
            discrepancy = None
            method = "monolithic"
        timings["solve"] = time.perf_counter() - start

        residual = relative_residual(self.A, g1, g2, F, G)
        cauchy = make_cauchy(problem, g1, g2)
        ratio = stability_ratio(problem, cauchy)
        report = SolveReport(
            g1=DensityVector.on(Space.P1_INTERIOR_GAMMA2, g1, self.mesh, self.partition),
            g2=DensityVector.on(Space.P0_GAMMA1, g2, self.mesh, self.partition),
            cauchy=cauchy,
            schur_residual=residual,
            path_discrepancy=discrepancy,
            condition_estimate=self.monolithic.condition,
            stability_ratio=ratio,
            method=method,
            timings=timings,
        )
        gap = "n/a" if discrepancy is None else f"{discrepancy:.2e}"
        logger.info(f"Solved ({method}): residual {residual:.2e}, path discrepancy {gap}")
        if not report.succeeded:
            logger.warning(f"Block residual {residual:.2e} is above 1e-8")
        return report


def solve_mixed_problem(
    problem: MixedProblem,
    settings: Optional[QuadratureSettings] = None,
    threads: Optional[int] = None,
    dof_cap: Optional[int] = None,
) -> SolveReport:
    solver = MixedSolver(
        problem.mesh, problem.partition, problem.wavenumber, problem.side, settings, threads, dof_cap
    )
    return solver.solve(problem)
