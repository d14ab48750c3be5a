"""Radon-measure sources: mollification, approximating solves and their diagnostics.

Atoms are replaced by the quartic bump ``C (1 - r²/ε²)²`` sampled on a local
lattice of spacing ε/8 centred at the atom and normalised to unit discrete
mass. For λ = 0 the Newton potential of the continuous bump is known in
closed form (it equals the atom's potential outside the support), which is
what observation points and grid diagnostics use.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.services.errors import MeasureError
from app.services.geometry import SurfaceMesh, distance_to_surface, is_inside
from app.services.kernels import M_INV_4PI
from app.services.operators import VolumeSourceSpec
from app.services.solver import MixedProblem, MixedSolver, Side, SolveReport, evaluate, evaluate_gradient

logger = logging.getLogger(__name__)

LATTICE_STEPS = 8
LEVELS_PER_OCTAVE = 8
OCTAVES = 48
CRITICAL_Q = 1.5


@dataclass(frozen=True, eq=False)
class MeasureData:
    """Finite measure: real atoms plus an optional density sampled with volume weights."""

    atom_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    atom_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    density_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        ap = np.asarray(self.atom_points, dtype=float).reshape(-1, 3)
        aw = np.asarray(self.atom_weights, dtype=float).reshape(-1)
        dp = np.asarray(self.density_points, dtype=float).reshape(-1, 3)
        dw = np.asarray(self.density_weights, dtype=float).reshape(-1)
        dv = np.asarray(self.density_values, dtype=float).reshape(-1)
        if ap.shape[0] != aw.shape[0]:
            raise MeasureError("every atom needs exactly one weight")
        if not (dp.shape[0] == dw.shape[0] == dv.shape[0]):
            raise MeasureError("density samples need matching points, weights and values")
        if not (np.all(np.isfinite(aw)) and np.all(np.isfinite(dv)) and np.all(np.isfinite(dw))):
            raise MeasureError("measure weights and density values must be finite")
        for name, arr in (
            ("atom_points", ap),
            ("atom_weights", aw),
            ("density_points", dp),
            ("density_weights", dw),
            ("density_values", dv),
        ):
            object.__setattr__(self, name, arr)

    @classmethod
    def atoms(cls, points, weights) -> "MeasureData":
        return cls(atom_points=points, atom_weights=weights)

    @property
    def is_empty(self) -> bool:
        return self.atom_points.shape[0] == 0 and self.density_points.shape[0] == 0

    @property
    def support(self) -> np.ndarray:
        return np.concatenate([self.atom_points, self.density_points])

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        total = 0.0
        if self.atom_points.shape[0]:
            total += float(np.sum(self.atom_weights * g(self.atom_points)))
        if self.density_points.shape[0]:
            total += float(np.sum(self.density_weights * self.density_values * g(self.density_points)))
        return total

    def scaled(self, factor: float) -> "MeasureData":
        return MeasureData(
            self.atom_points,
            factor * self.atom_weights,
            self.density_points,
            self.density_weights,
            factor * self.density_values,
        )

    def check_support(self, mesh: SurfaceMesh) -> np.ndarray:
        """Distances from the support to Γ; raises unless everything is strictly inside."""
        pts = self.support
        if pts.shape[0] == 0:
            return np.zeros(0)
        if not np.all(is_inside(mesh, pts)):
            raise MeasureError("measure support must lie inside the domain")
        dist = distance_to_surface(mesh, pts)
        if np.any(dist <= 0.0):
            raise MeasureError("measure support touches the boundary")
        return dist


def total_variation(mu: MeasureData) -> float:
    """Σ|atom weights| + ∫|density|."""
    return float(np.abs(mu.atom_weights).sum() + np.sum(mu.density_weights * np.abs(mu.density_values)))


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Cell centres of a uniform lattice that fall inside Ω; weights are cell volumes."""

    points: np.ndarray
    weights: np.ndarray
    spacing: float

    @classmethod
    def build(cls, mesh: SurfaceMesh, spacing: float, min_distance: float = 0.0) -> "VolumeGrid":
        if not spacing > 0:
            raise MeasureError(f"grid spacing must be positive, got {spacing}")
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        axes = [np.arange(lo[d] + 0.5 * spacing, hi[d], spacing) for d in range(3)]
        lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        keep = is_inside(mesh, lattice)
        points = lattice[keep]
        if min_distance > 0 and points.shape[0]:
            points = points[distance_to_surface(mesh, points) > min_distance]
        weights = np.full(points.shape[0], spacing**3)
        logger.debug(f"Volume grid h={spacing:g}: {points.shape[0]} of {lattice.shape[0]} lattice points inside")
        return cls(points=points, weights=weights, spacing=float(spacing))

    @property
    def volume(self) -> float:
        return float(self.weights.sum())

    def shaved(self, mesh: SurfaceMesh, distance: float) -> "VolumeGrid":
        if self.points.shape[0] == 0:
            return self
        keep = distance_to_surface(mesh, self.points) > distance
        return VolumeGrid(self.points[keep], self.weights[keep], self.spacing)


# ---------------------------------------------------------------------------
# Mollification
# ---------------------------------------------------------------------------


def bump_constant(eps: float) -> float:
    """C with ∫ C (1 - r²/ε²)² dx = 1 over the ball of radius ε."""
    return 105.0 / (32.0 * np.pi * eps**3)


def _enclosed_fraction(t):
    """Mass of the normalised bump inside radius tε."""
    t = np.minimum(t, 1.0)
    return (105.0 / 8.0) * (t**3 / 3.0 - 2.0 * t**5 / 5.0 + t**7 / 7.0)


def bump_potential(points, center, eps: float) -> np.ndarray:
    """Laplace Newton potential of the unit-mass bump centred at ``center``."""
    r = np.linalg.norm(np.atleast_2d(points) - np.asarray(center, dtype=float), axis=1)
    t = r / eps
    outside = t >= 1.0
    t_in = np.where(outside | (t == 0.0), 0.5, t)
    scale = bump_constant(eps) * eps**2
    inner = scale * (_enclosed_fraction(t_in) * (8.0 / 105.0) / t_in + (1.0 - t_in**2) ** 3 / 6.0)
    inner = np.where(t == 0.0, scale / 6.0, inner)
    r_out = np.where(outside, r, 1.0)
    return np.where(outside, M_INV_4PI / r_out, inner)


def bump_potential_gradient(points, center, eps: float) -> np.ndarray:
    """∇ of :func:`bump_potential`: -M(r) x̂ / (4π r²) with M the enclosed mass."""
    d = np.atleast_2d(points) - np.asarray(center, dtype=float)
    r = np.linalg.norm(d, axis=1)
    safe = np.where(r > 0, r, 1.0)
    mass = _enclosed_fraction(r / eps)
    return (-(mass * M_INV_4PI / safe**3) * (r > 0))[:, None] * d


def _bump_lattice(eps: float):
    h = eps / LATTICE_STEPS
    k = np.arange(-LATTICE_STEPS, LATTICE_STEPS + 1) * h
    offsets = np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1).reshape(-1, 3)
    s2 = np.sum(offsets**2, axis=1) / eps**2
    keep = s2 < 1.0
    shape = (1.0 - s2[keep]) ** 2
    cell = h**3
    return offsets[keep], cell, shape / (cell * shape.sum())


@dataclass(frozen=True, eq=False)
class MollifiedMeasure:
    """L∞ approximant μ_ε: sampled bumps plus the measure's smooth part."""

    eps: float
    centers: np.ndarray
    center_weights: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    smooth_count: int

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights * self.density))

    def integrate(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        if self.points.shape[0] == 0:
            return 0.0
        return float(np.sum(self.weights * self.density * g(self.points)))

    def as_volume_source(self) -> VolumeSourceSpec:
        return VolumeSourceSpec(sample_points=self.points, sample_weights=self.weights, sample_density=self.density)

    def _smooth_part(self):
        start = self.points.shape[0] - self.smooth_count
        return self.points[start:], (self.weights * self.density)[start:]

    def newton_potential(self, points) -> np.ndarray:
        """λ = 0 potential: closed form for the bumps, sample sums for the smooth part."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(pts.shape[0])
        for c, w in zip(self.centers, self.center_weights):
            out += w * bump_potential(pts, c, self.eps)
        src, strength = self._smooth_part()
        if src.shape[0]:
            r = np.linalg.norm(pts[:, None, :] - src[None, :, :], axis=2)
            out += (M_INV_4PI / r) @ strength
        return out

    def newton_gradient(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(pts.shape)
        for c, w in zip(self.centers, self.center_weights):
            out += w * bump_potential_gradient(pts, c, self.eps)
        src, strength = self._smooth_part()
        if src.shape[0]:
            d = pts[:, None, :] - src[None, :, :]
            r = np.linalg.norm(d, axis=2)
            out -= np.einsum("ps,psd->pd", M_INV_4PI * strength[None, :] / r**3, d)
        return out


def mollify(mu: MeasureData, eps: float, mesh: SurfaceMesh) -> MollifiedMeasure:
    """Replace every atom by a unit-mass bump of radius ε; the smooth part passes through."""
    if not eps > 0:
        raise MeasureError(f"mollification radius must be positive, got {eps}")
    n_atoms = mu.atom_points.shape[0]
    if n_atoms:
        dist = distance_to_surface(mesh, mu.atom_points)
        closest = float(dist.min())
        if eps >= closest:
            raise MeasureError(
                f"ε={eps:g} reaches the boundary (closest atom is {closest:.3g} from Γ); the bump would leak"
            )
    offsets, cell, shape = _bump_lattice(eps)
    points = [c + offsets for c in mu.atom_points]
    weights = [np.full(offsets.shape[0], cell) for _ in range(n_atoms)]
    density = [w * shape for w in mu.atom_weights]
    points.append(mu.density_points)
    weights.append(mu.density_weights)
    density.append(mu.density_values)
    return MollifiedMeasure(
        eps=float(eps),
        centers=mu.atom_points,
        center_weights=mu.atom_weights,
        points=np.concatenate(points),
        weights=np.concatenate(weights),
        density=np.concatenate(density),
        smooth_count=int(mu.density_points.shape[0]),
    )


def weakstar_residual(mu: MeasureData, mollified: MollifiedMeasure, tests: Sequence[Callable]) -> float:
    """max over g of |∫ g dμ_ε - ∫ g dμ|."""
    if not tests:
        return 0.0
    return max(abs(mollified.integrate(g) - mu.integrate(g)) for g in tests)


# ---------------------------------------------------------------------------
# Function-space diagnostics
# ---------------------------------------------------------------------------


def truncate(values, a: float) -> np.ndarray:
    """T_a(u) = max(-a, min(a, u))."""
    if not a > 0:
        raise MeasureError(f"truncation level must be positive, got {a}")
    return np.clip(np.asarray(values, dtype=float), -a, a)


def lr_norm(values, weights, r: float) -> float:
    if not r > 0:
        raise MeasureError(f"exponent must be positive, got {r}")
    v = np.abs(np.asarray(values))
    return float(np.sum(np.asarray(weights) * v**r) ** (1.0 / r))


def marcinkiewicz_quasinorm(
    values, weights, r: float, levels_per_octave: int = LEVELS_PER_OCTAVE, octaves: int = OCTAVES
) -> float:
    """Smallest C with b^r |{|g| > b}| <= C over the grid b_k = max|g| 2^{-k/m}."""
    v = np.abs(np.asarray(values)).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if v.size == 0:
        raise MeasureError("Marcinkiewicz quasinorm needs at least one sample")
    if not r > 0:
        raise MeasureError(f"exponent must be positive, got {r}")
    top = float(v.max())
    if top == 0.0:
        return 0.0
    order = np.argsort(-v, kind="stable")
    sorted_v = v[order]
    cumulative = np.concatenate([[0.0], np.cumsum(w[order])])
    b = top * 2.0 ** (-np.arange(levels_per_octave * octaves + 1) / levels_per_octave)
    # number of samples with |g| > b
    count = np.searchsorted(-sorted_v, -b, side="left")
    return float(np.max(b**r * cumulative[count]))


@dataclass(frozen=True)
class EmbeddingChain:
    """‖g‖_{L^{r-δ}}, the M^r quasinorm and ‖g‖_{L^r}^r for one field."""

    r: float
    lower_norm: float
    quasinorm: float
    upper_power: float

    @property
    def consistent(self) -> bool:
        return self.quasinorm <= self.upper_power * (1.0 + 1e-12)


def embedding_check(values, weights, r: float, delta: float = 0.25) -> EmbeddingChain:
    if not 0 < delta < r:
        raise MeasureError(f"need 0 < δ < r, got δ={delta}, r={r}")
    return EmbeddingChain(
        r=r,
        lower_norm=lr_norm(values, weights, r - delta),
        quasinorm=marcinkiewicz_quasinorm(values, weights, r),
        upper_power=lr_norm(values, weights, r) ** r,
    )


# ---------------------------------------------------------------------------
# Approximating problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ApproximateSolve:
    eps: Optional[float]
    report: SolveReport
    problem: MixedProblem
    mollified: Optional[MollifiedMeasure]
    observations: np.ndarray


@dataclass(frozen=True, eq=False)
class MeasureStudy:
    measure: MeasureData
    sequence: List[ApproximateSolve]
    reference: ApproximateSolve
    observation_points: np.ndarray

    def gaps(self) -> np.ndarray:
        """max relative gap to the atomic reference at the observation points, per ε."""
        ref = self.reference.observations
        scale = max(np.max(np.abs(ref)), 1e-300) if ref.size else 1.0
        return np.array([np.max(np.abs(s.observations - ref)) / scale if ref.size else 0.0 for s in self.sequence])

    @property
    def converges_monotonically(self) -> bool:
        g = self.gaps()
        return bool(np.all(np.diff(g) < 0))


def _boundary_only(problem: MixedProblem) -> MixedProblem:
    return problem.with_data(volume=VolumeSourceSpec())


def approx_solve_sequence(
    solver: MixedSolver,
    f1,
    f2,
    mu: MeasureData,
    eps_list: Sequence[float],
    observation_points,
) -> MeasureStudy:
    """Solve the mollified problems for each ε plus the atomic reference, reusing one factorization."""
    if not solver.wavenumber.is_laplace:
        raise MeasureError("approximating problems are posed for λ = 0 only")
    if solver.side is not Side.INTERIOR:
        raise MeasureError("measure data live inside the domain; use the interior side")
    mesh = solver.mesh
    mu.check_support(mesh)
    obs = np.atleast_2d(np.asarray(observation_points, dtype=float)).reshape(-1, 3)

    sequence = []
    for eps in eps_list:
        mollified = mollify(mu, eps, mesh)
        problem = solver.problem(f1=f1, f2=f2, volume=mollified.as_volume_source())
        report = solver.solve(problem)
        values = evaluate(_boundary_only(problem), report.cauchy, obs) + mollified.newton_potential(obs)
        logger.info(f"ε={eps:g}: mass {mollified.mass:.6f}, {mollified.points.shape[0]} samples")
        sequence.append(ApproximateSolve(float(eps), report, problem, mollified, values))

    reference_source = VolumeSourceSpec(
        atom_points=mu.atom_points,
        atom_weights=mu.atom_weights,
        sample_points=mu.density_points,
        sample_weights=mu.density_weights,
        sample_density=mu.density_values,
    )
    ref_problem = solver.problem(f1=f1, f2=f2, volume=reference_source)
    ref_report = solver.solve(ref_problem)
    ref_values = evaluate(ref_problem, ref_report.cauchy, obs)
    study = MeasureStudy(
        measure=mu,
        sequence=sequence,
        reference=ApproximateSolve(None, ref_report, ref_problem, None, ref_values),
        observation_points=obs,
    )
    logger.info(f"Measure study gaps to the atomic reference: {np.array2string(study.gaps(), precision=3)}")
    return study


@dataclass(frozen=True)
class W1qRow:
    eps: float
    lq_value: float
    lq_gradient: float
    truncated_energy: float
    embedding: EmbeddingChain

    @property
    def gradient_quasinorm(self) -> float:
        return self.embedding.quasinorm

    @property
    def total(self) -> float:
        return self.lq_value + self.lq_gradient


@dataclass(frozen=True)
class W1qDiagnostic:
    q: float
    rows: List[W1qRow]
    grid_points: int
    excluded_points: int

    @property
    def maximum(self) -> float:
        return max((row.total for row in self.rows), default=0.0)

    @property
    def variation(self) -> float:
        totals = [row.total for row in self.rows]
        if not totals or max(totals) == 0:
            return 0.0
        return (max(totals) - min(totals)) / max(totals)


def w1q_diagnostic(
    study: MeasureStudy, q: float, grid: VolumeGrid, truncation: float = 1.0, r: float = CRITICAL_Q
) -> W1qDiagnostic:
    """(‖u_ε‖_q + ‖∇u_ε‖_q) over the grid minus a one-panel-diameter shell near Γ."""
    if not 1.0 <= q < CRITICAL_Q:
        raise MeasureError(
            f"q={q} is outside the W^(1,q) boundedness range 1 <= q < N/(N-1) = 3/2 for N = 3"
        )
    if not study.sequence:
        return W1qDiagnostic(q=q, rows=[], grid_points=grid.points.shape[0], excluded_points=0)
    mesh = study.reference.problem.mesh
    inner = grid.shaved(mesh, mesh.max_diameter)
    excluded = grid.points.shape[0] - inner.points.shape[0]
    if inner.points.shape[0] == 0:
        raise MeasureError("no grid points are farther than one panel diameter from Γ; refine the grid")
    rows = []
    for item in study.sequence:
        boundary_problem = _boundary_only(item.problem)
        u = evaluate(boundary_problem, item.report.cauchy, inner.points, check=False)
        u = u + item.mollified.newton_potential(inner.points)
        grad = evaluate_gradient(boundary_problem, item.report.cauchy, inner.points, check=False)
        grad = grad + item.mollified.newton_gradient(inner.points)
        grad_abs = np.linalg.norm(grad, axis=1)
        band = np.abs(u) < truncation
        rows.append(
            W1qRow(
                eps=item.eps,
                lq_value=lr_norm(u, inner.weights, q),
                lq_gradient=lr_norm(grad_abs, inner.weights, q),
                truncated_energy=float(np.sum(inner.weights[band] * grad_abs[band] ** 2)),
                embedding=embedding_check(grad_abs, inner.weights, r),
            )
        )
    diagnostic = W1qDiagnostic(q=q, rows=rows, grid_points=grid.points.shape[0], excluded_points=excluded)
    logger.info(
        f"W^(1,{q:g}) diagnostic over {inner.points.shape[0]} points ({excluded} near-Γ excluded): "
        f"max {diagnostic.maximum:.4g}, variation {diagnostic.variation:.1%}"
    )
    return diagnostic
