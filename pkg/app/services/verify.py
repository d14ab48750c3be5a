"""Exact-solution oracles and property suites for the boundary operators and the mixed solver."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.services.errors import NearBoundaryError
from app.services.geometry import BoundaryPartition, SurfaceMesh, distance_to_surface, is_inside, unit_sphere_mesh
from app.services.kernels import WaveNumber, grad_x_phi, phi
from app.services.operators import DensityVector, Space, l2_project, quadrature_points, restrict
from app.services.potentials import check_points, single_layer_potential
from app.services.solver import BoundaryOperators, CauchyData, MixedProblem, Side, evaluate, evaluate_gradient

logger = logging.getLogger(__name__)

SOURCE_CLEARANCE = 0.2
TRACE_OFFSETS = (0.5, 1.0, 1.5)
TRACE_ORDER = 10
TRACE_PANELS = 6
RADIATION_SAMPLE_LEVEL = 1

DEFAULT_THRESHOLDS = {
    "double_layer_interior_trace": 5e-2,
    "double_layer_exterior_trace": 5e-2,
    "single_layer_constant": 5e-2,
    "single_layer_symmetry": 1e-8,
    "hypersingular_symmetry": 1e-8,
    "adjoint_transpose": 1e-6,
    "hypersingular_constants": 1e-8,
    "single_layer_trace_continuity": 5e-2,
    "hypersingular_calderon": 1e-1,
}


@dataclass(frozen=True)
class ResidualRow:
    check: str
    level: str
    wavenumber: str
    value: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.threshold)


# ---------------------------------------------------------------------------
# Manufactured point-source solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ManufacturedCase:
    """u = Φ_λ(x - y*) with y* on the far side of Γ, plus its boundary data and probes."""

    wavenumber: WaveNumber
    side: Side
    source: np.ndarray
    mesh: SurfaceMesh
    partition: BoundaryPartition
    f1: DensityVector
    f2: DensityVector
    probes: np.ndarray
    exact_probe_values: np.ndarray

    def exact(self, points) -> np.ndarray:
        return phi(self.wavenumber, np.atleast_2d(points), self.source)

    def exact_gradient(self, points) -> np.ndarray:
        return grad_x_phi(self.wavenumber, np.atleast_2d(points), self.source)

    def problem(self) -> MixedProblem:
        return MixedProblem(
            mesh=self.mesh,
            partition=self.partition,
            wavenumber=self.wavenumber,
            side=self.side,
            f1=self.f1,
            f2=self.f2,
        )

    def exact_cauchy(self) -> CauchyData:
        """Projected Dirichlet and Neumann traces on the whole of Γ."""
        return CauchyData(*exact_traces(self.mesh, self.wavenumber, self.source))

    def probe_errors(self, values) -> np.ndarray:
        return np.abs(np.asarray(values) - self.exact_probe_values) / np.abs(self.exact_probe_values)


def exact_traces(mesh: SurfaceMesh, wavenumber, source, order: int = 6):
    """P1 projection of Φ(x - y*) and P0 projection of ∇Φ·n on the flat panels."""
    pts = quadrature_points(mesh, order)
    flat = pts.reshape(-1, 3)
    values = phi(wavenumber, flat, source).reshape(pts.shape[:2])
    grads = grad_x_phi(wavenumber, flat, source).reshape(pts.shape)
    normal = np.einsum("iqd,id->iq", grads, mesh.normals)
    return l2_project(mesh, Space.P1, values, order), l2_project(mesh, Space.P0, normal, order)


def domain_diameter(mesh: SurfaceMesh) -> float:
    return mesh.bbox_diagonal


def manufactured_case(
    wavenumber,
    side,
    source,
    mesh: SurfaceMesh,
    partition: BoundaryPartition,
    probes,
) -> ManufacturedCase:
    lam = wavenumber if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber)
    side = Side(side)
    y = np.asarray(source, dtype=float).reshape(3)
    clearance = float(distance_to_surface(mesh, y[None, :])[0])
    limit = SOURCE_CLEARANCE * domain_diameter(mesh)
    if clearance <= limit:
        raise NearBoundaryError(
            f"manufactured source {y.tolist()} is {clearance:.3g} from Γ; need more than {limit:.3g}"
        )
    inside = bool(is_inside(mesh, y[None, :])[0])
    if inside != (side is Side.EXTERIOR):
        where = "inside" if side is Side.EXTERIOR else "outside"
        raise NearBoundaryError(f"a {side.value} manufactured case needs its source {where} the domain")
    probes = check_points(mesh, probes, side.value)

    dirichlet, neumann = exact_traces(mesh, lam, y)
    case = ManufacturedCase(
        wavenumber=lam,
        side=side,
        source=y,
        mesh=mesh,
        partition=partition,
        f1=restrict(dirichlet, Space.P1_GAMMA1, mesh, partition),
        f2=restrict(neumann, Space.P0_GAMMA2, mesh, partition),
        probes=probes,
        exact_probe_values=phi(lam, probes, y),
    )
    logger.debug(f"Manufactured {side.value} case λ={lam}, source {y.tolist()}, {probes.shape[0]} probes")
    return case


# ---------------------------------------------------------------------------
# Jump relations and operator identities
# ---------------------------------------------------------------------------


def _relative_max(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a - b)))


def _p0_l2(mesh: SurfaceMesh, load: np.ndarray, target: float) -> float:
    """Relative L² distance between the P0 function with Galerkin load ``load`` and a constant."""
    coeff = load / mesh.areas
    err = np.sqrt(np.sum(mesh.areas * np.abs(coeff - target) ** 2))
    return float(err / np.sqrt(mesh.surface_area))


def _extrapolate_to_zero(values: np.ndarray, offsets: Sequence[float]) -> np.ndarray:
    t = np.asarray(offsets, dtype=float)
    weights = np.array(
        [np.prod([t[j] / (t[j] - t[i]) for j in range(len(t)) if j != i]) for i in range(len(t))]
    )
    return values @ weights


def single_layer_trace_gap(mesh: SurfaceMesh, wavenumber, density: DensityVector) -> float:
    """Relative gap between the one-sided limits of 𝕊g, extrapolated along panel normals."""
    panels = np.unique(np.linspace(0, mesh.num_triangles - 1, TRACE_PANELS).astype(int))
    offsets = np.asarray(TRACE_OFFSETS)
    t = mesh.diameters[panels][:, None] * offsets[None, :]
    base = mesh.centroids[panels][:, None, :]
    n = mesh.normals[panels][:, None, :]
    inner = (base - t[..., None] * n).reshape(-1, 3)
    outer = (base + t[..., None] * n).reshape(-1, 3)
    v_in = single_layer_potential(mesh, wavenumber, density, inner, order=TRACE_ORDER).reshape(t.shape)
    v_out = single_layer_potential(mesh, wavenumber, density, outer, order=TRACE_ORDER).reshape(t.shape)
    lim_in = _extrapolate_to_zero(v_in, offsets)
    lim_out = _extrapolate_to_zero(v_out, offsets)
    scale = np.max(np.abs(lim_in))
    return float(np.max(np.abs(lim_in - lim_out)) / scale) if scale > 0 else float(np.max(np.abs(lim_out)))


def calderon_gap(mesh: SurfaceMesh, operators: BoundaryOperators, source) -> float:
    """Relative defect of ⟨Dφ, φ⟩ = ⟨(K* - ½)ψ, φ⟩ for the Cauchy data of an interior solution."""
    dirichlet, neumann = exact_traces(mesh, operators.wavenumber, source)
    phi_c = dirichlet.coefficients
    psi_c = neumann.coefficients
    left = phi_c @ (operators.D.entries @ phi_c)
    right = phi_c @ (operators.Kstar.entries @ psi_c - 0.5 * (operators.mass_mixed.T @ psi_c))
    scale = abs(left)
    return float(abs(left - right) / scale) if scale > 0 else float(abs(right))


def _outside_source(mesh: SurfaceMesh) -> np.ndarray:
    centre = mesh.vertices.mean(axis=0)
    reach = np.max(np.linalg.norm(mesh.vertices - centre, axis=1))
    return centre + np.array([0.0, 0.0, 2.0 * reach])


def jump_relation_suite(
    mesh: SurfaceMesh,
    wavenumber,
    operators: Optional[BoundaryOperators] = None,
    level: str = "0",
    unit_sphere: bool = False,
    thresholds: Optional[dict] = None,
    seed: int = 0,
) -> List[ResidualRow]:
    """Mass-weighted residuals of the jump relations and operator identities."""
    lam = wavenumber if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber)
    limits = dict(DEFAULT_THRESHOLDS)
    limits.update(thresholds or {})
    ops = operators or BoundaryOperators.assemble(mesh, lam)
    rows: List[ResidualRow] = []

    def add(check: str, value: float):
        rows.append(ResidualRow(check, str(level), str(lam), float(value), limits[check]))

    ones_p1 = np.ones(mesh.num_vertices)
    ones_p0 = np.ones(mesh.num_triangles)
    if lam.is_laplace:
        k_one = ops.K.entries @ ones_p1
        # interior trace (-1/2 + K)1 = -1 and exterior trace (1/2 + K)1 = 0
        add("double_layer_interior_trace", _p0_l2(mesh, k_one - 0.5 * mesh.areas, -1.0))
        add("double_layer_exterior_trace", _p0_l2(mesh, k_one + 0.5 * mesh.areas, 0.0))
        if unit_sphere:
            add("single_layer_constant", _p0_l2(mesh, ops.S.entries @ ones_p0, 1.0))
        d_one = ops.D.entries @ ones_p1
        add("hypersingular_constants", np.max(np.abs(d_one)) / np.max(np.abs(ops.D.entries).sum(axis=1)))

    add("single_layer_symmetry", _relative_max(ops.S.entries.T, ops.S.entries))
    add("hypersingular_symmetry", _relative_max(ops.D.entries.T, ops.D.entries))
    add("adjoint_transpose", _relative_max(ops.Kstar.entries.T, ops.K.entries))

    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    density = l2_project(mesh, Space.P0, lambda x: 1.0 + 0.5 * (x @ direction))
    add("single_layer_trace_continuity", single_layer_trace_gap(mesh, lam, density))
    add("hypersingular_calderon", calderon_gap(mesh, ops, _outside_source(mesh)))

    for row in rows:
        if not row.passed:
            logger.warning(
                f"Jump check {row.check} (level {row.level}, λ={row.wavenumber}) = {row.value:.3e} "
                f"above {row.threshold:.1e}"
            )
    return rows


def refinement_rows(coarse: Sequence[ResidualRow], fine: Sequence[ResidualRow]) -> List[ResidualRow]:
    """fine/coarse ratios for the discretisation-limited checks; they must drop below 1."""
    watched = {
        "double_layer_interior_trace",
        "double_layer_exterior_trace",
        "single_layer_constant",
    }
    by_check = {(r.check, r.wavenumber): r for r in coarse}
    out = []
    for row in fine:
        before = by_check.get((row.check, row.wavenumber))
        if row.check in watched and before is not None and before.value > 0:
            out.append(
                ResidualRow(
                    f"{row.check}_refinement",
                    f"{before.level}->{row.level}",
                    row.wavenumber,
                    row.value / before.value,
                    1.0,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Radiation / decay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadiationRow:
    radius: float
    amplitude: float
    compensated_amplitude: float
    residual: float


@dataclass(frozen=True)
class RadiationReport:
    wavenumber: str
    rows: List[RadiationRow] = field(default_factory=list)

    @property
    def amplitude_spread(self) -> float:
        amps = [r.compensated_amplitude for r in self.rows]
        return (max(amps) - min(amps)) / max(amps) if amps and max(amps) > 0 else 0.0

    @property
    def stable(self) -> bool:
        return self.amplitude_spread < 0.2

    @property
    def decaying(self) -> bool:
        """Residual at the largest radius is below half its value at the smallest."""
        if len(self.rows) < 2:
            return True
        return self.rows[-1].residual < 0.5 * self.rows[0].residual


def radiation_check(problem: MixedProblem, cauchy: CauchyData, radii: Sequence[float]) -> RadiationReport:
    """Far-field amplitude and outgoing-wave residual on spheres of increasing radius.

    For λ ≠ 0 the residual is max |∂u/∂R - iλu|·R; for λ = 0 it is
    max (|u| + R|∇u|)·R, which must stay bounded.
    """
    if problem.side is not Side.EXTERIOR:
        raise NearBoundaryError("radiation checks apply to exterior solutions")
    mesh = problem.mesh
    centre = mesh.vertices.mean(axis=0)
    reach = float(np.max(np.linalg.norm(mesh.vertices - centre, axis=1)))
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] < 2.0 * reach:
        raise NearBoundaryError(f"radiation radii must be at least {2.0 * reach:.3g} (twice the mesh radius)")
    directions = unit_sphere_mesh(RADIATION_SAMPLE_LEVEL).vertices
    lam = problem.wavenumber.value

    rows = []
    for R in radii:
        pts = centre + R * directions
        u = evaluate(problem, cauchy, pts, check=False)
        grad = evaluate_gradient(problem, cauchy, pts, check=False)
        amplitude = float(np.max(np.abs(u)) * R)
        if problem.wavenumber.is_laplace:
            residual = float(np.max(np.abs(u) + R * np.linalg.norm(grad, axis=1)) * R)
        else:
            du_dr = np.einsum("pd,pd->p", grad, directions)
            residual = float(np.max(np.abs(du_dr - 1j * lam * u)) * R)
        rows.append(
            RadiationRow(
                radius=R,
                amplitude=amplitude,
                compensated_amplitude=amplitude * float(np.exp(lam.imag * R)),
                residual=residual,
            )
        )
    report = RadiationReport(wavenumber=str(problem.wavenumber), rows=rows)
    logger.info(
        f"Radiation check over R={radii}: amplitude spread {report.amplitude_spread:.1%}, "
        f"residual {rows[0].residual:.3e} -> {rows[-1].residual:.3e}"
    )
    return report
