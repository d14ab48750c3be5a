import logging
import platform
import time
from contextlib import contextmanager
from typing import Dict, List, Optional, Tuple

import numpy as np
import pydantic
import scipy

from app import __version__
from app.models.config_models import FileData, ManufacturedData, RunConfig
from app.models.report_models import (
    MeasureRowModel,
    MeasureStudySummary,
    ProbeResult,
    RadiationRowModel,
    ResidualRowModel,
    RunManifest,
    SolveReportModel,
    VerifySummary,
)
from app.services import measure as measure_service
from app.services import verify as verify_service
from app.services.errors import MeasureError, ProblemDefinitionError
from app.services.geometry import (
    BoundaryPartition,
    SurfaceMesh,
    distance_to_surface,
    load_mesh,
    partition_boundary,
    read_labels,
    refine,
    unit_sphere_mesh,
)
from app.services.kernels import WaveNumber
from app.services.operators import (
    DensityVector,
    Space,
    VolumeSourceSpec,
    assemble_operators,
    mass_matrix,
)
from app.services.output_service import OutputService
from app.services.settings import thread_count
from app.services.solver import BoundaryOperators, MixedProblem, MixedSolver, Side, SolveReport, evaluate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_THRESHOLD = 1


class BemRunService:
    """Runs one configured workflow (solve, verify, measure-study, operator-dump)"""

    def __init__(self, config: RunConfig, threads: Optional[int] = None):
        self.config = config
        self.threads = threads if threads is not None else thread_count()
        self.settings = config.quadrature.to_settings()
        self.wavenumber = config.wavenumber.to_wavenumber()
        self.side = Side(config.side)
        self.output = OutputService(config.output_dir)
        self.timings: Dict[str, float] = {}
        logger.info(
            f"Run service ready: λ={self.wavenumber}, side={self.side.value}, "
            f"{self.threads} thread(s), output in {self.output.output_dir}"
        )

    @contextmanager
    def _stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    # -- inputs -----------------------------------------------------------

    @property
    def uses_builtin_sphere(self) -> bool:
        return self.config.mesh.builtin_sphere_level is not None

    def load_mesh(self) -> SurfaceMesh:
        source = self.config.mesh
        with self._stage("mesh"):
            if source.builtin_sphere_level is not None:
                mesh = unit_sphere_mesh(source.builtin_sphere_level)
            else:
                mesh = load_mesh(source.path, source.format)
        logger.info(f"Mesh: {mesh.num_triangles} triangles, {mesh.num_vertices} vertices")
        return mesh

    def build_partition(self, mesh: SurfaceMesh, refinements: int = 0) -> BoundaryPartition:
        rule = self.config.partition
        if rule.labels_file is None:
            return partition_boundary(mesh, rule.to_rule())
        labels = read_labels(rule.labels_file)
        # refine() stores child k of triangle i at k * m + i
        for _ in range(refinements):
            labels = np.tile(labels, 4)
        return partition_boundary(mesh, labels)

    def volume_source(self) -> VolumeSourceSpec:
        atoms = self.config.volume.atoms
        if not atoms:
            return VolumeSourceSpec()
        return VolumeSourceSpec.atoms(
            [a.point for a in atoms], [complex(a.weight, a.weight_im) for a in atoms]
        )

    def default_probes(self, mesh: SurfaceMesh) -> np.ndarray:
        centre = mesh.vertices.mean(axis=0)
        axes = np.concatenate([np.eye(3), -np.eye(3)])
        if self.side is Side.EXTERIOR:
            reach = np.max(np.linalg.norm(mesh.vertices - centre, axis=1))
            return centre + 2.0 * reach * axes
        inradius = float(distance_to_surface(mesh, centre[None, :])[0])
        candidates = np.concatenate([centre[None, :], centre + 0.25 * inradius * axes])
        keep = distance_to_surface(mesh, candidates) > mesh.max_diameter
        return candidates[keep] if np.any(keep) else centre[None, :]

    def probe_points(self, mesh: SurfaceMesh) -> np.ndarray:
        if self.config.probes.points:
            return np.asarray(self.config.probes.points, dtype=float)
        return self.default_probes(mesh)

    def _read_coefficients(self, path: str, space: Space, mesh, partition) -> DensityVector:
        """Read ``re [im]`` lines on the restricted dofs or on every dof of the parent space."""
        try:
            raw = np.loadtxt(path, ndmin=2)
        except ValueError as e:
            raise ProblemDefinitionError(f"cannot read boundary data {path}: {e}")
        values = raw[:, 0] + (1j * raw[:, 1] if raw.shape[1] > 1 else 0.0)
        parent = space.parent
        full_size = mesh.num_vertices if parent is Space.P1 else mesh.num_triangles
        if values.shape[0] == full_size:
            return DensityVector.on(parent, values, mesh)
        try:
            return DensityVector.on(space, values, mesh, partition)
        except ValueError as e:
            raise ProblemDefinitionError(f"{path}: {e}")

    def boundary_data(
        self, mesh: SurfaceMesh, partition: BoundaryPartition, probes: np.ndarray
    ) -> Tuple[DensityVector, DensityVector, Optional[verify_service.ManufacturedCase]]:
        data = self.config.data
        if isinstance(data, ManufacturedData):
            case = verify_service.manufactured_case(
                self.wavenumber, self.side, data.source, mesh, partition, probes
            )
            return case.f1, case.f2, case
        if isinstance(data, FileData):
            f1 = self._read_coefficients(data.f1_path, Space.P1_GAMMA1, mesh, partition)
            f2 = self._read_coefficients(data.f2_path, Space.P0_GAMMA2, mesh, partition)
            return f1, f2, None
        return (
            DensityVector.zeros(Space.P1_GAMMA1, mesh, partition),
            DensityVector.zeros(Space.P0_GAMMA2, mesh, partition),
            None,
        )

    # -- solve ------------------------------------------------------------

    def _report_model(
        self,
        problem: MixedProblem,
        report: SolveReport,
        probes: np.ndarray,
        values: np.ndarray,
        case=None,
    ) -> SolveReportModel:
        results = []
        errors = case.probe_errors(values) if case is not None else None
        for i, (p, v) in enumerate(zip(probes, values)):
            item = ProbeResult(point=tuple(float(c) for c in p), re=float(v.real), im=float(v.imag))
            if case is not None:
                exact = case.exact_probe_values[i]
                item.exact_re = float(exact.real)
                item.exact_im = float(exact.imag)
                item.relative_error = float(errors[i])
            results.append(item)
        return SolveReportModel(
            success=report.schur_residual < self.config.thresholds.schur_residual,
            wavenumber=str(problem.wavenumber),
            side=problem.side.value,
            num_triangles=problem.mesh.num_triangles,
            num_vertices=problem.mesh.num_vertices,
            gamma1_dofs=int(problem.partition.gamma1_triangles.size),
            interior_gamma2_dofs=int(problem.partition.interior_gamma2_vertices.size),
            method=report.method,
            schur_residual=report.schur_residual,
            path_discrepancy=report.path_discrepancy,
            condition_estimate=report.condition_estimate,
            stability_ratio=report.stability_ratio,
            probes=results,
            max_probe_error=float(np.max(errors)) if errors is not None and errors.size else None,
            timings={**report.timings, **self.timings},
        )

    def solve(self) -> int:
        mesh = self.load_mesh()
        partition = self.build_partition(mesh)
        probes = self.probe_points(mesh)
        f1, f2, case = self.boundary_data(mesh, partition, probes)
        problem = MixedProblem(
            mesh=mesh,
            partition=partition,
            wavenumber=self.wavenumber,
            side=self.side,
            f1=f1,
            f2=f2,
            volume=self.volume_source(),
        )
        with self._stage("solve"):
            solver = MixedSolver(
                mesh, partition, self.wavenumber, self.side, self.settings, self.threads, self.config.dof_cap
            )
            report = solver.solve(problem)
        with self._stage("evaluate"):
            values = evaluate(problem, report.cauchy, probes, threads=self.threads)

        model = self._report_model(problem, report, probes, values, case)
        self.output.write_model("report.json", model)
        self.output.write_solution(probes, values)
        if not model.success:
            logger.error(
                f"Block residual {report.schur_residual:.2e} is above "
                f"{self.config.thresholds.schur_residual:.1e}"
            )
            return EXIT_THRESHOLD
        return EXIT_OK

    # -- verify -----------------------------------------------------------

    def _ladder(self, mesh: SurfaceMesh) -> List[Tuple[str, SurfaceMesh, int]]:
        base_level = self.config.mesh.builtin_sphere_level
        ladder = []
        for i in range(self.config.thresholds.refinements + 1):
            label = str(base_level + i) if base_level is not None else f"base+{i}"
            ladder.append((label, mesh, i))
            if i < self.config.thresholds.refinements:
                mesh = refine(mesh, project_to_unit_sphere=self.uses_builtin_sphere)
        return ladder

    def _manufactured_source(self, mesh: SurfaceMesh) -> np.ndarray:
        if isinstance(self.config.data, ManufacturedData):
            return np.asarray(self.config.data.source, dtype=float)
        centre = mesh.vertices.mean(axis=0)
        if self.side is Side.EXTERIOR:
            return centre
        reach = np.max(np.linalg.norm(mesh.vertices - centre, axis=1))
        return centre + np.array([0.0, 0.0, 2.0 * reach])

    def verify(self) -> int:
        thresholds = self.config.thresholds
        base = self.load_mesh()
        source = self._manufactured_source(base)
        probes = self.probe_points(base)
        lambdas = [self.wavenumber]
        if not self.wavenumber.is_laplace:
            lambdas.append(WaveNumber(0))

        rows: List[verify_service.ResidualRow] = []
        jump_by_level: Dict[str, List[verify_service.ResidualRow]] = {}
        probe_errors: List[Tuple[str, float]] = []
        radiation = None
        ladder = self._ladder(base)
        for label, mesh, depth in ladder:
            level_rows = []
            config_ops = None
            for i, lam in enumerate(lambdas):
                with self._stage("assembly"):
                    ops = BoundaryOperators.assemble(mesh, lam, self.settings, self.threads, self.config.dof_cap)
                if i == 0:
                    config_ops = ops
                with self._stage("jump_suite"):
                    level_rows += verify_service.jump_relation_suite(
                        mesh, lam, ops, label, self.uses_builtin_sphere, thresholds.jump
                    )
            jump_by_level[label] = level_rows
            rows += level_rows

            partition = self.build_partition(mesh, depth)
            case = verify_service.manufactured_case(self.wavenumber, self.side, source, mesh, partition, probes)
            with self._stage("manufactured"):
                solver = MixedSolver(
                    mesh, partition, self.wavenumber, self.side, self.settings, self.threads, operators=config_ops
                )
                problem = case.problem()
                report = solver.solve(problem)
                values = evaluate(problem, report.cauchy, case.probes, threads=self.threads)
            err = float(np.max(case.probe_errors(values)))
            probe_errors.append((label, err))
            finest = depth == len(ladder) - 1
            lam_label = str(self.wavenumber)
            rows.append(
                verify_service.ResidualRow(
                    "manufactured_probe_error", label, lam_label, err, thresholds.probe_error if finest else 1.0
                )
            )
            rows.append(
                verify_service.ResidualRow(
                    "schur_residual", label, lam_label, report.schur_residual, thresholds.schur_residual
                )
            )
            if report.path_discrepancy is not None:
                rows.append(
                    verify_service.ResidualRow(
                        "path_discrepancy", label, lam_label, report.path_discrepancy, thresholds.path_discrepancy
                    )
                )
            if finest and self.side is Side.EXTERIOR:
                with self._stage("radiation"):
                    radiation = verify_service.radiation_check(problem, report.cauchy, self.config.probes.radii)
                rows.append(
                    verify_service.ResidualRow(
                        "radiation_amplitude_spread", label, lam_label, radiation.amplitude_spread,
                        thresholds.radiation_spread,
                    )
                )
                if len(radiation.rows) > 1 and radiation.rows[0].residual > 0:
                    rows.append(
                        verify_service.ResidualRow(
                            "radiation_residual_ratio",
                            label,
                            lam_label,
                            radiation.rows[-1].residual / radiation.rows[0].residual,
                            0.5,
                        )
                    )

        labels = [label for label, _, _ in ladder]
        for coarse, fine in zip(labels, labels[1:]):
            rows += verify_service.refinement_rows(jump_by_level[coarse], jump_by_level[fine])
        for (coarse, e0), (fine, e1) in zip(probe_errors, probe_errors[1:]):
            if e0 > 0:
                rows.append(
                    verify_service.ResidualRow(
                        "manufactured_refinement", f"{coarse}->{fine}", str(self.wavenumber), e1 / e0, 1.0
                    )
                )

        self.output.write_table(
            "jump_residuals.csv",
            ("check", "level", "lambda", "value", "threshold", "passed"),
            ((r.check, r.level, r.wavenumber, r.value, r.threshold, r.passed) for r in rows),
        )
        if radiation is not None:
            self.output.write_table(
                "radiation.csv",
                ("R", "amplitude", "compensated_amplitude", "residual"),
                ((r.radius, r.amplitude, r.compensated_amplitude, r.residual) for r in radiation.rows),
            )
        failed = [f"{r.check}@{r.level}/{r.wavenumber}" for r in rows if not r.passed]
        summary = VerifySummary(
            success=not failed,
            checks=len(rows),
            failed=failed,
            rows=[
                ResidualRowModel(
                    check=r.check, level=r.level, wavenumber=r.wavenumber, value=r.value,
                    threshold=r.threshold, passed=r.passed,
                )
                for r in rows
            ],
            radiation=[
                RadiationRowModel(
                    radius=r.radius, amplitude=r.amplitude, compensated_amplitude=r.compensated_amplitude,
                    residual=r.residual,
                )
                for r in (radiation.rows if radiation is not None else [])
            ],
        )
        self.output.write_model("verify_report.json", summary)
        if failed:
            logger.error(f"Verification failed {len(failed)} of {len(rows)} checks: {', '.join(failed)}")
            return EXIT_THRESHOLD
        logger.info(f"Verification passed all {len(rows)} checks")
        return EXIT_OK

    # -- measure study ----------------------------------------------------

    def measure_study(self) -> int:
        spec = self.config.measure
        if spec is None:
            raise ProblemDefinitionError("measure-study needs a 'measure' section in the config")
        if not self.wavenumber.is_laplace:
            raise ProblemDefinitionError("measure-study runs the λ = 0 approximating problems; set wavenumber to 0")
        if self.side is not Side.INTERIOR:
            raise ProblemDefinitionError("measure-study needs side = interior")
        if not 1.0 <= spec.q < measure_service.CRITICAL_Q:
            raise MeasureError(f"q={spec.q} is outside the W^(1,q) boundedness range 1 <= q < 3/2")

        mesh = self.load_mesh()
        partition = self.build_partition(mesh)
        mu = spec.to_measure()
        mu.check_support(mesh)
        if spec.boundary_data == "atom_field" and not mu.is_empty:
            dirichlet = DensityVector.zeros(Space.P1, mesh)
            neumann = DensityVector.zeros(Space.P0, mesh)
            sources = np.concatenate([mu.atom_points, mu.density_points])
            masses = np.concatenate([mu.atom_weights, mu.density_weights * mu.density_values])
            for point, weight in zip(sources, masses):
                d, n = verify_service.exact_traces(mesh, self.wavenumber, point)
                dirichlet = DensityVector.on(Space.P1, dirichlet.coefficients + weight * d.coefficients, mesh)
                neumann = DensityVector.on(Space.P0, neumann.coefficients + weight * n.coefficients, mesh)
            f1, f2 = dirichlet, neumann
        else:
            f1 = DensityVector.zeros(Space.P1_GAMMA1, mesh, partition)
            f2 = DensityVector.zeros(Space.P0_GAMMA2, mesh, partition)

        with self._stage("solve"):
            solver = MixedSolver(
                mesh, partition, self.wavenumber, self.side, self.settings, self.threads, self.config.dof_cap
            )
            study = measure_service.approx_solve_sequence(
                solver, f1, f2, mu, spec.eps_list, spec.observation_points
            )
        with self._stage("diagnostics"):
            grid = measure_service.VolumeGrid.build(mesh, spec.grid_spacing)
            w1q = measure_service.w1q_diagnostic(study, spec.q, grid, spec.truncation, spec.marcinkiewicz_r)
            tests = _weakstar_tests()

        rows: List[Tuple[str, str, float]] = []
        gaps = study.gaps()
        for item, gap, w_row in zip(study.sequence, gaps, w1q.rows):
            eps = f"{item.eps:g}"
            rows += [
                (eps, "gap_to_reference", float(gap)),
                (eps, "mass", item.mollified.mass),
                (eps, "weakstar_residual", measure_service.weakstar_residual(mu, item.mollified, tests)),
                (eps, "schur_residual", item.report.schur_residual),
                (eps, "stability_ratio", item.report.stability_ratio),
                (eps, "w1q_value", w_row.lq_value),
                (eps, "w1q_gradient", w_row.lq_gradient),
                (eps, "w1q_total", w_row.total),
                (eps, "truncated_energy", w_row.truncated_energy),
                (eps, "gradient_quasinorm", w_row.gradient_quasinorm),
                (eps, "gradient_lower_norm", w_row.embedding.lower_norm),
                (eps, "gradient_lr_power", w_row.embedding.upper_power),
            ]
            for k, value in enumerate(item.observations):
                rows.append((eps, f"observation_{k}", float(value.real)))
        for k, value in enumerate(study.reference.observations):
            rows.append(("reference", f"observation_{k}", float(value.real)))
        rows.append(("reference", "schur_residual", study.reference.report.schur_residual))
        rows.append(("reference", "total_variation", measure_service.total_variation(mu)))

        self.output.write_table("measure_study.csv", ("eps", "observable", "value"), rows)
        residual_ok = all(
            s.report.schur_residual < self.config.thresholds.schur_residual
            for s in study.sequence + [study.reference]
        )
        summary = MeasureStudySummary(
            success=residual_ok,
            converges_monotonically=study.converges_monotonically,
            final_gap=float(gaps[-1]) if gaps.size else None,
            w1q_variation=w1q.variation if w1q.rows else None,
            rows=[MeasureRowModel(eps=e, observable=o, value=v) for e, o, v in rows],
        )
        self.output.write_model("measure_report.json", summary)
        if not summary.converges_monotonically:
            logger.warning("Mollified solutions do not approach the atomic reference monotonically")
        return EXIT_OK if residual_ok else EXIT_THRESHOLD

    # -- operator dump ----------------------------------------------------

    def operator_dump(self) -> int:
        mesh = self.load_mesh()
        with self._stage("assembly"):
            ops = assemble_operators(
                mesh, self.wavenumber, ("S", "K", "Kstar", "D"), self.settings, self.threads, self.config.dof_cap
            )
        for name, matrix in ops.items():
            self.output.dump_operator(name, matrix)
        for kind, name in (("P0", "massP0"), ("P1", "massP1"), ("mixed", "massMixed")):
            self.output.dump_operator(name, mass_matrix(mesh, kind))
        return EXIT_OK

    # -- manifest ---------------------------------------------------------

    def write_manifest(self, command: str, exit_code: int) -> None:
        manifest = RunManifest(
            command=command,
            config=self.config.model_dump(mode="json"),
            versions={
                "mixed-bem-solver": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pydantic": pydantic.VERSION,
                "python": platform.python_version(),
            },
            timings=dict(self.timings),
            threads=self.threads,
            exit_code=exit_code,
            outputs=list(self.output.written),
        )
        self.output.write_model("manifest.json", manifest)


def _weakstar_tests():
    """Smooth, non-polynomial test functions for the weak-* residual."""
    return [
        lambda x: np.exp(x[:, 0]) * np.cos(x[:, 1]),
        lambda x: 1.0 / (1.5 + x[:, 2]),
        lambda x: np.sin(x[:, 0] + 2.0 * x[:, 1] - x[:, 2]) + x[:, 0] ** 2,
    ]
