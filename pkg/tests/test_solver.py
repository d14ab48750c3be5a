import numpy as np
import pytest

from app.services.errors import NearSingularError, PartitionError, ProblemDefinitionError, SolverError
from app.services.geometry import partition_boundary
from app.services.kernels import WaveNumber, phi
from app.services.operators import DensityVector, Space, VolumeSourceSpec, l2_norm, zero_extend
from app.services.solver import (
    BlockOperator,
    MixedProblem,
    MixedSolver,
    Side,
    assemble_block_A,
    build_rhs,
    evaluate,
    relative_residual,
    solve_mixed_problem,
    solve_monolithic,
    solve_schur,
)
from app.services.verify import exact_traces, manufactured_case

CENTRE = np.zeros((1, 3))


def _random_blocks(n1=5, n2=4, seed=0):
    rng = np.random.default_rng(seed)

    def noise(*shape):
        return rng.normal(size=shape) + 1j * rng.normal(size=shape)

    return BlockOperator.from_blocks(
        K21=0.3 * noise(n1, n2),
        S11=5.0 * np.eye(n1) + 0.2 * noise(n1, n1),
        D22=4.0 * np.eye(n2) + 0.2 * noise(n2, n2),
        Kstar12=0.3 * noise(n2, n1),
    )


def test_scalar_schur_solve():
    A = BlockOperator.from_blocks(K21=0.0, S11=-1.0, D22=1.0, Kstar12=0.0)
    for solve in (solve_schur, solve_monolithic):
        g1, g2 = solve(A, np.array([1.0]), np.array([2.0]))
        assert g1[0] == pytest.approx(2.0)
        assert g2[0] == pytest.approx(1.0)
        rF, rG = A.apply(g1, g2)
        assert (rF[0], rG[0]) == (pytest.approx(1.0), pytest.approx(2.0))


def test_schur_matches_monolithic():
    A = _random_blocks()
    rng = np.random.default_rng(1)
    F, G = rng.normal(size=5) + 0j, rng.normal(size=4) - 1j
    s1, s2 = solve_schur(A, F, G)
    m1, m2 = solve_monolithic(A, F, G)
    assert np.linalg.norm(np.concatenate([s1 - m1, s2 - m2])) < 1e-10 * np.linalg.norm(np.concatenate([m1, m2]))
    assert relative_residual(A, s1, s2, F, G) < 1e-12


def test_zero_load_gives_zero_solution():
    A = _random_blocks()
    g1, g2 = solve_schur(A, np.zeros(5), np.zeros(4))
    assert not np.any(g1) and not np.any(g2)
    assert all(not np.any(part) for part in A.apply(np.zeros(4), np.zeros(5)))


def test_monolithic_is_permutation_equivariant():
    A = _random_blocks(seed=4)
    F, G = np.arange(5.0) + 0j, np.ones(4) + 0j
    g1, g2 = solve_monolithic(A, F, G)
    p1, p2 = np.array([2, 0, 3, 1]), np.array([4, 1, 0, 3, 2])
    permuted = BlockOperator(
        K21=A.K21[np.ix_(p2, p1)],
        S11=A.S11[np.ix_(p2, p2)],
        D22=A.D22[np.ix_(p1, p1)],
        Kstar12=A.Kstar12[np.ix_(p1, p2)],
    )
    q1, q2 = solve_monolithic(permuted, F[p2], G[p1])
    assert np.allclose(q1, g1[p1]) and np.allclose(q2, g2[p2])


def test_block_shapes_are_checked():
    with pytest.raises(SolverError, match="inconsistent block shapes"):
        BlockOperator.from_blocks(np.zeros((2, 3)), np.eye(2), np.eye(2), np.zeros((3, 2)))


def test_near_singular_schur_block():
    A = BlockOperator.from_blocks(
        K21=np.zeros((1, 2)), S11=[[1.0]], D22=[[1.0, 1.0], [1.0, 1.0 + 1e-15]], Kstar12=np.zeros((2, 1))
    )
    with pytest.raises(NearSingularError) as info:
        solve_schur(A, np.ones(1), np.ones(2))
    assert info.value.condition_estimate > 1e12


def test_block_shapes_follow_partition(sphere2, upper_half2, laplace_ops2):
    problem = MixedProblem.homogeneous(sphere2, upper_half2, 0)
    A = assemble_block_A(problem, laplace_ops2)
    n1 = upper_half2.gamma1_triangles.size
    n2 = upper_half2.interior_gamma2_vertices.size
    assert A.matrix.shape == (n1 + n2, n1 + n2)
    assert (A.n_gamma1, A.n_interior) == (n1, n2)
    F, G = build_rhs(problem, laplace_ops2)
    assert F.shape == (n1,) and G.shape == (n2,)
    assert not np.any(F) and not np.any(G)


def test_zero_data_gives_zero_cauchy_pair(sphere2, upper_half2, laplace_ops2):
    solver = MixedSolver(sphere2, upper_half2, 0, operators=laplace_ops2)
    report = solver.solve(solver.problem())
    assert not np.any(report.cauchy.phi.coefficients) and not np.any(report.cauchy.psi.coefficients)
    assert report.stability_ratio == 0.0
    assert np.allclose(evaluate(solver.problem(), report.cauchy, CENTRE), 0.0)


def test_laplace_interior_manufactured(sphere2, upper_half2, laplace_ops2):
    case = manufactured_case(0, Side.INTERIOR, [0.0, 0.0, 2.0], sphere2, upper_half2, CENTRE)
    assert case.exact_probe_values[0].real == pytest.approx(1.0 / (8.0 * np.pi))
    solver = MixedSolver(sphere2, upper_half2, 0, operators=laplace_ops2)
    problem = case.problem()
    report = solver.solve(problem)
    assert report.method == "schur"
    assert report.succeeded
    assert report.schur_residual < 1e-8
    assert report.path_discrepancy < 1e-10
    assert np.isfinite(report.condition_estimate)
    values = evaluate(problem, report.cauchy, CENTRE)
    assert case.probe_errors(values)[0] < 2e-2
    # Dirichlet data survive the solve untouched on Γ₁
    phi_full = report.cauchy.phi.coefficients
    assert np.array_equal(phi_full[upper_half2.gamma1_vertices], problem.f1.coefficients)
    exact = case.exact_cauchy()
    gap = DensityVector.on(Space.P1, phi_full - exact.phi.coefficients, sphere2)
    assert l2_norm(sphere2, gap) < 5e-2 * l2_norm(sphere2, exact.phi)


def test_helmholtz_interior_manufactured(sphere2, upper_half2, helmholtz_ops2):
    lam = WaveNumber(1.0 + 0.5j)
    probes = np.array([[0.0, 0.0, 0.0], [0.3, 0.0, -0.2]])
    case = manufactured_case(lam, "interior", [2.0, 0.0, 0.5], sphere2, upper_half2, probes)
    solver = MixedSolver(sphere2, upper_half2, lam, operators=helmholtz_ops2)
    problem = case.problem()
    report = solver.solve(problem)
    assert report.schur_residual < 1e-8
    assert np.max(case.probe_errors(evaluate(problem, report.cauchy, probes))) < 3e-2


def test_exterior_manufactured(sphere2, upper_half2):
    lam = WaveNumber(1.0 + 1.0j)
    probe = np.array([[0.0, 0.0, 3.0]])
    case = manufactured_case(lam, Side.EXTERIOR, [0.0, 0.0, 0.0], sphere2, upper_half2, probe)
    assert case.exact_probe_values[0] == pytest.approx(np.exp(-3.0) * np.exp(3.0j) / (12.0 * np.pi))
    problem = case.problem()
    report = solve_mixed_problem(problem)
    assert report.schur_residual < 1e-8
    assert case.probe_errors(evaluate(problem, report.cauchy, probe))[0] < 5e-2


def test_volume_source_with_matching_data(sphere2, upper_half2, laplace_ops2):
    """Boundary data taken from the atom's own field leave u equal to its Newton potential"""
    atom = np.array([0.1, -0.2, 0.15])
    dirichlet, neumann = exact_traces(sphere2, 0, atom)
    solver = MixedSolver(sphere2, upper_half2, 0, operators=laplace_ops2)
    problem = solver.problem(f1=dirichlet, f2=neumann, volume=VolumeSourceSpec.atoms([atom], [1.0]))
    report = solver.solve(problem)
    probes = np.array([[0.4, 0.2, 0.0], [-0.3, 0.0, -0.3]])
    values = evaluate(problem, report.cauchy, probes)
    exact = phi(0, probes, atom)
    assert np.max(np.abs(values - exact) / np.abs(exact)) < 3e-2
    gap = DensityVector.on(Space.P1, report.cauchy.phi.coefficients - dirichlet.coefficients, sphere2)
    assert l2_norm(sphere2, gap) < 5e-2 * l2_norm(sphere2, dirichlet)


def test_volume_atom_load(sphere2, upper_half2, laplace_ops2):
    problem = MixedProblem.homogeneous(sphere2, upper_half2, 0).with_data(
        volume=VolumeSourceSpec.atoms([[0.0, 0.0, 0.0]], [1.0])
    )
    F, _ = build_rhs(problem, laplace_ops2)
    areas = sphere2.areas[upper_half2.gamma1_triangles]
    assert np.allclose(F.real / areas, 1.0 / (4.0 * np.pi), rtol=3e-2)


def test_linearity_and_stability_ratio(sphere2, upper_half2, laplace_ops2):
    case = manufactured_case(0, "interior", [0.0, 2.0, 0.0], sphere2, upper_half2, CENTRE)
    solver = MixedSolver(sphere2, upper_half2, 0, operators=laplace_ops2)
    base = solver.solve(case.problem())
    scaled = solver.solve(case.problem().scaled(10.0))
    assert np.allclose(scaled.cauchy.phi.coefficients, 10.0 * base.cauchy.phi.coefficients)
    assert np.allclose(scaled.cauchy.psi.coefficients, 10.0 * base.cauchy.psi.coefficients)
    assert scaled.stability_ratio == pytest.approx(base.stability_ratio, rel=1e-10)
    assert 0.0 < base.stability_ratio < 100.0


def test_problem_validation(sphere2, upper_half2, laplace_ops2, helmholtz_ops2):
    with pytest.raises(ProblemDefinitionError, match="no volume source"):
        MixedProblem.homogeneous(sphere2, upper_half2, 0, Side.EXTERIOR).with_data(
            volume=VolumeSourceSpec.atoms([[0.0, 0.0, 0.0]], [1.0])
        )
    with pytest.raises(ProblemDefinitionError, match="assembled for"):
        build_rhs(MixedProblem.homogeneous(sphere2, upper_half2, 0), helmholtz_ops2)
    with pytest.raises(ProblemDefinitionError):
        MixedProblem.homogeneous(sphere2, upper_half2, 0).with_data(f1=DensityVector.zeros(Space.P0, sphere2))
    all_neumann = partition_boundary(sphere2, np.full(sphere2.num_triangles, 2))
    with pytest.raises(PartitionError):
        MixedProblem.homogeneous(sphere2, all_neumann, 0)
    solver = MixedSolver(sphere2, upper_half2, 0, operators=laplace_ops2)
    with pytest.raises(ProblemDefinitionError):
        solver.solve(MixedProblem.homogeneous(sphere2, upper_half2, 0, Side.EXTERIOR))


def test_full_data_are_restricted(sphere2, upper_half2):
    problem = MixedProblem.homogeneous(sphere2, upper_half2, 0).with_data(
        f1=DensityVector.on(Space.P1, np.ones(sphere2.num_vertices), sphere2)
    )
    assert problem.f1.space is Space.P1_GAMMA1
    extended = zero_extend(problem.f1).coefficients
    assert np.array_equal(extended[upper_half2.gamma1_vertices], np.ones(upper_half2.gamma1_vertices.size))


@pytest.mark.slow
def test_laplace_manufactured_on_level_three(sphere3, laplace_ops3):
    partition = partition_boundary(sphere3, np.where(sphere3.centroids[:, 2] > 0, 1, 2))
    probes = np.array([[0.0, 0.0, 0.0], [0.0, 0.3, 0.0]])
    case = manufactured_case(0, "interior", [0.0, 0.0, 2.0], sphere3, partition, probes)
    solver = MixedSolver(sphere3, partition, 0, operators=laplace_ops3)
    problem = case.problem()
    report = solver.solve(problem)
    assert report.schur_residual < 1e-8
    assert np.max(case.probe_errors(evaluate(problem, report.cauchy, probes))) < 1e-2
