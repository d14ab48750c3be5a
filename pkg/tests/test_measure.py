import numpy as np
import pytest

from app.services.errors import MeasureError
from app.services.kernels import M_INV_4PI, WaveNumber
from app.services.measure import (
    MeasureData,
    VolumeGrid,
    approx_solve_sequence,
    bump_potential,
    bump_potential_gradient,
    embedding_check,
    lr_norm,
    marcinkiewicz_quasinorm,
    mollify,
    total_variation,
    truncate,
    w1q_diagnostic,
    weakstar_residual,
)
from app.services.operators import DensityVector, Space
from app.services.solver import MixedSolver, Side

OBSERVATION = np.array([[0.5, 0.0, 0.0], [0.0, -0.5, 0.1], [0.0, 0.2, -0.5]])


@pytest.fixture(scope="module")
def laplace_solver(sphere2, upper_half2, laplace_ops2):
    return MixedSolver(sphere2, upper_half2, WaveNumber(0), operators=laplace_ops2)


@pytest.fixture(scope="module")
def origin_atom():
    return MeasureData.atoms([[0.0, 0.0, 0.0]], [1.0])


def test_truncation():
    assert np.array_equal(truncate([3.0, -5.0, 1.0], 2.0), [2.0, -2.0, 1.0])
    with pytest.raises(MeasureError):
        truncate([1.0], 0.0)


def test_total_variation():
    assert total_variation(MeasureData.atoms([[0.0, 0.0, 0.0]], [1.0])) == pytest.approx(1.0)
    two = MeasureData.atoms([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]], [1.0, -1.0])
    assert total_variation(two) == pytest.approx(2.0)
    smooth = MeasureData(density_points=np.zeros((2, 3)), density_weights=[0.5, 0.5], density_values=[2.0, -2.0])
    assert total_variation(smooth) == pytest.approx(2.0)


def test_measure_data_validation():
    with pytest.raises(MeasureError, match="exactly one weight"):
        MeasureData.atoms([[0.0, 0.0, 0.0]], [1.0, 2.0])
    with pytest.raises(MeasureError):
        MeasureData.atoms([[0.0, 0.0, 0.0]], [np.nan])
    assert MeasureData().is_empty


def test_support_must_be_inside(sphere2):
    with pytest.raises(MeasureError, match="inside the domain"):
        MeasureData.atoms([[2.0, 0.0, 0.0]], [1.0]).check_support(sphere2)


def test_mollified_atom_keeps_mass_and_shrinks(sphere2, origin_atom):
    for eps in (0.4, 0.2):
        mollified = mollify(origin_atom, eps, sphere2)
        assert mollified.mass == pytest.approx(1.0, abs=1e-12)
        radius = np.linalg.norm(mollified.points, axis=1).max()
        assert radius < eps
    wide = np.linalg.norm(mollify(origin_atom, 0.4, sphere2).points, axis=1).max()
    narrow = np.linalg.norm(mollify(origin_atom, 0.2, sphere2).points, axis=1).max()
    assert narrow == pytest.approx(wide / 2)


def test_mollify_rejects_radius_reaching_boundary(sphere2):
    mu = MeasureData.atoms([[0.0, 0.0, 0.7]], [1.0])
    with pytest.raises(MeasureError, match="reaches the boundary"):
        mollify(mu, 0.5, sphere2)
    with pytest.raises(MeasureError):
        mollify(mu, 0.0, sphere2)


def test_weakstar_residual_vanishes_on_affine_tests(sphere2):
    mu = MeasureData.atoms([[0.1, 0.0, 0.0], [0.0, -0.2, 0.1]], [1.0, -0.5])
    mollified = mollify(mu, 0.3, sphere2)
    tests = [lambda x: np.ones(len(x)), lambda x: x[:, 0], lambda x: 2.0 * x[:, 1] - x[:, 2]]
    assert weakstar_residual(mu, mollified, tests) < 1e-12
    # a curved test function only agrees up to O(ε²)
    quadratic = weakstar_residual(mu, mollified, [lambda x: np.sum(x**2, axis=1)])
    assert 0 < quadratic < 0.3**2


def test_bump_potential_matches_point_source_outside_support():
    centre = np.array([0.1, 0.0, -0.1])
    eps = 0.2
    far = centre + np.array([[0.3, 0.0, 0.0], [0.0, 0.25, 0.1], [0.5, 0.5, 0.5]])
    r = np.linalg.norm(far - centre, axis=1)
    assert np.allclose(bump_potential(far, centre, eps), M_INV_4PI / r, rtol=1e-14)
    # continuous across r = ε and bounded at the centre
    edge = bump_potential(centre + np.array([[0.999 * eps, 0.0, 0.0]]), centre, eps)[0]
    assert edge == pytest.approx(M_INV_4PI / eps, rel=1e-2)
    assert np.isfinite(bump_potential(centre[None, :], centre, eps)[0])


def test_bump_gradient_matches_finite_differences():
    centre = np.zeros(3)
    eps = 0.3
    x = np.array([[0.1, -0.05, 0.07], [0.2, 0.1, 0.0], [0.5, 0.0, 0.1]])
    h = 1e-6
    fd = np.stack(
        [
            (bump_potential(x + h * e, centre, eps) - bump_potential(x - h * e, centre, eps)) / (2 * h)
            for e in np.eye(3)
        ],
        axis=1,
    )
    assert np.allclose(bump_potential_gradient(x, centre, eps), fd, atol=1e-6)


def test_lr_norm():
    assert lr_norm([1.0, 2.0], [1.0, 1.0], 2.0) == pytest.approx(np.sqrt(5.0))
    with pytest.raises(MeasureError):
        lr_norm([1.0], [1.0], 0.0)


def test_marcinkiewicz_quasinorm():
    weights = np.full(100, 0.01)
    assert marcinkiewicz_quasinorm(np.zeros(100), weights, 1.5) == 0.0

    rng = np.random.default_rng(3)
    g = rng.exponential(size=100)
    base = marcinkiewicz_quasinorm(g, weights, 1.5)
    assert marcinkiewicz_quasinorm(4.0 * g, weights, 1.5) == pytest.approx(4.0**1.5 * base)

    # constant field: sup_b b^r |{|g| > b}| approaches c^r V from below
    constant = marcinkiewicz_quasinorm(np.full(100, 2.0), weights, 1.5)
    assert 0.8 * 2.0**1.5 < constant <= 2.0**1.5

    with pytest.raises(MeasureError):
        marcinkiewicz_quasinorm([], [], 1.5)


def test_embedding_chain_is_consistent():
    rng = np.random.default_rng(5)
    g = 1.0 / rng.uniform(0.05, 1.0, size=400)
    chain = embedding_check(g, np.full(400, 1.0 / 400), 1.5)
    assert chain.consistent
    assert chain.lower_norm > 0
    with pytest.raises(MeasureError):
        embedding_check(g, np.full(400, 1.0 / 400), 1.5, delta=2.0)


def test_volume_grid_fills_the_sphere(sphere2):
    grid = VolumeGrid.build(sphere2, 0.1)
    assert grid.volume == pytest.approx(sphere2.volume, rel=0.1)
    shaved = grid.shaved(sphere2, 0.3)
    assert 0 < shaved.points.shape[0] < grid.points.shape[0]
    with pytest.raises(MeasureError):
        VolumeGrid.build(sphere2, 0.0)


def test_approximating_sequence_requires_laplace_interior(
    sphere2, upper_half2, laplace_ops2, helmholtz_ops2, origin_atom
):
    helmholtz = MixedSolver(sphere2, upper_half2, WaveNumber(1.0 + 0.5j), operators=helmholtz_ops2)
    with pytest.raises(MeasureError, match="λ = 0"):
        approx_solve_sequence(helmholtz, None, None, origin_atom, [0.2], OBSERVATION)
    exterior = MixedSolver(sphere2, upper_half2, WaveNumber(0), side=Side.EXTERIOR, operators=laplace_ops2)
    with pytest.raises(MeasureError, match="interior"):
        approx_solve_sequence(exterior, None, None, origin_atom, [0.2], OBSERVATION)


def test_approximating_solutions_approach_atomic_reference(laplace_solver, origin_atom):
    study = approx_solve_sequence(laplace_solver, None, None, origin_atom, [0.4, 0.2, 0.1], OBSERVATION)
    gaps = study.gaps()
    assert gaps.shape == (3,)
    assert study.converges_monotonically
    assert gaps[-1] < 1e-3


def test_empty_measure_reproduces_boundary_only_solution(laplace_solver, sphere2):
    ones = DensityVector.on(Space.P1, np.ones(sphere2.num_vertices), sphere2)
    study = approx_solve_sequence(laplace_solver, ones, None, MeasureData(), [0.3, 0.1], OBSERVATION)
    assert np.allclose(study.gaps(), 0.0, atol=1e-12)
    # u ≡ 1 solves the Laplace problem with f1 = 1 and f2 = 0
    assert np.allclose(study.reference.observations, 1.0, atol=2e-2)


def test_w1q_diagnostic(laplace_solver, sphere2):
    mu = MeasureData.atoms([[0.0, 0.0, 0.2], [0.0, 0.1, -0.2]], [1.0, 0.5])
    study = approx_solve_sequence(laplace_solver, None, None, mu, [0.4, 0.2], OBSERVATION)
    grid = VolumeGrid.build(sphere2, 0.2)
    with pytest.raises(MeasureError, match="outside"):
        w1q_diagnostic(study, 1.5, grid)
    with pytest.raises(MeasureError):
        w1q_diagnostic(study, 0.5, grid)

    diagnostic = w1q_diagnostic(study, 1.2, grid)
    assert len(diagnostic.rows) == 2
    assert diagnostic.excluded_points > 0
    for row in diagnostic.rows:
        assert np.isfinite(row.total) and row.total > 0
        assert row.truncated_energy >= 0
        assert row.embedding.consistent
    assert diagnostic.variation < 0.5
