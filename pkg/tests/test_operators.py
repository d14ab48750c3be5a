import numpy as np
import pytest

from app.services.errors import DofCapError, KernelSingularityError, NearBoundaryError, PartitionError
from app.services.geometry import partition_boundary
from app.services.kernels import WaveNumber, grad_x_phi, phi
from app.services.operators import (
    DensityVector,
    OperatorAssembler,
    OperatorKind,
    Space,
    VolumeSourceSpec,
    assemble_adjoint_double_layer,
    assemble_double_layer,
    assemble_hypersingular,
    assemble_operators,
    assemble_single_layer,
    check_sources,
    l2_norm,
    l2_project,
    mass_matrix,
    newton_potential_eval,
    newton_potential_gradient,
    newton_traces,
    restrict,
    restrict_block,
    zero_extend,
)


def _relative(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_operator_shapes(sphere1, laplace_ops1):
    nt, nv = sphere1.num_triangles, sphere1.num_vertices
    assert (nt, nv) == (80, 42)
    assert laplace_ops1.S.shape == (80, 80)
    assert laplace_ops1.K.shape == (80, 42)
    assert laplace_ops1.Kstar.shape == (42, 80)
    assert laplace_ops1.D.shape == (42, 42)
    assert laplace_ops1.K.rows is Space.P0 and laplace_ops1.K.cols is Space.P1
    assert laplace_ops1.S.kind is OperatorKind.S


def test_symmetries(laplace_ops2, helmholtz_ops2):
    for ops in (laplace_ops2, helmholtz_ops2):
        assert _relative(ops.S.entries.T, ops.S.entries) < 1e-12
        assert _relative(ops.D.entries.T, ops.D.entries) < 1e-12
        assert _relative(ops.Kstar.entries.T, ops.K.entries) < 1e-12


def test_laplace_single_layer_is_positive(laplace_ops2):
    s = laplace_ops2.S.entries
    assert np.max(np.abs(s.imag)) == 0
    assert np.linalg.eigvalsh(s.real).min() > 0


def test_hypersingular_annihilates_constants(sphere2, laplace_ops2):
    d_one = laplace_ops2.D.entries @ np.ones(sphere2.num_vertices)
    assert np.max(np.abs(d_one)) < 1e-10 * np.max(np.abs(laplace_ops2.D.entries))


def test_double_layer_constant(sphere2, laplace_ops2):
    """(K 1)_i ≈ -|T_i| / 2 on a smooth closed surface"""
    k_one = laplace_ops2.K.entries @ np.ones(sphere2.num_vertices)
    gap = (k_one.real + 0.5 * sphere2.areas) / sphere2.areas
    assert np.sqrt(np.sum(sphere2.areas * gap**2) / sphere2.surface_area) < 5e-2


def test_single_layer_of_one_on_unit_sphere(sphere2, laplace_ops2):
    """𝕊1 = 1 on the unit sphere"""
    s_one = (laplace_ops2.S.entries @ np.ones(sphere2.num_triangles)).real / sphere2.areas
    assert np.sqrt(np.sum(sphere2.areas * (s_one - 1.0) ** 2) / sphere2.surface_area) < 5e-2


def test_assembly_is_thread_independent(sphere1):
    lam = WaveNumber(1.0 + 0.5j)
    one = assemble_operators(sphere1, lam, threads=1)
    many = assemble_operators(sphere1, lam, threads=3)
    for kind in ("S", "K", "Kstar", "D"):
        assert np.array_equal(one[kind].entries, many[kind].entries)


def test_single_kind_matches_bundle(sphere1, laplace_ops1):
    s = assemble_single_layer(sphere1, 0)
    assert np.allclose(s.entries, laplace_ops1.S.entries, rtol=1e-12, atol=0)
    for helper, bundled in (
        (assemble_double_layer, laplace_ops1.K),
        (assemble_adjoint_double_layer, laplace_ops1.Kstar),
        (assemble_hypersingular, laplace_ops1.D),
    ):
        single = helper(sphere1, 0)
        assert single.kind is bundled.kind
        scale = np.abs(bundled.entries).max()
        assert np.allclose(single.entries, bundled.entries, rtol=1e-12, atol=1e-12 * scale)


def test_touching_pairs_are_integrated(sphere1):
    assembler = OperatorAssembler(sphere1, 0)
    s = assembler.assemble(("S",))["S"].entries.real
    # 120 edges; 12 vertices of valence 5 and 30 of valence 6 give 330 vertex-only pairs
    assert assembler.singular_counts == {"identical": 80, "shared_edge": 120, "shared_vertex": 330}
    assert np.all(np.diag(s) > 0)


def test_gradient_kinds_match_bundle_for_helmholtz(sphere1):
    lam = WaveNumber(1.0 + 0.5j)
    bundle = assemble_operators(sphere1, lam)
    for helper, kind in ((assemble_double_layer, "K"), (assemble_adjoint_double_layer, "Kstar")):
        single = helper(sphere1, lam).entries
        expected = bundle[kind].entries
        assert np.allclose(single, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())
    k = assemble_double_layer(sphere1, lam).entries
    kstar = assemble_adjoint_double_layer(sphere1, lam).entries
    assert _relative(kstar.T, k) < 1e-12


def test_dof_cap(sphere2):
    with pytest.raises(DofCapError, match="cap of 100"):
        assemble_operators(sphere2, 0, dof_cap=100)


def test_restrict_block(sphere2, upper_half2, laplace_ops2):
    block = restrict_block(laplace_ops2.K, Space.P0_GAMMA1, Space.P1_INTERIOR_GAMMA2, sphere2, upper_half2)
    assert block.shape == (upper_half2.gamma1_triangles.size, upper_half2.interior_gamma2_vertices.size)
    i, j = upper_half2.gamma1_triangles[3], upper_half2.interior_gamma2_vertices[5]
    assert block.entries[3, 5] == laplace_ops2.K.entries[i, j]
    with pytest.raises(ValueError):
        restrict_block(laplace_ops2.K, Space.P1_GAMMA1, Space.P1, sphere2, upper_half2)


def test_restrict_block_on_empty_part(sphere2, laplace_ops2):
    all_dirichlet = partition_boundary(sphere2, np.ones(sphere2.num_triangles, dtype=int))
    with pytest.raises(PartitionError, match="empty dof set"):
        restrict_block(laplace_ops2.S, Space.P0_GAMMA2, Space.P0, sphere2, all_dirichlet)


def test_restrict_and_zero_extend(sphere2, upper_half2):
    coeffs = np.arange(sphere2.num_triangles, dtype=float)
    full = DensityVector.on(Space.P0, coeffs, sphere2)
    assert zero_extend(full) is full
    part = restrict(full, Space.P0_GAMMA1, sphere2, upper_half2)
    assert np.array_equal(part.coefficients, coeffs[upper_half2.gamma1_triangles])
    extended = zero_extend(part)
    assert np.array_equal(extended.coefficients[upper_half2.gamma1_triangles], part.coefficients)
    assert not np.any(extended.coefficients[upper_half2.gamma2_triangles])
    again = restrict(extended, Space.P0_GAMMA1, sphere2, upper_half2)
    assert np.array_equal(again.coefficients, part.coefficients)
    with pytest.raises(ValueError):
        restrict(full, Space.P1_GAMMA1, sphere2, upper_half2)


def test_single_atom_density(sphere2):
    coeffs = np.zeros(sphere2.num_triangles)
    coeffs[17] = 2.0
    d = zero_extend(restrict(DensityVector.on(Space.P0, coeffs, sphere2), Space.P0, sphere2))
    assert np.count_nonzero(d.coefficients) == 1


def test_density_size_is_checked(sphere2, upper_half2):
    with pytest.raises(ValueError, match="coefficients"):
        DensityVector.on(Space.P0_GAMMA1, np.ones(3), sphere2, upper_half2)
    with pytest.raises(PartitionError):
        DensityVector.zeros(Space.P0_GAMMA1, sphere2)


def test_apply_checks_space(sphere1, laplace_ops1):
    with pytest.raises(ValueError, match="acts on"):
        laplace_ops1.S.apply(DensityVector.zeros(Space.P1, sphere1))
    assert np.allclose(laplace_ops1.K.apply(DensityVector.zeros(Space.P1, sphere1)), 0)


def test_mass_matrices(sphere2):
    p0 = mass_matrix(sphere2, "P0").entries.real
    assert np.allclose(p0, np.diag(sphere2.areas))
    p1 = mass_matrix(sphere2, "P1").entries.real
    assert np.allclose(p1.sum(axis=1), sphere2.vertex_star_areas / 3.0)
    assert np.allclose(p1, p1.T)
    mixed = mass_matrix(sphere2, "mixed").entries.real
    assert mixed.shape == (sphere2.num_triangles, sphere2.num_vertices)
    assert np.allclose(mixed.sum(axis=1), sphere2.areas)
    with pytest.raises(ValueError):
        mass_matrix(sphere2, "P2")


def test_projecting_constants(sphere2):
    p0 = l2_project(sphere2, Space.P0, lambda x: np.full(len(x), 2.5))
    p1 = l2_project(sphere2, Space.P1, lambda x: np.full(len(x), -1.0 + 1.0j))
    assert np.allclose(p0.coefficients, 2.5)
    assert np.allclose(p1.coefficients, -1.0 + 1.0j)
    assert l2_norm(sphere2, p0) == pytest.approx(2.5 * np.sqrt(sphere2.surface_area))


def test_projecting_linear_function_is_exact_in_p1(sphere2):
    p1 = l2_project(sphere2, Space.P1, lambda x: x[:, 0] - 2.0 * x[:, 2])
    expected = sphere2.vertices[:, 0] - 2.0 * sphere2.vertices[:, 2]
    assert np.allclose(p1.coefficients, expected, atol=1e-10)


def test_newton_potential_is_a_sum_of_fundamental_solutions():
    lam = WaveNumber(1.0 + 0.2j)
    src = VolumeSourceSpec.atoms([[0.1, 0.0, 0.0], [0.0, -0.2, 0.1]], [1.0, -0.5j])
    x = np.array([[0.5, 0.5, 0.5], [-0.3, 0.2, 0.0]])
    expected = phi(lam, x, src.atom_points[0]) - 0.5j * phi(lam, x, src.atom_points[1])
    assert np.allclose(newton_potential_eval(src, lam, x), expected)
    grad = grad_x_phi(lam, x, src.atom_points[0]) - 0.5j * grad_x_phi(lam, x, src.atom_points[1])
    assert np.allclose(newton_potential_gradient(src, lam, x), grad)
    assert src.total_variation == pytest.approx(1.5)
    with pytest.raises(KernelSingularityError):
        newton_potential_eval(src, lam, src.atom_points[:1])


def test_volume_source_validation():
    with pytest.raises(ValueError, match="one weight"):
        VolumeSourceSpec.atoms([[0.0, 0.0, 0.0]], [1.0, 2.0])
    assert VolumeSourceSpec().is_empty
    scaled = VolumeSourceSpec.atoms([[0.0, 0.0, 0.0]], [2.0]).scaled(3.0)
    assert scaled.atom_weights[0] == 6.0


def test_newton_traces_of_centred_atom(sphere2):
    src = VolumeSourceSpec.atoms([[0.0, 0.0, 0.0]], [1.0])
    dirichlet, neumann = newton_traces(src, 0, sphere2)
    assert dirichlet.space is Space.P1 and neumann.space is Space.P0
    # vertices lie on the sphere, panels just inside it
    assert np.allclose(dirichlet.coefficients.real, 1.0 / (4.0 * np.pi), rtol=3e-2)
    assert np.allclose(neumann.coefficients.real, -1.0 / (4.0 * np.pi), rtol=6e-2)
    empty_d, empty_n = newton_traces(VolumeSourceSpec(), 0, sphere2)
    assert not np.any(empty_d.coefficients) and not np.any(empty_n.coefficients)


def test_sources_must_be_inside(sphere2):
    with pytest.raises(NearBoundaryError, match="not inside"):
        check_sources(VolumeSourceSpec.atoms([[0.0, 0.0, 1.5]], [1.0]), sphere2)
    check_sources(VolumeSourceSpec.atoms([[0.0, 0.0, 0.2]], [1.0]), sphere2)
