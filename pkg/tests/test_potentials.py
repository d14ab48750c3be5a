import numpy as np
import pytest

from app.services.errors import NearBoundaryError
from app.services.operators import DensityVector, Space
from app.services.potentials import (
    check_points,
    double_layer_gradient,
    double_layer_potential,
    single_layer_gradient,
    single_layer_potential,
)

INSIDE = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.1]])
OUTSIDE = np.array([[2.0, 0.0, 0.0], [0.0, -3.0, 1.0]])


def test_double_layer_of_one_is_minus_indicator(sphere2):
    """Gauss: the flat-panel solid angle is exact inside and zero outside"""
    one = DensityVector.on(Space.P1, np.ones(sphere2.num_vertices), sphere2)
    inside = double_layer_potential(sphere2, 0, one, INSIDE)
    outside = double_layer_potential(sphere2, 0, one, OUTSIDE)
    assert np.allclose(inside, -1.0, atol=1e-4)
    assert np.allclose(outside, 0.0, atol=1e-4)


def test_single_layer_of_one_at_centre(sphere2):
    one = DensityVector.on(Space.P0, np.ones(sphere2.num_triangles), sphere2)
    value = single_layer_potential(sphere2, 0, one, INSIDE[:1])[0]
    assert value.real == pytest.approx(1.0, rel=5e-2)
    far = single_layer_potential(sphere2, 0, one, np.array([[0.0, 0.0, 10.0]]))[0]
    assert far.real == pytest.approx(sphere2.surface_area / (40.0 * np.pi), rel=1e-3)


def test_gradients_match_differences(sphere2):
    rng = np.random.default_rng(3)
    psi = DensityVector.on(Space.P0, rng.normal(size=sphere2.num_triangles), sphere2)
    phi = DensityVector.on(Space.P1, rng.normal(size=sphere2.num_vertices), sphere2)
    lam = 1.0 + 0.5j
    x = OUTSIDE[1]
    h = 1e-5
    for potential, gradient, density in (
        (single_layer_potential, single_layer_gradient, psi),
        (double_layer_potential, double_layer_gradient, phi),
    ):
        grad = gradient(sphere2, lam, density, x[None, :])[0]
        for axis in range(3):
            e = h * np.eye(3)[axis]
            up = potential(sphere2, lam, density, (x + e)[None, :])
            down = potential(sphere2, lam, density, (x - e)[None, :])
            fd = (up - down)[0]
            assert grad[axis] == pytest.approx(fd / (2.0 * h), rel=1e-5, abs=1e-9)


def test_evaluation_is_thread_independent(sphere2):
    psi = DensityVector.on(Space.P0, np.linspace(-1.0, 1.0, sphere2.num_triangles), sphere2)
    points = np.random.default_rng(0).uniform(-0.5, 0.5, size=(50, 3))
    one = single_layer_potential(sphere2, 0.7, psi, points, threads=1)
    many = single_layer_potential(sphere2, 0.7, psi, points, threads=4)
    assert np.array_equal(one, many)


def test_check_points(sphere2):
    assert check_points(sphere2, INSIDE, "interior").shape == (2, 3)
    with pytest.raises(NearBoundaryError, match="from the boundary"):
        check_points(sphere2, [[0.0, 0.0, 0.99]], "interior")
    with pytest.raises(NearBoundaryError, match="not on the exterior side"):
        check_points(sphere2, INSIDE, "exterior")
    check_points(sphere2, [[0.0, 0.0, 0.99]], None, min_distance=1e-3)
