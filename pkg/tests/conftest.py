import pytest

from app.services.geometry import partition_boundary, HalfSpaceRule, unit_sphere_mesh
from app.services.kernels import WaveNumber
from app.services.solver import BoundaryOperators


@pytest.fixture(scope="session")
def sphere1():
    return unit_sphere_mesh(1)


@pytest.fixture(scope="session")
def sphere2():
    return unit_sphere_mesh(2)


@pytest.fixture(scope="session")
def sphere3():
    return unit_sphere_mesh(3)


@pytest.fixture(scope="session")
def upper_half2(sphere2):
    """z > 0 is Dirichlet, the rest Neumann"""
    return partition_boundary(sphere2, HalfSpaceRule())


@pytest.fixture(scope="session")
def laplace_ops1(sphere1):
    return BoundaryOperators.assemble(sphere1, WaveNumber(0))


@pytest.fixture(scope="session")
def laplace_ops2(sphere2):
    return BoundaryOperators.assemble(sphere2, WaveNumber(0))


@pytest.fixture(scope="session")
def helmholtz_ops2(sphere2):
    return BoundaryOperators.assemble(sphere2, WaveNumber(1.0 + 0.5j))


@pytest.fixture(scope="session")
def laplace_ops3(sphere3):
    return BoundaryOperators.assemble(sphere3, WaveNumber(0))
