"""Single and double layer potentials (and their gradients) away from the boundary.

Evaluation uses one regular triangle rule on every panel, so callers must keep
points at least one panel diameter from Γ; :func:`check_points` enforces this.
"""

import logging
from typing import Optional

import numpy as np

from app.services import kernels
from app.services.errors import NearBoundaryError
from app.services.geometry import SurfaceMesh, distance_to_surface, is_inside
from app.services.operators import DensityVector, Space, zero_extend
from app.services.quadrature import gauss_triangle
from app.services.settings import ordered_map

logger = logging.getLogger(__name__)

EVALUATION_ORDER = 6
PAIR_BUDGET = 1 << 18


def check_points(mesh: SurfaceMesh, points, side: Optional[str], min_distance: Optional[float] = None):
    """Reject points closer than ``min_distance`` (default one panel diameter) or on the wrong side."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        return pts
    limit = mesh.max_diameter if min_distance is None else float(min_distance)
    dist = distance_to_surface(mesh, pts)
    close = np.nonzero(dist <= limit)[0]
    if close.size:
        p = close[0]
        raise NearBoundaryError(
            f"evaluation point {pts[p].tolist()} is {dist[p]:.3g} from the boundary; "
            f"need more than {limit:.3g}"
        )
    if side is not None:
        inside = is_inside(mesh, pts)
        wrong = np.nonzero(inside != (side == "interior"))[0]
        if wrong.size:
            raise NearBoundaryError(f"evaluation point {pts[wrong[0]].tolist()} is not on the {side} side")
    return pts


def _density_at_nodes(mesh: SurfaceMesh, density: DensityVector, nodes: np.ndarray) -> np.ndarray:
    full = zero_extend(density)
    if full.space is Space.P0:
        return np.repeat(full.coefficients[:, None], nodes.shape[0], axis=1)
    return full.coefficients[mesh.triangles] @ nodes.T


class _BoundarySamples:
    """Quadrature nodes on Γ with weights × density values, flattened."""

    def __init__(self, mesh: SurfaceMesh, density: DensityVector, order: int):
        rule = gauss_triangle(order)
        self.points = rule.points(mesh.corners).reshape(-1, 3)
        weights = mesh.areas[:, None] * rule.weights[None, :]
        self.strengths = (weights * _density_at_nodes(mesh, density, rule.nodes)).reshape(-1)
        self.normals = np.repeat(mesh.normals, rule.size, axis=0)


def _evaluate(points: np.ndarray, size: int, block, threads: Optional[int]):
    step = max(1, PAIR_BUDGET // max(1, size))
    chunks = [points[s : s + step] for s in range(0, points.shape[0], step)]
    parts = ordered_map(block, chunks, threads)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=complex)


def single_layer_potential(
    mesh: SurfaceMesh, wavenumber, density: DensityVector, points, order: int = EVALUATION_ORDER, threads=None
) -> np.ndarray:
    """𝕊ψ(x) = ∫_Γ Φ(x - y) ψ(y) dy."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = _BoundarySamples(mesh, density, order)

    def block(p):
        return kernels.phi(wavenumber, p[:, None, :], src.points[None, :, :]) @ src.strengths

    return _evaluate(pts, src.points.shape[0], block, threads)


def double_layer_potential(
    mesh: SurfaceMesh, wavenumber, density: DensityVector, points, order: int = EVALUATION_ORDER, threads=None
) -> np.ndarray:
    """𝕂φ(x) = ∫_Γ ∂Φ/∂n_y(x - y) φ(y) dy."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = _BoundarySamples(mesh, density, order)

    def block(p):
        kern = kernels.dphi_dny(wavenumber, p[:, None, :], src.points[None, :, :], src.normals[None, :, :])
        return kern @ src.strengths

    return _evaluate(pts, src.points.shape[0], block, threads)


def single_layer_gradient(
    mesh: SurfaceMesh, wavenumber, density: DensityVector, points, order: int = EVALUATION_ORDER, threads=None
) -> np.ndarray:
    """∇_x 𝕊ψ(x), shape (n, 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = _BoundarySamples(mesh, density, order)

    def block(p):
        grad = kernels.grad_x_phi(wavenumber, p[:, None, :], src.points[None, :, :])
        return np.einsum("pkd,k->pd", grad, src.strengths)

    return _evaluate(pts, 3 * src.points.shape[0], block, threads).reshape(-1, 3)


def double_layer_gradient(
    mesh: SurfaceMesh, wavenumber, density: DensityVector, points, order: int = EVALUATION_ORDER, threads=None
) -> np.ndarray:
    """∇_x 𝕂φ(x), shape (n, 3)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    src = _BoundarySamples(mesh, density, order)

    def block(p):
        grad = kernels.grad_x_dphi_dny(
            wavenumber, p[:, None, :], src.points[None, :, :], src.normals[None, :, :]
        )
        return np.einsum("pkd,k->pd", grad, src.strengths)

    return _evaluate(pts, 9 * src.points.shape[0], block, threads).reshape(-1, 3)
