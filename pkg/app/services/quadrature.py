"""Quadrature on reference triangles and on touching panel pairs.

Barycentric convention: a node ``(b0, b1, b2)`` maps to ``b0*v0 + b1*v1 + b2*v2``.
Weights are normalised so that they sum to one; physical integrals pick up
the panel areas as a factor (``|T|`` for one panel, ``|T||T'|`` for a pair).

Touching pairs use the Sauter-Schwab regularising transforms on the
reference triangle ``{0 <= r2 <= r1 <= 1}`` with ``x = (1-r1)v0 + (r1-r2)v1 + r2 v2``.
The shared vertex (or edge) is expected at local vertex 0 (vertices 0, 1)
of both panels; :func:`align_pair` produces such an ordering.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from app.services.errors import QuadratureError

logger = logging.getLogger(__name__)

MAX_TRIANGLE_ORDER = 10
MAX_SYMMETRIC_ORDER = 5
SINGULAR_ORDERS = range(2, 9)


class PairClass(str, Enum):
    IDENTICAL = "identical"
    SHARED_EDGE = "shared_edge"
    SHARED_VERTEX = "shared_vertex"
    DISJOINT = "disjoint"


@dataclass(frozen=True, eq=False)
class TriangleRule:
    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    def points(self, corners: np.ndarray) -> np.ndarray:
        """Physical nodes for corner arrays of shape (..., 3, 3)."""
        return np.einsum("qk,...kd->...qd", self.nodes, corners)


@dataclass(frozen=True, eq=False)
class PanelPairRule:
    """Paired nodes (x_k, y_k) with positive weights summing to one."""

    pair_class: PairClass
    q: int
    x_nodes: np.ndarray
    y_nodes: np.ndarray
    weights: np.ndarray
    num_subdomains: int

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


def _freeze(*arrays):
    for arr in arrays:
        arr.setflags(write=False)


def _orbit(a: float, b: float) -> np.ndarray:
    """Barycentric points (a, b, b) and its two rotations."""
    return np.array([[a, b, b], [b, a, b], [b, b, a]])


def _triangle_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    if order == 1:
        return np.array([[1.0, 1.0, 1.0]]) / 3.0, np.array([1.0])
    if order == 2:
        return _orbit(2.0 / 3.0, 1.0 / 6.0), np.full(3, 1.0 / 3.0)
    if order in (3, 4):
        nodes = np.concatenate(
            [
                _orbit(0.108103018168070227360, 0.445948490915964886320),
                _orbit(0.816847572980458513080, 0.091576213509770743460),
            ]
        )
        weights = np.repeat([0.22338158967801146570, 0.10995174365532186764], 3)
        return nodes, weights
    if order == 5:
        s15 = np.sqrt(15.0)
        nodes = np.concatenate(
            [
                np.array([[1.0, 1.0, 1.0]]) / 3.0,
                _orbit((9.0 - 2.0 * s15) / 21.0, (6.0 + s15) / 21.0),
                _orbit((9.0 + 2.0 * s15) / 21.0, (6.0 - s15) / 21.0),
            ]
        )
        weights = np.concatenate(
            [[0.225], np.full(3, (155.0 + s15) / 1200.0), np.full(3, (155.0 - s15) / 1200.0)]
        )
        return nodes, weights
    return _conical_rule(order // 2 + 1)


def _conical_rule(m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Collapsed-square product rule with m x m nodes, exact to degree 2m - 1."""
    xl, wl = roots_legendre(m)
    xj, wj = roots_jacobi(m, 1.0, 0.0)
    s = (xj + 1.0) / 2.0
    t = (xl + 1.0) / 2.0
    u = np.repeat(s, m)
    v = np.outer(1.0 - s, t).reshape(-1)
    weights = np.outer(wj, wl).reshape(-1) / 4.0
    nodes = np.column_stack([1.0 - u - v, u, v])
    return nodes, weights


@lru_cache(maxsize=None)
def gauss_triangle(order: int) -> TriangleRule:
    """Positive-weight rule on the reference triangle exact for polynomials of degree ``order``.

    Orders 1 to 5 are fully symmetric (invariant under permutations of the
    barycentric coordinates). Orders 6 and above are collapsed Gauss-Jacobi
    products: exact to the same degree, but not symmetric.
    """
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_TRIANGLE_ORDER:
        raise QuadratureError(
            f"Unsupported triangle quadrature order {order!r}; use 1..{MAX_TRIANGLE_ORDER}"
        )
    if order > MAX_SYMMETRIC_ORDER:
        logger.debug(f"Triangle order {order} uses the collapsed product rule")
    nodes, weights = _triangle_rule(int(order))
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    nodes = np.asarray(nodes, dtype=float)
    _freeze(nodes, weights)
    return TriangleRule(nodes=nodes, weights=weights, order=int(order))


def tensor_pair_rule(rule_x: TriangleRule, rule_y: TriangleRule) -> PanelPairRule:
    """Tensor product of two triangle rules written as paired nodes."""
    nx, ny = rule_x.size, rule_y.size
    x_nodes = np.repeat(rule_x.nodes, ny, axis=0)
    y_nodes = np.tile(rule_y.nodes, (nx, 1))
    weights = np.outer(rule_x.weights, rule_y.weights).reshape(-1)
    _freeze(x_nodes, y_nodes, weights)
    return PanelPairRule(
        pair_class=PairClass.DISJOINT,
        q=max(rule_x.order, rule_y.order),
        x_nodes=x_nodes,
        y_nodes=y_nodes,
        weights=weights,
        num_subdomains=1,
    )


def classify_pair(t1: int, t2: int, mesh) -> PairClass:
    if t1 == t2:
        return PairClass.IDENTICAL
    common = np.intersect1d(mesh.triangles[t1], mesh.triangles[t2]).size
    if common == 2:
        return PairClass.SHARED_EDGE
    if common == 1:
        return PairClass.SHARED_VERTEX
    return PairClass.DISJOINT


def align_pair(tri_x, tri_y) -> Tuple[PairClass, np.ndarray, np.ndarray]:
    """Local vertex orders placing the shared vertices first, in the same order on both panels.

    Returns ``(pair_class, perm_x, perm_y)``; ``perm[a]`` is the original local
    index of reordered vertex ``a``.
    """
    tri_x = [int(v) for v in tri_x]
    tri_y = [int(v) for v in tri_y]
    if tri_x == tri_y:
        return PairClass.IDENTICAL, np.arange(3), np.arange(3)
    shared = [v for v in tri_x if v in tri_y]
    if len(shared) == 3:
        raise QuadratureError("panels share all three vertices but differ in order")
    if len(shared) == 0:
        return PairClass.DISJOINT, np.arange(3), np.arange(3)
    rest_x = [v for v in tri_x if v not in shared]
    rest_y = [v for v in tri_y if v not in shared]
    order_x = shared + rest_x
    order_y = shared + rest_y
    perm_x = np.array([tri_x.index(v) for v in order_x])
    perm_y = np.array([tri_y.index(v) for v in order_y])
    pair_class = PairClass.SHARED_EDGE if len(shared) == 2 else PairClass.SHARED_VERTEX
    return pair_class, perm_x, perm_y


def _barycentric(r1, r2) -> np.ndarray:
    return np.column_stack([1.0 - r1, r1 - r2, r2])


def _identical_subdomains(xi, e1, e2, e3):
    jac = xi**3 * e1**2 * e2
    x1 = (xi, xi * (1.0 - e1 + e1 * e2))
    y1 = (xi * (1.0 - e1 * e2 * e3), xi * (1.0 - e1))
    x3 = (xi, xi * e1 * (1.0 - e2 + e2 * e3))
    y3 = (xi * (1.0 - e1 * e2), xi * e1 * (1.0 - e2))
    x5 = (xi * (1.0 - e1 * e2 * e3), xi * e1 * (1.0 - e2 * e3))
    y5 = (xi, xi * e1 * (1.0 - e2))
    return [
        (x1, y1, jac),
        (y1, x1, jac),
        (x3, y3, jac),
        (y3, x3, jac),
        (x5, y5, jac),
        (y5, x5, jac),
    ]


def _shared_edge_subdomains(xi, e1, e2, e3):
    def split(w0, w1, w2, w3, jac):
        return ((w0, w3), (w0 + w1, w2), jac)

    j1 = xi**3 * e1**2
    j2 = xi**3 * e1**2 * e2
    return [
        split(xi, -xi * e1 * e2, xi * e1 * (1.0 - e2), xi * e1 * e3, j1),
        split(xi, -xi * e1 * e2 * e3, xi * e1 * e2 * (1.0 - e3), xi * e1, j2),
        split(xi * (1.0 - e1 * e2), xi * e1 * e2, xi * e1 * e2 * e3, xi * e1 * (1.0 - e2), j2),
        split(
            xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * e3, xi * e1, xi * e1 * e2 * (1.0 - e3), j2
        ),
        split(
            xi * (1.0 - e1 * e2 * e3), xi * e1 * e2 * e3, xi * e1 * e2, xi * e1 * (1.0 - e2 * e3), j2
        ),
    ]


def _shared_vertex_subdomains(xi, e1, e2, e3):
    jac = xi**3 * e2
    x = (xi, xi * e1)
    y = (xi * e2, xi * e2 * e3)
    return [(x, y, jac), (y, x, jac)]


_SUBDOMAINS = {
    PairClass.IDENTICAL: _identical_subdomains,
    PairClass.SHARED_EDGE: _shared_edge_subdomains,
    PairClass.SHARED_VERTEX: _shared_vertex_subdomains,
}


@lru_cache(maxsize=None)
def singular_pair_rule(pair_class: PairClass, q: int) -> PanelPairRule:
    """Regularised rule for a touching panel pair with q Gauss points per direction."""
    pair_class = PairClass(pair_class)
    if pair_class is PairClass.DISJOINT:
        raise QuadratureError("disjoint pairs use tensor triangle rules, not singular rules")
    if not isinstance(q, (int, np.integer)) or q not in SINGULAR_ORDERS:
        raise QuadratureError(
            f"Unsupported singular quadrature order q={q!r}; "
            f"use {SINGULAR_ORDERS.start}..{SINGULAR_ORDERS.stop - 1}"
        )
    q = int(q)
    g, w = roots_legendre(q)
    g = (g + 1.0) / 2.0
    w = w / 2.0
    grid = np.meshgrid(g, g, g, g, indexing="ij")
    wgrid = np.meshgrid(w, w, w, w, indexing="ij")
    xi, e1, e2, e3 = (a.reshape(-1) for a in grid)
    w4 = np.prod([a.reshape(-1) for a in wgrid], axis=0)

    xs, ys, ws = [], [], []
    subdomains = _SUBDOMAINS[pair_class](xi, e1, e2, e3)
    for (xr1, xr2), (yr1, yr2), jac in subdomains:
        xs.append(_barycentric(xr1, xr2))
        ys.append(_barycentric(yr1, yr2))
        ws.append(w4 * jac)
    x_nodes = np.concatenate(xs)
    y_nodes = np.concatenate(ys)
    # the reference triangle has measure 1/2, so a pair rule totals 1/4
    weights = 4.0 * np.concatenate(ws)
    _freeze(x_nodes, y_nodes, weights)
    return PanelPairRule(
        pair_class=pair_class,
        q=q,
        x_nodes=x_nodes,
        y_nodes=y_nodes,
        weights=weights,
        num_subdomains=len(subdomains),
    )


def integrate_pair(
    rule: PanelPairRule,
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray],
    corners_x: np.ndarray,
    corners_y: np.ndarray,
):
    """∫_{T_x} ∫_{T_y} kernel(x, y) dy dx for one panel pair (corners in rule order)."""
    corners_x = np.asarray(corners_x, dtype=float)
    corners_y = np.asarray(corners_y, dtype=float)
    area_x = 0.5 * np.linalg.norm(np.cross(corners_x[1] - corners_x[0], corners_x[2] - corners_x[0]))
    area_y = 0.5 * np.linalg.norm(np.cross(corners_y[1] - corners_y[0], corners_y[2] - corners_y[0]))
    x = rule.x_nodes @ corners_x
    y = rule.y_nodes @ corners_y
    return area_x * area_y * np.sum(rule.weights * kernel(x, y))


@dataclass(frozen=True)
class QuadratureSettings:
    """Orders used by assembly; the defaults are the production setting."""

    far_order: int = 3
    near_order: int = 6
    singular_q: int = 4
    near_factor: float = 2.0

    def __post_init__(self):
        gauss_triangle(self.far_order)
        gauss_triangle(self.near_order)
        if self.singular_q not in SINGULAR_ORDERS:
            raise QuadratureError(
                f"Unsupported singular quadrature order q={self.singular_q}; "
                f"use {SINGULAR_ORDERS.start}..{SINGULAR_ORDERS.stop - 1}"
            )
        if not self.near_factor >= 0:
            raise QuadratureError(f"near_factor must be non-negative, got {self.near_factor}")


@lru_cache(maxsize=None)
def _regular_pair_rule(order: int) -> PanelPairRule:
    rule = gauss_triangle(order)
    return tensor_pair_rule(rule, rule)


def select_rule(
    pair_class: PairClass, distance_ratio: float, settings: QuadratureSettings
) -> PanelPairRule:
    """Rule for a panel pair from its class and centroid distance / max diameter."""
    pair_class = PairClass(pair_class)
    if pair_class is not PairClass.DISJOINT:
        return singular_pair_rule(pair_class, settings.singular_q)
    if distance_ratio < settings.near_factor:
        return _regular_pair_rule(settings.near_order)
    return _regular_pair_rule(settings.far_order)
