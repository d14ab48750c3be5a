"""Galerkin boundary operators, discrete trace spaces and the Newton potential.

Spaces: P0 (one dof per triangle) for Neumann-type densities and continuous
P1 (one dof per vertex) for Dirichlet-type densities.

Matrix conventions, with ``χ_i`` the P0 indicators and ``ψ_v`` the P1 hats:

* ``S[i, j]  = ∫ χ_i(x) ∫ Φ(x - y) χ_j(y)``
* ``K[i, v]  = ∫ χ_i(x) ∫ ∂Φ/∂n_y(x - y) ψ_v(y)``
* ``K*[v, j] = ∫ ψ_v(x) ∫ ∂Φ/∂n_x(x - y) χ_j(y)``
* ``D[u, v]  = -∫∫ Φ curl ψ_u · curl ψ_v + λ² ∫∫ Φ (n_x · n_y) ψ_u ψ_v``

``D`` is the normal derivative of the double layer potential, i.e. minus the
symmetric Maue form.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from app.services import kernels
from app.services.errors import DofCapError, KernelSingularityError, NearBoundaryError, PartitionError
from app.services.geometry import BoundaryPartition, SurfaceMesh, distance_to_surface, is_inside
from app.services.kernels import WaveNumber
from app.services.quadrature import (
    PairClass,
    PanelPairRule,
    QuadratureSettings,
    align_pair,
    gauss_triangle,
    select_rule,
    singular_pair_rule,
)
from app.services.settings import dof_cap as default_dof_cap
from app.services.settings import ordered_map

logger = logging.getLogger(__name__)

CHUNK_PANELS = 16
SINGULAR_CHUNK = 512
PROJECTION_ORDER = 6


# ---------------------------------------------------------------------------
# Discrete spaces and densities
# ---------------------------------------------------------------------------


class Space(str, Enum):
    P0 = "P0"
    P1 = "P1"
    P0_GAMMA1 = "P0(Gamma1)"
    P0_GAMMA2 = "P0(Gamma2)"
    P1_GAMMA1 = "P1(Gamma1)"
    P1_INTERIOR_GAMMA2 = "P1(interior Gamma2)"

    @property
    def parent(self) -> "Space":
        return Space.P0 if self.value.startswith("P0") else Space.P1

    @property
    def is_full(self) -> bool:
        return self in (Space.P0, Space.P1)


def space_dofs(
    space: Space, mesh: SurfaceMesh, partition: Optional[BoundaryPartition] = None
) -> np.ndarray:
    """Global P0/P1 indices carried by ``space``."""
    space = Space(space)
    if space is Space.P0:
        return np.arange(mesh.num_triangles)
    if space is Space.P1:
        return np.arange(mesh.num_vertices)
    if partition is None:
        raise PartitionError(f"space {space.value} needs a boundary partition")
    return {
        Space.P0_GAMMA1: partition.gamma1_triangles,
        Space.P0_GAMMA2: partition.gamma2_triangles,
        Space.P1_GAMMA1: partition.gamma1_vertices,
        Space.P1_INTERIOR_GAMMA2: partition.interior_gamma2_vertices,
    }[space]


def _full_size(space: Space, mesh: SurfaceMesh) -> int:
    return mesh.num_triangles if space.parent is Space.P0 else mesh.num_vertices


@dataclass(frozen=True, eq=False)
class DensityVector:
    """Coefficients of a P0/P1 density on Γ or on one part of it."""

    space: Space
    coefficients: np.ndarray
    dofs: np.ndarray
    full_size: int

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=complex).reshape(-1)
        if coefficients.shape[0] != self.dofs.shape[0]:
            raise ValueError(
                f"{self.space.value} density needs {self.dofs.shape[0]} coefficients, "
                f"got {coefficients.shape[0]}"
            )
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def on(
        cls,
        space: Space,
        coefficients,
        mesh: SurfaceMesh,
        partition: Optional[BoundaryPartition] = None,
    ) -> "DensityVector":
        space = Space(space)
        return cls(
            space=space,
            coefficients=coefficients,
            dofs=space_dofs(space, mesh, partition),
            full_size=_full_size(space, mesh),
        )

    @classmethod
    def zeros(
        cls, space: Space, mesh: SurfaceMesh, partition: Optional[BoundaryPartition] = None
    ) -> "DensityVector":
        dofs = space_dofs(Space(space), mesh, partition)
        return cls.on(space, np.zeros(dofs.shape[0], dtype=complex), mesh, partition)

    @property
    def size(self) -> int:
        return int(self.dofs.shape[0])

    def scaled(self, factor: complex) -> "DensityVector":
        return DensityVector(self.space, factor * self.coefficients, self.dofs, self.full_size)


def zero_extend(d: DensityVector) -> DensityVector:
    """Copy the coefficients onto their Γ dofs, zero elsewhere."""
    if d.space.is_full:
        return d
    full = np.zeros(d.full_size, dtype=complex)
    full[d.dofs] = d.coefficients
    return DensityVector(d.space.parent, full, np.arange(d.full_size), d.full_size)


def restrict(
    d: DensityVector, space: Space, mesh: SurfaceMesh, partition: Optional[BoundaryPartition] = None
) -> DensityVector:
    space = Space(space)
    if space.parent is not d.space.parent:
        raise ValueError(f"cannot restrict a {d.space.value} density to {space.value}")
    full = zero_extend(d).coefficients
    dofs = space_dofs(space, mesh, partition)
    return DensityVector(space, full[dofs], dofs, d.full_size)


# ---------------------------------------------------------------------------
# Operator matrices
# ---------------------------------------------------------------------------


class OperatorKind(str, Enum):
    S = "S"
    K = "K"
    KSTAR = "Kstar"
    D = "D"
    MASS_P0 = "massP0"
    MASS_P1 = "massP1"
    MASS_MIXED = "massMixed"


_KIND_SPACES = {
    OperatorKind.S: (Space.P0, Space.P0),
    OperatorKind.K: (Space.P0, Space.P1),
    OperatorKind.KSTAR: (Space.P1, Space.P0),
    OperatorKind.D: (Space.P1, Space.P1),
    OperatorKind.MASS_P0: (Space.P0, Space.P0),
    OperatorKind.MASS_P1: (Space.P1, Space.P1),
    OperatorKind.MASS_MIXED: (Space.P0, Space.P1),
}


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    kind: OperatorKind
    rows: Space
    cols: Space
    entries: np.ndarray
    wavenumber: WaveNumber
    row_dofs: np.ndarray
    col_dofs: np.ndarray

    def __post_init__(self):
        if self.entries.shape != (self.row_dofs.shape[0], self.col_dofs.shape[0]):
            raise ValueError(
                f"{self.kind.value} entries have shape {self.entries.shape}, spaces need "
                f"({self.row_dofs.shape[0]}, {self.col_dofs.shape[0]})"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    def apply(self, d: DensityVector) -> np.ndarray:
        if d.space is not self.cols:
            raise ValueError(f"{self.kind.value} acts on {self.cols.value}, got {d.space.value}")
        return self.entries @ d.coefficients


def _full_operator(kind: OperatorKind, entries: np.ndarray, wavenumber: WaveNumber) -> OperatorMatrix:
    rows, cols = _KIND_SPACES[kind]
    entries.setflags(write=False)
    return OperatorMatrix(
        kind=kind,
        rows=rows,
        cols=cols,
        entries=entries,
        wavenumber=wavenumber,
        row_dofs=np.arange(entries.shape[0]),
        col_dofs=np.arange(entries.shape[1]),
    )


def restrict_block(
    matrix: OperatorMatrix,
    row_space: Space,
    col_space: Space,
    mesh: SurfaceMesh,
    partition: Optional[BoundaryPartition] = None,
) -> OperatorMatrix:
    """Submatrix acting on zero-extended ``col_space`` densities, tested on ``row_space``."""
    row_space, col_space = Space(row_space), Space(col_space)
    if not (matrix.rows.is_full and matrix.cols.is_full):
        raise ValueError("restrict_block expects an operator assembled on the whole of Γ")
    if row_space.parent is not matrix.rows or col_space.parent is not matrix.cols:
        raise ValueError(
            f"{matrix.kind.value} maps {matrix.cols.value} -> {matrix.rows.value}; "
            f"cannot restrict to {col_space.value} -> {row_space.value}"
        )
    rows = space_dofs(row_space, mesh, partition)
    cols = space_dofs(col_space, mesh, partition)
    if rows.size == 0 or cols.size == 0:
        raise PartitionError(
            f"empty dof set restricting {matrix.kind.value} to {row_space.value} x {col_space.value}"
        )
    entries = matrix.entries[np.ix_(rows, cols)]
    return OperatorMatrix(
        kind=matrix.kind,
        rows=row_space,
        cols=col_space,
        entries=entries,
        wavenumber=matrix.wavenumber,
        row_dofs=rows,
        col_dofs=cols,
    )


# ---------------------------------------------------------------------------
# Mass matrices and projections
# ---------------------------------------------------------------------------

_P1_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


def mass_matrix_sparse(mesh: SurfaceMesh, kind: str, panels: Optional[np.ndarray] = None):
    """Sparse P0, P1 or mixed (P0 rows x P1 cols) mass matrix, optionally over a panel subset."""
    panels = np.arange(mesh.num_triangles) if panels is None else np.asarray(panels)
    nt, nv = mesh.num_triangles, mesh.num_vertices
    areas = mesh.areas[panels]
    tri = mesh.triangles[panels]
    if kind == "P0":
        diag = np.zeros(nt)
        diag[panels] = areas
        return sparse.diags(diag, format="csr")
    if kind == "P1":
        rows = np.repeat(tri, 3, axis=1).reshape(-1)
        cols = np.tile(tri, (1, 3)).reshape(-1)
        data = (areas[:, None, None] * _P1_LOCAL_MASS[None]).reshape(-1)
        return sparse.csr_matrix((data, (rows, cols)), shape=(nv, nv))
    if kind == "mixed":
        rows = np.repeat(panels, 3)
        data = np.repeat(areas / 3.0, 3)
        return sparse.csr_matrix((data, (rows, tri.reshape(-1))), shape=(nt, nv))
    raise ValueError(f"Unknown mass matrix kind '{kind}'")


def mass_matrix(mesh: SurfaceMesh, kind: str) -> OperatorMatrix:
    """Dense Galerkin mass matrix: ``P0``, ``P1`` or ``mixed`` (P0 rows x P1 cols)."""
    op_kind = {"P0": OperatorKind.MASS_P0, "P1": OperatorKind.MASS_P1, "mixed": OperatorKind.MASS_MIXED}
    if kind not in op_kind:
        raise ValueError(f"Unknown mass matrix kind '{kind}'")
    entries = mass_matrix_sparse(mesh, kind).toarray().astype(complex)
    return _full_operator(op_kind[kind], entries, WaveNumber(0))


def quadrature_points(mesh: SurfaceMesh, order: int = PROJECTION_ORDER) -> np.ndarray:
    """Physical quadrature nodes of every panel, shape (m, q, 3)."""
    return gauss_triangle(order).points(mesh.corners)


def panel_integrals(mesh: SurfaceMesh, values: np.ndarray, order: int = PROJECTION_ORDER):
    """∫_{T_i} f χ_i and ∫_{T_i} f λ_a for node values of shape (m, q)."""
    rule = gauss_triangle(order)
    weighted = values * rule.weights[None, :] * mesh.areas[:, None]
    return weighted.sum(axis=1), weighted @ rule.nodes


def load_vector(mesh: SurfaceMesh, space: Space, values: np.ndarray, order: int = PROJECTION_ORDER):
    """Galerkin load ⟨f, basis⟩ on P0 or P1 from node values of shape (m, q)."""
    space = Space(space)
    p0_load, local = panel_integrals(mesh, values, order)
    if space is Space.P0:
        return p0_load
    if space is Space.P1:
        load = np.zeros(mesh.num_vertices, dtype=complex)
        np.add.at(load, mesh.triangles.reshape(-1), local.reshape(-1))
        return load
    raise ValueError(f"load vectors live on P0 or P1, got {space.value}")


def l2_project(
    mesh: SurfaceMesh, space: Space, samples, order: int = PROJECTION_ORDER
) -> DensityVector:
    """L² projection onto P0(Γ) or P1(Γ).

    ``samples`` is a callable on (n, 3) points, or node values of shape
    (m, q) at :func:`quadrature_points` for the same ``order``.
    """
    space = Space(space)
    if callable(samples):
        pts = quadrature_points(mesh, order)
        values = np.asarray(samples(pts.reshape(-1, 3)), dtype=complex).reshape(pts.shape[:2])
    else:
        values = np.asarray(samples, dtype=complex)
    load = load_vector(mesh, space, values, order)
    if space is Space.P0:
        coefficients = load / mesh.areas
    else:
        mass = mass_matrix_sparse(mesh, "P1").tocsc()
        coefficients = spsolve(mass, load.real) + 1j * spsolve(mass, load.imag)
    return DensityVector.on(space, coefficients, mesh)


def l2_norm(mesh: SurfaceMesh, d: DensityVector, panels: Optional[np.ndarray] = None) -> float:
    """L² norm of a (zero-extended) density over Γ or over a panel subset."""
    full = zero_extend(d)
    kind = "P0" if full.space is Space.P0 else "P1"
    mass = mass_matrix_sparse(mesh, kind, panels)
    c = full.coefficients
    return float(np.sqrt(max(np.real(np.vdot(c, mass @ c)), 0.0)))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Need:
    s: bool
    k: bool
    kstar: bool
    d: bool

    @property
    def basis(self) -> bool:
        return self.d

    @property
    def gradient(self) -> bool:
        return self.k or self.kstar


@dataclass(frozen=True, eq=False)
class _PairTensors:
    """Local integrals for a batch of panel pairs.

    ``phi``: ∫∫ Φ λ_a(x) λ_b(y), shape (..., 3, 3) (or (...) when only the sum is needed)
    ``dny``: ∫∫ ∂Φ/∂n_y λ_b(y), shape (..., 3)
    ``dnx``: ∫∫ λ_a(x) ∂Φ/∂n_x, shape (..., 3)
    """

    phi: Optional[np.ndarray]
    dny: Optional[np.ndarray]
    dnx: Optional[np.ndarray]


def _paired_tensors(
    k: complex,
    rule: PanelPairRule,
    corners_x: np.ndarray,
    corners_y: np.ndarray,
    normals_x: np.ndarray,
    normals_y: np.ndarray,
    area_product: np.ndarray,
    need: _Need,
) -> _PairTensors:
    x = np.einsum("kv,pvd->pkd", rule.x_nodes, corners_x)
    y = np.einsum("kv,pvd->pkd", rule.y_nodes, corners_y)
    d = x - y
    r = np.sqrt(np.einsum("pkd,pkd->pk", d, d))
    if np.any(r == 0.0):
        raise KernelSingularityError("quadrature node pair coincides; rule does not match pair class")
    value = kernels.phi_unchecked(k, r) * rule.weights[None, :]
    scale = area_product[:, None]

    phi = dny = dnx = None
    if need.basis:
        tmp = np.einsum("pk,kb->pkb", value, rule.y_nodes)
        phi = np.einsum("pkb,ka->pab", tmp, rule.x_nodes) * scale[..., None]
    elif need.s:
        phi = value.sum(axis=1) * area_product
    if need.gradient:
        # mirrored touching pairs fill K from dnx and K* from dny
        g = kernels.radial_factor(k, r, value)
        dn = np.einsum("pkd,pd->pk", d, normals_y)
        dny = np.einsum("pk,kb->pb", -g * dn, rule.y_nodes) * scale
        dn = np.einsum("pkd,pd->pk", d, normals_x)
        dnx = np.einsum("pk,ka->pa", g * dn, rule.x_nodes) * scale
    return _PairTensors(phi=phi, dny=dny, dnx=dnx)


@dataclass(frozen=True, eq=False)
class _SingularPairs:
    """Touching pairs (a <= b) with local tensors in the panels' own vertex order."""

    first: np.ndarray
    second: np.ndarray
    tensors: _PairTensors
    counts: Dict[str, int] = field(default_factory=dict)


class OperatorAssembler:
    """Dense Galerkin assembly of S, K, K* and D on one mesh for one wavenumber.

    Work is split into fixed blocks of test panels and reduced in block order,
    so results do not depend on the thread count.
    """

    def __init__(
        self,
        mesh: SurfaceMesh,
        wavenumber,
        settings: Optional[QuadratureSettings] = None,
        threads: Optional[int] = None,
        dof_cap: Optional[int] = None,
    ):
        self.mesh = mesh
        self.wavenumber = wavenumber if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber)
        self.k = self.wavenumber.value
        self.settings = settings or QuadratureSettings()
        self.threads = threads
        cap = default_dof_cap() if dof_cap is None else int(dof_cap)
        largest = max(mesh.num_triangles, mesh.num_vertices)
        if largest > cap:
            raise DofCapError(
                f"dense assembly needs {largest} dofs, above the cap of {cap}; "
                "raise dof_cap or use a coarser mesh"
            )

        c = mesh.corners
        edges = np.stack([c[:, 2] - c[:, 1], c[:, 0] - c[:, 2], c[:, 1] - c[:, 0]], axis=1)
        self._curls = -edges / (2.0 * mesh.areas)[:, None, None]

        touching = mesh.shared_vertex_counts.tocoo()
        self._touch_rows = touching.row
        self._touch_cols = touching.col
        self.singular_counts: Dict[str, int] = {}

    # -- public -----------------------------------------------------------

    def assemble(self, kinds: Iterable[str] = ("S", "K", "Kstar", "D")) -> Dict[str, OperatorMatrix]:
        kinds = [OperatorKind(kd) for kd in kinds]
        need = _Need(
            s=OperatorKind.S in kinds,
            k=OperatorKind.K in kinds,
            kstar=OperatorKind.KSTAR in kinds,
            d=OperatorKind.D in kinds,
        )
        start = time.perf_counter()
        nt, nv = self.mesh.num_triangles, self.mesh.num_vertices
        out = {
            OperatorKind.S: np.zeros((nt, nt), dtype=complex) if need.s else None,
            OperatorKind.K: np.zeros((nt, nv), dtype=complex) if need.k else None,
            OperatorKind.KSTAR: np.zeros((nv, nt), dtype=complex) if need.kstar else None,
            OperatorKind.D: np.zeros((nv, nv), dtype=complex) if need.d else None,
        }

        blocks = [np.arange(s, min(s + CHUNK_PANELS, nt)) for s in range(0, nt, CHUNK_PANELS)]
        for rows, tensors in zip(blocks, ordered_map(lambda b: self._regular_block(b, need), blocks, self.threads)):
            self._scatter(out, rows, tensors, need)

        singular = self._singular_pairs(need)
        self.singular_counts = singular.counts
        self._scatter_singular(out, singular, need)

        elapsed = time.perf_counter() - start
        result = {}
        for kind in kinds:
            result[kind.value] = _full_operator(kind, out[kind], self.wavenumber)
            logger.info(
                f"Assembled {kind.value} {out[kind].shape} for λ={self.wavenumber} in {elapsed:.2f}s"
            )
        logger.debug(f"Singular pair counts: {singular.counts}")
        return result

    # -- regular pairs ----------------------------------------------------

    def _regular_block(self, rows: np.ndarray, need: _Need) -> _PairTensors:
        mesh = self.mesh
        k = self.k
        s = self.settings
        far = gauss_triangle(s.far_order)
        corners = mesh.corners
        normals = mesh.normals

        xq = far.points(corners[rows])
        yq = far.points(corners)
        d = xq[:, :, None, None, :] - yq[None, None, :, :, :]
        r = np.sqrt(np.einsum("ipjqd,ipjqd->ipjq", d, d))
        r_safe = np.where(r > 0.0, r, 1.0)
        wxy = np.outer(far.weights, far.weights)
        value = kernels.phi_unchecked(k, r_safe) * wxy[None, :, None, :]
        area = mesh.areas[rows][:, None] * mesh.areas[None, :]

        phi = dny = dnx = None
        if need.basis:
            tmp = np.einsum("ipjq,qb->ipjb", value, far.nodes)
            phi = np.einsum("ipjb,pa->ijab", tmp, far.nodes) * area[..., None, None]
        elif need.s:
            phi = value.sum(axis=(1, 3)) * area
        if need.gradient:
            g = kernels.radial_factor(k, r_safe, value)
            if need.k:
                dn = np.einsum("ipjqd,jd->ipjq", d, normals)
                dny = np.einsum("ipjq,qb->ijb", -g * dn, far.nodes) * area[..., None]
            if need.kstar:
                dn = np.einsum("ipjqd,id->ipjq", d, normals[rows])
                dnx = np.einsum("ipjq,pa->ija", g * dn, far.nodes) * area[..., None]

        centroid_gap = np.linalg.norm(
            mesh.centroids[rows][:, None, :] - mesh.centroids[None, :, :], axis=2
        )
        diam = np.maximum(mesh.diameters[rows][:, None], mesh.diameters[None, :])
        touching = np.asarray(mesh.shared_vertex_counts[rows].toarray() > 0)
        near = (centroid_gap < s.near_factor * diam) & ~touching

        ii, jj = np.nonzero(near)
        if ii.size and s.near_order != s.far_order:
            rule = select_rule(PairClass.DISJOINT, 0.0, s)
            gi = rows[ii]
            near_t = _paired_tensors(
                k,
                rule,
                corners[gi],
                corners[jj],
                normals[gi],
                normals[jj],
                mesh.areas[gi] * mesh.areas[jj],
                need,
            )
            for full, part in ((phi, near_t.phi), (dny, near_t.dny), (dnx, near_t.dnx)):
                if full is not None:
                    full[ii, jj] = part

        ti, tj = np.nonzero(touching)
        for arr in (phi, dny, dnx):
            if arr is not None:
                arr[ti, tj] = 0.0
        return _PairTensors(phi=phi, dny=dny, dnx=dnx)

    # -- touching pairs ---------------------------------------------------

    def _singular_pairs(self, need: _Need) -> _SingularPairs:
        mesh = self.mesh
        keep = self._touch_rows <= self._touch_cols
        first = self._touch_rows[keep]
        second = self._touch_cols[keep]
        order = np.lexsort((second, first))
        first, second = first[order], second[order]

        n = first.size
        classes = np.empty(n, dtype="<U16")
        perm_x = np.empty((n, 3), dtype=np.int64)
        perm_y = np.empty((n, 3), dtype=np.int64)
        for p in range(n):
            cls, px, py = align_pair(mesh.triangles[first[p]], mesh.triangles[second[p]])
            classes[p] = cls.value
            perm_x[p] = px
            perm_y[p] = py

        phi = np.zeros((n, 3, 3) if need.basis else (n,), dtype=complex)
        dny = np.zeros((n, 3), dtype=complex)
        dnx = np.zeros((n, 3), dtype=complex)
        counts = {}
        jobs = []
        for cls in (PairClass.IDENTICAL, PairClass.SHARED_EDGE, PairClass.SHARED_VERTEX):
            idx = np.nonzero(classes == cls.value)[0]
            counts[cls.value] = int(idx.size)
            for s in range(0, idx.size, SINGULAR_CHUNK):
                jobs.append((cls, idx[s : s + SINGULAR_CHUNK]))

        def run(job):
            cls, idx = job
            rule = singular_pair_rule(cls, self.settings.singular_q)
            a, b = first[idx], second[idx]
            rows = np.arange(idx.size)[:, None]
            cx = mesh.corners[a][rows, perm_x[idx]]
            cy = mesh.corners[b][rows, perm_y[idx]]
            return _paired_tensors(
                self.k,
                rule,
                cx,
                cy,
                mesh.normals[a],
                mesh.normals[b],
                mesh.areas[a] * mesh.areas[b],
                need,
            )

        for (cls, idx), t in zip(jobs, ordered_map(run, jobs, self.threads)):
            rows = np.arange(idx.size)[:, None]
            px, py = perm_x[idx], perm_y[idx]
            if t.phi is not None:
                if need.basis:
                    local = np.zeros((idx.size, 3, 3), dtype=complex)
                    local[rows[:, :, None], px[:, :, None], py[:, None, :]] = t.phi
                    phi[idx] = local
                else:
                    phi[idx] = t.phi
            if t.dny is not None:
                local = np.zeros((idx.size, 3), dtype=complex)
                local[rows, py] = t.dny
                dny[idx] = local
            if t.dnx is not None:
                local = np.zeros((idx.size, 3), dtype=complex)
                local[rows, px] = t.dnx
                dnx[idx] = local
        return _SingularPairs(first, second, _PairTensors(phi, dny, dnx), counts)

    # -- reduction --------------------------------------------------------

    def _local_hypersingular(self, phi, rows, cols):
        """Local D blocks from basis-weighted Φ integrals, shape (..., 3, 3)."""
        mesh = self.mesh
        curl_dot = np.einsum("...ad,...bd->...ab", self._curls[rows], self._curls[cols])
        n_dot = np.einsum("...d,...d->...", mesh.normals[rows], mesh.normals[cols])
        total = phi.sum(axis=(-2, -1))
        return -(curl_dot * total[..., None, None]) + (self.k**2) * n_dot[..., None, None] * phi

    def _scatter(self, out, rows, t: _PairTensors, need: _Need):
        tri = self.mesh.triangles
        nt = self.mesh.num_triangles
        cols = np.arange(nt)
        if need.s:
            out[OperatorKind.S][rows, :] = t.phi.sum(axis=(2, 3)) if need.basis else t.phi
        if need.k:
            target = out[OperatorKind.K]
            for b in range(3):
                np.add.at(target, (rows[:, None], tri[None, :, b]), t.dny[:, :, b])
        if need.kstar:
            target = out[OperatorKind.KSTAR]
            for a in range(3):
                np.add.at(target, (tri[rows, a][:, None], cols[None, :]), t.dnx[:, :, a])
        if need.d:
            local = self._local_hypersingular(t.phi, rows[:, None], cols[None, :])
            target = out[OperatorKind.D]
            for a in range(3):
                for b in range(3):
                    np.add.at(target, (tri[rows, a][:, None], tri[None, :, b]), local[:, :, a, b])

    def _scatter_singular(self, out, sp: _SingularPairs, need: _Need):
        tri = self.mesh.triangles
        a, b = sp.first, sp.second
        off = a != b
        t = sp.tensors
        if need.s:
            total = t.phi.sum(axis=(1, 2)) if need.basis else t.phi
            target = out[OperatorKind.S]
            target[a, b] = total
            target[b[off], a[off]] = total[off]
        if need.k:
            target = out[OperatorKind.K]
            np.add.at(target, (a[:, None], tri[b]), t.dny)
            np.add.at(target, (b[off][:, None], tri[a[off]]), t.dnx[off])
        if need.kstar:
            target = out[OperatorKind.KSTAR]
            np.add.at(target, (tri[a], b[:, None]), t.dnx)
            np.add.at(target, (tri[b[off]], a[off][:, None]), t.dny[off])
        if need.d:
            local = self._local_hypersingular(t.phi, a, b)
            target = out[OperatorKind.D]
            np.add.at(target, (tri[a][:, :, None], tri[b][:, None, :]), local)
            np.add.at(
                target,
                (tri[b[off]][:, :, None], tri[a[off]][:, None, :]),
                np.swapaxes(local[off], 1, 2),
            )


def assemble_operators(
    mesh: SurfaceMesh,
    wavenumber,
    kinds: Iterable[str] = ("S", "K", "Kstar", "D"),
    settings: Optional[QuadratureSettings] = None,
    threads: Optional[int] = None,
    dof_cap: Optional[int] = None,
) -> Dict[str, OperatorMatrix]:
    """Assemble several boundary operators sharing one pass over the panel pairs."""
    return OperatorAssembler(mesh, wavenumber, settings, threads, dof_cap).assemble(kinds)


def assemble_single_layer(mesh, wavenumber, **kwargs) -> OperatorMatrix:
    return assemble_operators(mesh, wavenumber, ("S",), **kwargs)["S"]


def assemble_double_layer(mesh, wavenumber, **kwargs) -> OperatorMatrix:
    return assemble_operators(mesh, wavenumber, ("K",), **kwargs)["K"]


def assemble_adjoint_double_layer(mesh, wavenumber, **kwargs) -> OperatorMatrix:
    return assemble_operators(mesh, wavenumber, ("Kstar",), **kwargs)["Kstar"]


def assemble_hypersingular(mesh, wavenumber, **kwargs) -> OperatorMatrix:
    return assemble_operators(mesh, wavenumber, ("D",), **kwargs)["D"]


# ---------------------------------------------------------------------------
# Newton potential
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VolumeSourceSpec:
    """Volume source h: point atoms plus weighted density samples."""

    atom_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    atom_weights: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    sample_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sample_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_density: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))

    def __post_init__(self):
        ap = np.asarray(self.atom_points, dtype=float).reshape(-1, 3)
        aw = np.asarray(self.atom_weights, dtype=complex).reshape(-1)
        sp = np.asarray(self.sample_points, dtype=float).reshape(-1, 3)
        sw = np.asarray(self.sample_weights, dtype=float).reshape(-1)
        sd = np.asarray(self.sample_density, dtype=complex).reshape(-1)
        if ap.shape[0] != aw.shape[0]:
            raise ValueError("every atom needs exactly one weight")
        if not (sp.shape[0] == sw.shape[0] == sd.shape[0]):
            raise ValueError("density samples need matching points, weights and values")
        for name, arr in (("atom weights", aw), ("sample weights", sw), ("sample density", sd)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        for name, arr in (
            ("atom_points", ap),
            ("atom_weights", aw),
            ("sample_points", sp),
            ("sample_weights", sw),
            ("sample_density", sd),
        ):
            object.__setattr__(self, name, arr)

    @classmethod
    def atoms(cls, points, weights) -> "VolumeSourceSpec":
        return cls(atom_points=points, atom_weights=weights)

    @property
    def is_empty(self) -> bool:
        return self.atom_points.shape[0] == 0 and self.sample_points.shape[0] == 0

    @property
    def source_points(self) -> np.ndarray:
        return np.concatenate([self.atom_points, self.sample_points])

    @property
    def source_strengths(self) -> np.ndarray:
        return np.concatenate([self.atom_weights, self.sample_weights * self.sample_density])

    @property
    def total_variation(self) -> float:
        return float(np.abs(self.atom_weights).sum() + np.sum(self.sample_weights * np.abs(self.sample_density)))

    def scaled(self, factor: complex) -> "VolumeSourceSpec":
        return VolumeSourceSpec(
            self.atom_points,
            factor * self.atom_weights,
            self.sample_points,
            self.sample_weights,
            factor * self.sample_density,
        )


def check_sources(src: VolumeSourceSpec, mesh: SurfaceMesh) -> None:
    """Sources must lie strictly inside Ω; warn when one sits within two panel diameters of Γ."""
    if src.is_empty:
        return
    pts = src.source_points
    inside = is_inside(mesh, pts)
    if not np.all(inside):
        bad = int(np.nonzero(~inside)[0][0])
        raise NearBoundaryError(f"volume source point {pts[bad].tolist()} is not inside the domain")
    dist = distance_to_surface(mesh, pts)
    if np.any(dist <= 0.0):
        raise NearBoundaryError("volume source point lies on the boundary")
    limit = 2.0 * mesh.max_diameter
    close = int(np.count_nonzero(dist < limit))
    if close:
        logger.warning(
            f"{close} volume source point(s) within {limit:.3g} of the boundary; traces are near-singular"
        )


SOURCE_CHUNK = 1 << 20


def _source_sum(k: complex, src: VolumeSourceSpec, points: np.ndarray, gradient: bool):
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    shape = (pts.shape[0], 3) if gradient else (pts.shape[0],)
    out = np.zeros(shape, dtype=complex)
    if src.is_empty:
        return out
    sources = src.source_points
    strengths = src.source_strengths
    step = max(1, SOURCE_CHUNK // max(1, sources.shape[0]))
    for start in range(0, pts.shape[0], step):
        d = pts[start : start + step, None, :] - sources[None, :, :]
        r = np.linalg.norm(d, axis=2)
        if np.any(r <= kernels.COINCIDENCE_TOL):
            raise KernelSingularityError("Newton potential evaluated at a source point")
        value = kernels.phi_unchecked(k, r)
        if gradient:
            g = kernels.radial_factor(k, r, value) * strengths[None, :]
            out[start : start + step] = np.einsum("ps,psd->pd", g, d)
        else:
            out[start : start + step] = value @ strengths
    return out


def newton_potential_eval(src: VolumeSourceSpec, wavenumber, points) -> np.ndarray:
    """Σ_j c_j Φ(x - x_j) + Σ_k w_k ρ_k Φ(x - y_k) at each point."""
    k = wavenumber.value if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber).value
    return _source_sum(k, src, points, gradient=False)


def newton_potential_gradient(src: VolumeSourceSpec, wavenumber, points) -> np.ndarray:
    k = wavenumber.value if isinstance(wavenumber, WaveNumber) else WaveNumber(wavenumber).value
    return _source_sum(k, src, points, gradient=True)


def newton_traces(
    src: VolumeSourceSpec, wavenumber, mesh: SurfaceMesh, order: int = PROJECTION_ORDER
) -> Tuple[DensityVector, DensityVector]:
    """Dirichlet trace (P1 projection) and Neumann trace (P0 projection) of N_λ h."""
    if src.is_empty:
        return DensityVector.zeros(Space.P1, mesh), DensityVector.zeros(Space.P0, mesh)
    check_sources(src, mesh)
    pts = quadrature_points(mesh, order)
    flat = pts.reshape(-1, 3)
    values = newton_potential_eval(src, wavenumber, flat).reshape(pts.shape[:2])
    grads = newton_potential_gradient(src, wavenumber, flat).reshape(pts.shape)
    normal_derivative = np.einsum("iqd,id->iq", grads, mesh.normals)
    dirichlet = l2_project(mesh, Space.P1, values, order)
    neumann = l2_project(mesh, Space.P0, normal_derivative, order)
    return dirichlet, neumann
