"""Closed triangulated surfaces: loading, validation, generation, refinement, partitioning."""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from app.services.errors import MeshParseError, MeshValidationError, PartitionError

logger = logging.getLogger(__name__)

MAX_SPHERE_LEVEL = 5
DEGENERATE_AREA_FACTOR = 1e-12
GAMMA1 = 1
GAMMA2 = 2

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1.0, _GOLDEN, 0.0],
        [1.0, _GOLDEN, 0.0],
        [-1.0, -_GOLDEN, 0.0],
        [1.0, -_GOLDEN, 0.0],
        [0.0, -1.0, _GOLDEN],
        [0.0, 1.0, _GOLDEN],
        [0.0, -1.0, -_GOLDEN],
        [0.0, 1.0, -_GOLDEN],
        [_GOLDEN, 0.0, -1.0],
        [_GOLDEN, 0.0, 1.0],
        [-_GOLDEN, 0.0, -1.0],
        [-_GOLDEN, 0.0, 1.0],
    ]
)
_ICOSAHEDRON_TRIANGLES = np.array(
    [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ]
)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Closed, consistently oriented flat-triangle surface with outward normals.

    Build instances through :meth:`from_arrays` (or the loaders below), which
    validate the surface invariants before anything downstream sees the mesh.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    centroids: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, triangles, validate: bool = True) -> "SurfaceMesh":
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"Vertices must have shape (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshValidationError(f"Triangles must have shape (m, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            bad = int(np.nonzero((t < 0).any(axis=1) | (t >= len(v)).any(axis=1))[0][0])
            raise MeshValidationError(
                "triangle references a vertex index out of range", element_index=bad
            )
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        doubled = np.linalg.norm(cross, axis=1)
        areas = 0.5 * doubled
        with np.errstate(divide="ignore", invalid="ignore"):
            normals = cross / doubled[:, None]
        centroids = (p0 + p1 + p2) / 3.0
        for arr in (v, t, normals, areas, centroids):
            arr.setflags(write=False)
        mesh = cls(vertices=v, triangles=t, normals=normals, areas=areas, centroids=centroids)
        if validate:
            validate_mesh(mesh)
        return mesh

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def num_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @cached_property
    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (m, 3, 3)."""
        return self.vertices[self.triangles]

    @cached_property
    def diameters(self) -> np.ndarray:
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @property
    def max_diameter(self) -> float:
        return float(self.diameters.max())

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @property
    def surface_area(self) -> float:
        return float(self.areas.sum())

    @property
    def volume(self) -> float:
        """Enclosed volume from the divergence theorem, sum of centroid·n·area / 3."""
        return float(np.sum(np.einsum("ij,ij->i", self.centroids, self.normals) * self.areas) / 3.0)

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """Triangle-vertex incidence matrix, shape (m, n)."""
        m = self.num_triangles
        rows = np.repeat(np.arange(m), 3)
        data = np.ones(3 * m)
        return sparse.csr_matrix(
            (data, (rows, self.triangles.reshape(-1))), shape=(m, self.num_vertices)
        )

    @cached_property
    def shared_vertex_counts(self) -> sparse.csr_matrix:
        """Number of common vertices for every touching triangle pair, shape (m, m)."""
        inc = self.incidence
        return (inc @ inc.T).tocsr()

    @cached_property
    def vertex_star_areas(self) -> np.ndarray:
        """Area of the triangle star around each vertex."""
        return np.asarray(self.incidence.T @ self.areas).reshape(-1)


def _edge_table(triangles: np.ndarray):
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
    )
    owner = np.tile(np.arange(len(triangles)), 3)
    undirected = np.sort(directed, axis=1)
    return directed, undirected, owner


def validate_mesh(mesh: SurfaceMesh) -> None:
    """Raise MeshValidationError unless the mesh is closed, oriented and non-degenerate."""
    if mesh.num_triangles == 0:
        raise MeshValidationError("empty mesh: no triangles")
    diag = mesh.bbox_diagonal
    min_area = DEGENERATE_AREA_FACTOR * diag * diag
    degenerate = np.nonzero(~(mesh.areas > min_area))[0]
    if degenerate.size:
        idx = int(degenerate[0])
        raise MeshValidationError(
            f"degenerate triangle: area {mesh.areas[idx]:.3e} below {min_area:.3e}",
            element_index=idx,
        )

    directed, undirected, owner = _edge_table(mesh.triangles)
    _, inverse, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    per_edge = counts[inverse]
    bad = np.nonzero(per_edge != 2)[0]
    if bad.size:
        first = int(bad[0])
        shared = int(per_edge[first])
        kind = "open surface" if shared == 1 else "non-manifold surface"
        raise MeshValidationError(
            f"{kind}: edge ({undirected[first, 0]}, {undirected[first, 1]}) shared by {shared} triangle"
            + ("" if shared == 1 else "s"),
            element_index=int(owner[first]),
        )

    _, dir_inverse, dir_counts = np.unique(
        directed, axis=0, return_inverse=True, return_counts=True
    )
    repeated = np.nonzero(dir_counts[dir_inverse.reshape(-1)] > 1)[0]
    if repeated.size:
        first = int(repeated[0])
        raise MeshValidationError(
            f"inconsistent orientation: edge ({directed[first, 0]}, {directed[first, 1]}) "
            "traversed twice in the same direction",
            element_index=int(owner[first]),
        )

    volume = mesh.volume
    if not volume > 0:
        raise MeshValidationError(
            f"inverted orientation: enclosed volume {volume:.6e} is not positive", element_index=0
        )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _data_lines(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _parse_off(text: str) -> Tuple[np.ndarray, np.ndarray]:
    lines = list(_data_lines(text))
    if not lines or not lines[0].upper().startswith("OFF"):
        raise MeshParseError("OFF file must start with an 'OFF' header")
    header_rest = lines[0][3:].split()
    cursor = 1
    if header_rest:
        counts = header_rest
    else:
        if len(lines) < 2:
            raise MeshParseError("OFF file is missing the counts line")
        counts = lines[1].split()
        cursor = 2
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except (IndexError, ValueError):
        raise MeshParseError(f"malformed OFF counts line: {' '.join(counts)!r}")
    if len(lines) < cursor + nv + nf:
        raise MeshParseError(
            f"OFF file declares {nv} vertices and {nf} faces but has only {len(lines) - cursor} data lines"
        )
    vertices = np.empty((nv, 3))
    for i in range(nv):
        parts = lines[cursor + i].split()
        try:
            vertices[i] = [float(p) for p in parts[:3]]
        except ValueError:
            raise MeshParseError(f"malformed OFF vertex line {i}: {lines[cursor + i]!r}")
        if len(parts) < 3:
            raise MeshParseError(f"OFF vertex line {i} has fewer than 3 coordinates")
    cursor += nv
    triangles = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        parts = lines[cursor + i].split()
        try:
            n = int(parts[0])
            idx = [int(p) for p in parts[1 : 1 + n]]
        except (IndexError, ValueError):
            raise MeshParseError(f"malformed OFF face line {i}: {lines[cursor + i]!r}")
        if n != 3 or len(idx) != 3:
            raise MeshParseError(f"OFF face {i} is not a triangle (declares {n} vertices)")
        triangles[i] = idx
    return vertices, triangles


def _section(lines: Sequence[str], name: str) -> Sequence[str]:
    try:
        start = lines.index(f"${name}")
        stop = lines.index(f"$End{name}", start)
    except ValueError:
        raise MeshParseError(f"Gmsh file is missing the ${name} section")
    return lines[start + 1 : stop]


def _parse_gmsh22(text: str) -> Tuple[np.ndarray, np.ndarray]:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    fmt = _section(lines, "MeshFormat")
    if not fmt or not fmt[0].split()[0].startswith("2.2"):
        raise MeshParseError("only ASCII Gmsh format 2.2 is supported")
    if len(fmt[0].split()) > 1 and fmt[0].split()[1] != "0":
        raise MeshParseError("binary Gmsh files are not supported")

    nodes = _section(lines, "Nodes")
    try:
        nv = int(nodes[0])
        ids = np.empty(nv, dtype=np.int64)
        vertices = np.empty((nv, 3))
        for i, line in enumerate(nodes[1 : 1 + nv]):
            parts = line.split()
            ids[i] = int(parts[0])
            vertices[i] = [float(p) for p in parts[1:4]]
    except (IndexError, ValueError):
        raise MeshParseError("malformed $Nodes section")
    if len(nodes) - 1 < nv:
        raise MeshParseError(f"$Nodes declares {nv} nodes but lists {len(nodes) - 1}")
    lookup = {int(node_id): i for i, node_id in enumerate(ids)}

    elements = _section(lines, "Elements")
    triangles = []
    try:
        ne = int(elements[0])
        for line in elements[1 : 1 + ne]:
            parts = [int(p) for p in line.split()]
            if parts[1] != 2:
                continue
            ntags = parts[2]
            triangles.append([lookup[n] for n in parts[3 + ntags : 6 + ntags]])
    except (IndexError, ValueError):
        raise MeshParseError("malformed $Elements section")
    except KeyError as e:
        raise MeshParseError(f"element references unknown node {e.args[0]}")
    if not triangles:
        raise MeshParseError("Gmsh file contains no triangle elements (type 2)")
    return vertices, np.array(triangles, dtype=np.int64)


_PARSERS = {"off": _parse_off, "gmsh": _parse_gmsh22, "gmsh22": _parse_gmsh22}


def load_mesh(path: Union[str, Path], format: Optional[str] = None) -> SurfaceMesh:
    """Load and validate a closed surface mesh.

    Args:
        path: Mesh file location
        format: ``"off"`` or ``"gmsh"`` (Gmsh 2.2 ASCII); inferred from the suffix when omitted

    Returns:
        SurfaceMesh: the validated mesh
    """
    path = Path(path)
    if format is None:
        format = "gmsh22" if path.suffix.lower() == ".msh" else "off"
    fmt = format.lower()
    if fmt not in _PARSERS:
        raise MeshParseError(f"Unsupported mesh format '{format}'")
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise MeshParseError(f"{path} is not an ASCII mesh file")
    vertices, triangles = _PARSERS[fmt](text)
    mesh = SurfaceMesh.from_arrays(vertices, triangles)
    logger.info(
        f"Loaded {fmt} mesh {path.name}: {mesh.num_vertices} vertices, {mesh.num_triangles} triangles"
    )
    return mesh


def write_off(mesh: SurfaceMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["OFF", f"{mesh.num_vertices} {mesh.num_triangles} 0"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Generation and refinement
# ---------------------------------------------------------------------------


def refine(mesh: SurfaceMesh, project_to_unit_sphere: bool = False) -> SurfaceMesh:
    """Split every triangle into four through its edge midpoints."""
    t = mesh.triangles
    _, undirected, _ = _edge_table(t)
    edges, inverse = np.unique(undirected, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = mesh.num_triangles
    base = mesh.num_vertices
    mid = base + inverse
    m01, m12, m20 = mid[:m], mid[m : 2 * m], mid[2 * m :]

    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, midpoints], axis=0)
    if project_to_unit_sphere:
        vertices = vertices / np.linalg.norm(vertices, axis=1)[:, None]

    triangles = np.concatenate(
        [
            np.column_stack([t[:, 0], m01, m20]),
            np.column_stack([t[:, 1], m12, m01]),
            np.column_stack([t[:, 2], m20, m12]),
            np.column_stack([m01, m12, m20]),
        ],
        axis=0,
    )
    refined = SurfaceMesh.from_arrays(vertices, triangles)
    logger.debug(f"Refined mesh {m} -> {refined.num_triangles} triangles")
    return refined


def unit_sphere_mesh(level: int) -> SurfaceMesh:
    """Icosahedron subdivided ``level`` times with vertices on the unit sphere."""
    if level < 0 or level > MAX_SPHERE_LEVEL:
        raise ValueError(
            f"Sphere level must be between 0 and {MAX_SPHERE_LEVEL}, got {level}"
        )
    vertices = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1)[:, None]
    mesh = SurfaceMesh.from_arrays(vertices, _ICOSAHEDRON_TRIANGLES)
    for _ in range(level):
        mesh = refine(mesh, project_to_unit_sphere=True)
    return mesh


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionBuildWarning:
    code: str
    message: str


@dataclass(frozen=True, eq=False)
class BoundaryPartition:
    """Triangle labels: 1 for the Dirichlet part Γ₁, 2 for the Neumann part Γ₂."""

    labels: np.ndarray
    gamma1_triangles: np.ndarray
    gamma2_triangles: np.ndarray
    gamma1_vertices: np.ndarray
    interior_gamma2_vertices: np.ndarray
    warnings: Tuple[PartitionBuildWarning, ...] = field(default_factory=tuple)

    @classmethod
    def from_labels(cls, mesh: SurfaceMesh, labels) -> "BoundaryPartition":
        labels = np.asarray(labels).reshape(-1)
        if labels.shape[0] != mesh.num_triangles:
            raise PartitionError(
                f"label count {labels.shape[0]} does not match triangle count {mesh.num_triangles}"
            )
        if not np.all((labels == GAMMA1) | (labels == GAMMA2)):
            bad = int(np.nonzero((labels != GAMMA1) & (labels != GAMMA2))[0][0])
            raise PartitionError(f"label {labels[bad]!r} at triangle {bad} is neither 1 nor 2")
        labels = labels.astype(np.int8)
        labels.setflags(write=False)

        on_gamma1 = (labels == GAMMA1).astype(float)
        touches_gamma1 = np.asarray(mesh.incidence.T @ on_gamma1).reshape(-1) > 0
        gamma1_vertices = np.nonzero(touches_gamma1)[0]
        interior_gamma2_vertices = np.nonzero(~touches_gamma1)[0]

        warnings = []
        g1 = np.nonzero(labels == GAMMA1)[0]
        g2 = np.nonzero(labels == GAMMA2)[0]
        if g1.size == 0:
            warnings.append(PartitionBuildWarning("empty_gamma1", "Γ₁ (Dirichlet part) is empty"))
        if g2.size == 0:
            warnings.append(PartitionBuildWarning("empty_gamma2", "Γ₂ (Neumann part) is empty"))
        elif interior_gamma2_vertices.size == 0:
            warnings.append(
                PartitionBuildWarning(
                    "no_interior_gamma2_vertices",
                    "Γ₂ has no interior vertices; refine the mesh to resolve the Neumann part",
                )
            )
        for w in warnings:
            logger.warning(f"Partition warning [{w.code}]: {w.message}")
        return cls(
            labels=labels,
            gamma1_triangles=g1,
            gamma2_triangles=g2,
            gamma1_vertices=gamma1_vertices,
            interior_gamma2_vertices=interior_gamma2_vertices,
            warnings=tuple(warnings),
        )

    @property
    def is_mixed(self) -> bool:
        return bool(
            self.gamma1_triangles.size
            and self.gamma2_triangles.size
            and self.interior_gamma2_vertices.size
        )

    def require_mixed(self) -> None:
        """Raise PartitionError if the partition cannot carry a mixed problem."""
        if self.gamma1_triangles.size == 0:
            raise PartitionError("mixed problem needs a non-empty Γ₁ (Dirichlet part)")
        if self.gamma2_triangles.size == 0:
            raise PartitionError("mixed problem needs a non-empty Γ₂ (Neumann part)")
        if self.interior_gamma2_vertices.size == 0:
            raise PartitionError(
                "Γ₂ has no interior vertices to carry P1 unknowns; refine the mesh"
            )


@dataclass(frozen=True)
class HalfSpaceRule:
    """Label a triangle Γ₁ when (centroid - point)·normal > offset."""

    point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or np.asarray(self.point, dtype=float).shape != (3,):
            raise PartitionError("half-space point and normal must be 3-vectors")
        if not np.linalg.norm(n) > 0:
            raise PartitionError("half-space normal must be non-zero")


def read_labels(path: Union[str, Path]) -> np.ndarray:
    """One integer label (1 or 2) per line; line i labels triangle i."""
    values = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            values.append(int(line))
        except ValueError:
            raise PartitionError(f"labels file line {lineno} is not an integer: {line!r}")
    return np.array(values, dtype=np.int64)


def partition_boundary(
    mesh: SurfaceMesh, rule: Union[HalfSpaceRule, str, Path, np.ndarray]
) -> BoundaryPartition:
    """Label every triangle from a half-space rule, a labels file, or a label array."""
    if isinstance(rule, HalfSpaceRule):
        n = np.asarray(rule.normal, dtype=float)
        n = n / np.linalg.norm(n)
        signed = (mesh.centroids - np.asarray(rule.point, dtype=float)) @ n
        labels = np.where(signed > rule.offset, GAMMA1, GAMMA2)
    elif isinstance(rule, (str, Path)):
        labels = read_labels(rule)
    else:
        labels = np.asarray(rule)
    partition = BoundaryPartition.from_labels(mesh, labels)
    logger.info(
        f"Partition: {partition.gamma1_triangles.size} Γ₁ triangles, "
        f"{partition.gamma2_triangles.size} Γ₂ triangles, "
        f"{partition.interior_gamma2_vertices.size} interior Γ₂ vertices"
    )
    return partition


# ---------------------------------------------------------------------------
# Point queries
# ---------------------------------------------------------------------------

POINT_BUDGET = 1 << 19


def _point_chunk(mesh: SurfaceMesh) -> int:
    return max(1, POINT_BUDGET // max(1, mesh.num_triangles))


def winding_number(mesh: SurfaceMesh, points) -> np.ndarray:
    """Generalized winding number: ~1 inside, ~0 outside a closed outward-oriented surface."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.corners
    chunk = _point_chunk(mesh)
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk]
        a = corners[None, :, 0, :] - p[:, None, :]
        b = corners[None, :, 1, :] - p[:, None, :]
        c = corners[None, :, 2, :] - p[:, None, :]
        la, lb, lc = (np.linalg.norm(v, axis=2) for v in (a, b, c))
        det = np.einsum("ijk,ijk->ij", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("ijk,ijk->ij", a, b) * lc
            + np.einsum("ijk,ijk->ij", b, c) * la
            + np.einsum("ijk,ijk->ij", c, a) * lb
        )
        out[start : start + chunk] = np.sum(2.0 * np.arctan2(det, denom), axis=1) / (4.0 * np.pi)
    return out


def is_inside(mesh: SurfaceMesh, points) -> np.ndarray:
    return winding_number(mesh, points) > 0.5


def _segment_distance(p, a, b):
    ab = b - a
    t = np.einsum("ijk,ijk->ij", p - a, ab) / np.einsum("ijk,ijk->ij", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=2)


def distance_to_surface(mesh: SurfaceMesh, points) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest triangle."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    corners = mesh.corners
    chunk = _point_chunk(mesh)
    normals = mesh.normals
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk][:, None, :]
        v0 = np.broadcast_to(corners[None, :, 0, :], (p.shape[0],) + corners[:, 0, :].shape)
        v1 = np.broadcast_to(corners[None, :, 1, :], v0.shape)
        v2 = np.broadcast_to(corners[None, :, 2, :], v0.shape)
        p_full = np.broadcast_to(p, v0.shape)

        height = np.einsum("ijk,jk->ij", p_full - v0, normals)
        foot = p_full - height[..., None] * normals[None, :, :]
        inside = np.ones(height.shape, dtype=bool)
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            side = np.einsum("ijk,jk->ij", np.cross(b - a, foot - a), normals)
            inside &= side >= 0.0
        edge_dist = np.minimum(
            np.minimum(_segment_distance(p_full, v0, v1), _segment_distance(p_full, v1, v2)),
            _segment_distance(p_full, v2, v0),
        )
        dist = np.where(inside, np.abs(height), edge_dist)
        out[start : start + chunk] = dist.min(axis=1)
    return out
