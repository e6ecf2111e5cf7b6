import logging
from dataclasses import dataclass, replace, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from dentmesh import NUM_CLASSES
from dentmesh.exceptions import DegenerateMesh, DentmeshException, InvalidClass
from dentmesh.util import unit_rows

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6


def _checked_labels(labels, count, owner):
    labels = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != count:
        raise DentmeshException(f"Label count differs from {owner} count.")
    if len(labels) and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise InvalidClass(f"Labels must be in [0, {NUM_CLASSES - 1}].")
    return labels


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """
    Indexed triangle surface. vertices is (V, 3) float64, triangles is (F, 3) int64, vertex_normals (V, 3)
    unit vectors and vertex_labels (V,) class ids in [0, 16] are optional.
    dropped_triangles counts zero-area triangles removed when the mesh was loaded.
    normal_fallback flags vertices whose normal is the +Z stand-in for a zero-area fan; it is set by
    compute_vertex_normals and None when the normals came from elsewhere.
    """
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray = None
    vertex_labels: np.ndarray = None
    dropped_triangles: int = 0
    normal_fallback: np.ndarray = None

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'triangles', triangles)
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise DentmeshException("Triangle index out of range.")
            t = triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise DentmeshException("Degenerate triangle with repeated vertex index.")
        if self.vertex_normals is not None:
            normals = np.ascontiguousarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(vertices):
                raise DentmeshException("Normal count differs from vertex count.")
            if len(normals) and np.abs(np.linalg.norm(normals, axis=1) - 1).max() > NORMAL_TOLERANCE:
                raise DentmeshException("Vertex normals must have unit length.")
            object.__setattr__(self, 'vertex_normals', normals)
        if self.vertex_labels is not None:
            object.__setattr__(self, 'vertex_labels', _checked_labels(self.vertex_labels, len(vertices), 'vertex'))
        if self.normal_fallback is not None:
            flags = np.asarray(self.normal_fallback, dtype=bool).reshape(-1)
            if len(flags) != len(vertices):
                raise DentmeshException("Normal fallback flags differ from the vertex count.")
            object.__setattr__(self, 'normal_fallback', flags)

    def __str__(self):
        return f"TriangleMesh({self.vertex_count} vertices, {self.triangle_count} triangles)"

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def triangle_count(self):
        return len(self.triangles)

    @property
    def has_normals(self):
        return self.vertex_normals is not None

    @property
    def has_labels(self):
        return self.vertex_labels is not None

    def with_(self, **kwargs):
        return replace(self, **kwargs)

    def face_normals(self):
        """Unnormalized face normals, length equal to twice the triangle area"""
        v = self.vertices
        t = self.triangles
        return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])

    def triangle_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    positions: np.ndarray
    normals: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if not len(positions):
            raise DentmeshException("A point cloud needs at least one point.")
        if len(normals) != len(positions):
            raise DentmeshException("Normal count differs from point count.")
        if np.abs(np.linalg.norm(normals, axis=1) - 1).max() > NORMAL_TOLERANCE:
            raise DentmeshException("Point normals must have unit length.")
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'normals', normals)
        if self.labels is not None:
            object.__setattr__(self, 'labels', _checked_labels(self.labels, len(positions), 'point'))

    def __len__(self):
        return len(self.positions)

    @property
    def count(self):
        return len(self.positions)

    def features(self):
        """Per point geometric features: position followed by normal (N x 6)"""
        return np.hstack([self.positions, self.normals])

    def with_(self, **kwargs):
        return replace(self, **kwargs)


@dataclass(frozen=True)
class MeshStats:
    vertex_count: int
    triangle_count: int
    bbox_min: tuple
    bbox_max: tuple
    nonmanifold_edge_count: int
    nonmanifold_vertex_count: int = 0
    dropped_triangle_count: int = 0

    def to_dict(self):
        return {
            'vertex_count': self.vertex_count,
            'triangle_count': self.triangle_count,
            'bbox_min': list(self.bbox_min),
            'bbox_max': list(self.bbox_max),
            'nonmanifold_edge_count': self.nonmanifold_edge_count,
            'nonmanifold_vertex_count': self.nonmanifold_vertex_count,
            'dropped_triangle_count': self.dropped_triangle_count,
        }


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps original coordinates p to (p - center) / scale"""
    center: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    def to_dict(self):
        return {'center': self.center.tolist(), 'scale': self.scale}


@dataclass(frozen=True)
class EdgeTopology:
    """Undirected edges (E, 2) with sorted endpoints, the incident face count of each edge and the edge of each
    half-edge (F, 3), half-edge j of a triangle going from corner j to corner j + 1"""
    edges: np.ndarray
    face_counts: np.ndarray
    halfedge_edge: np.ndarray = field(repr=False)


def edge_topology(triangles):
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    start = t.reshape(-1)
    end = t[:, [1, 2, 0]].reshape(-1)
    pairs = np.stack([np.minimum(start, end), np.maximum(start, end)], axis=1)
    if not len(pairs):
        return EdgeTopology(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                            np.zeros((0, 3), dtype=np.int64))
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    return EdgeTopology(edges, counts, inverse.reshape(-1, 3))


def vertex_fan_components(mesh, topology=None):
    """
    Groups the triangle corners around each vertex into fans: corners of two triangles are joined when the triangles
    share a manifold edge (exactly two incident faces) at that vertex.
    Returns the component id of each corner (3F,).
    """
    t = mesh.triangles
    n_corners = 3 * len(t)
    topology = topology or edge_topology(t)
    he_edge = topology.halfedge_edge.reshape(-1)
    manifold = topology.face_counts[he_edge] == 2
    he_ids = np.flatnonzero(manifold)
    # the two half-edges of each manifold edge are adjacent after sorting by edge id
    order = he_ids[np.argsort(he_edge[he_ids], kind='stable')]
    h1, h2 = order[0::2], order[1::2]
    start1, end1 = h1, 3 * (h1 // 3) + (h1 % 3 + 1) % 3
    start2, end2 = h2, 3 * (h2 // 3) + (h2 % 3 + 1) % 3
    flat = t.reshape(-1)
    same_direction = flat[start1] == flat[start2]
    rows = np.concatenate([start1, end1])
    cols = np.concatenate([np.where(same_direction, start2, end2), np.where(same_direction, end2, start2)])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_corners, n_corners))
    _, components = connected_components(graph, directed=False)
    return components


def mesh_stats(mesh):
    topology = edge_topology(mesh.triangles)
    nonmanifold_edges = int(np.count_nonzero(topology.face_counts > 2))
    nonmanifold_vertices = 0
    if mesh.triangle_count:
        components = vertex_fan_components(mesh, topology)
        pairs = np.unique(np.stack([mesh.triangles.reshape(-1), components], axis=1), axis=0)
        fans_per_vertex = np.bincount(pairs[:, 0], minlength=mesh.vertex_count)
        nonmanifold_vertices = int(np.count_nonzero(fans_per_vertex > 1))
    lo, hi = mesh.bbox() if mesh.vertex_count else (np.zeros(3), np.zeros(3))
    return MeshStats(vertex_count=mesh.vertex_count, triangle_count=mesh.triangle_count,
                     bbox_min=tuple(float(x) for x in lo), bbox_max=tuple(float(x) for x in hi),
                     nonmanifold_edge_count=nonmanifold_edges, nonmanifold_vertex_count=nonmanifold_vertices,
                     dropped_triangle_count=mesh.dropped_triangles)


def _duplicate_vertices(mesh, triangles, sources):
    """Appends copies of the vertices in sources, carrying position, normal and label"""
    sources = np.asarray(sources, dtype=np.int64)
    vertices = np.vstack([mesh.vertices, mesh.vertices[sources]])
    normals = None if mesh.vertex_normals is None else np.vstack([mesh.vertex_normals,
                                                                   mesh.vertex_normals[sources]])
    labels = None if mesh.vertex_labels is None else np.concatenate([mesh.vertex_labels,
                                                                      mesh.vertex_labels[sources]])
    fallback = None if mesh.normal_fallback is None else np.concatenate([mesh.normal_fallback,
                                                                          mesh.normal_fallback[sources]])
    return mesh.with_(vertices=vertices, triangles=triangles, vertex_normals=normals, vertex_labels=labels,
                      normal_fallback=fallback)


def _cut_fans(mesh):
    """One vertex copy per fan; the fan holding the lowest corner keeps the original index"""
    components = vertex_fan_components(mesh)
    flat = mesh.triangles.reshape(-1)
    corner_ids = np.arange(len(flat))
    # lowest corner of every (vertex, component) pair
    order = np.lexsort((corner_ids, components, flat))
    keys = np.stack([flat[order], components[order]], axis=1)
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    # fans of each vertex ordered by their lowest corner
    heads = order[first]
    head_vertex = flat[heads]
    head_order = np.lexsort((heads, head_vertex))
    heads, head_vertex = heads[head_order], head_vertex[head_order]
    is_primary = np.ones(len(heads), dtype=bool)
    is_primary[1:] = head_vertex[1:] != head_vertex[:-1]
    extra = np.flatnonzero(~is_primary)
    if not len(extra):
        return mesh, 0
    new_index = np.zeros(components.max() + 1, dtype=np.int64)
    new_index[components[heads]] = head_vertex
    new_index[components[heads[extra]]] = mesh.vertex_count + np.arange(len(extra))
    remapped = new_index[components].reshape(-1, 3)
    return _duplicate_vertices(mesh, remapped, head_vertex[extra]), len(extra)


def _detach_extra_faces(mesh):
    """Faces beyond the first two on an edge still shared by more than two faces get their own copy of that edge"""
    topology = edge_topology(mesh.triangles)
    crowded = np.flatnonzero(topology.face_counts > 2)
    if not len(crowded):
        return mesh, 0
    triangles = mesh.triangles.copy()
    sources = []
    for e in crowded:
        faces = np.flatnonzero(np.any(topology.halfedge_edge == e, axis=1))
        for f in faces[2:]:
            for j in range(3):
                if mesh.triangles[f, j] in topology.edges[e]:
                    sources.append(mesh.triangles[f, j])
                    triangles[f, j] = mesh.vertex_count + len(sources) - 1
    return _duplicate_vertices(mesh, triangles, sources), len(sources)


def split_nonmanifold_vertices(mesh):
    """
    Cuts the mesh at non-manifold edges and vertices by duplicating every vertex once per connected triangle fan.
    Triangle count is unchanged; duplicated vertices inherit position, normal and label.
    """
    if not mesh.triangle_count:
        return mesh
    added = 0
    while True:
        mesh, n_cut = _cut_fans(mesh)
        mesh, n_detached = _detach_extra_faces(mesh)
        added += n_cut + n_detached
        if not n_detached:
            break
    if added:
        logger.info(f"Split non-manifold geometry: {added} vertices added.")
    return mesh


def normalize_coordinates(mesh):
    """Centers the mesh at its bbox center and scales the largest bbox dimension to 1"""
    if not mesh.vertex_count:
        raise DegenerateMesh("Cannot normalize an empty mesh.")
    lo, hi = mesh.bbox()
    scale = float((hi - lo).max())
    if scale <= 0:
        raise DegenerateMesh("Mesh bounding box has zero extent.")
    transform = NormalizationTransform(center=(lo + hi) / 2, scale=scale)
    return mesh.with_(vertices=transform.apply(mesh.vertices)), transform


def vertex_normals(vertices, triangles):
    """
    Area-weighted averages of face normals, oriented by the triangle winding.
    Returns (normals, zero_fan) where zero_fan flags vertices whose incident triangles all have zero area;
    these get +Z.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    face_normals = np.cross(vertices[triangles[:, 1]] - vertices[triangles[:, 0]],
                            vertices[triangles[:, 2]] - vertices[triangles[:, 0]])
    accumulated = np.zeros_like(vertices)
    for j in range(3):
        np.add.at(accumulated, triangles[:, j], face_normals)
    normals, lengths = unit_rows(accumulated)
    zero_fan = lengths <= 1e-300
    normals[zero_fan] = (0.0, 0.0, 1.0)
    return normals, zero_fan


def compute_vertex_normals(mesh):
    normals, zero_fan = vertex_normals(mesh.vertices, mesh.triangles)
    if zero_fan.any():
        logger.warning(f"{int(zero_fan.sum())} vertices have a zero-area fan, normal set to +Z.")
    return mesh.with_(vertex_normals=normals, normal_fallback=zero_fan)


def mesh_to_pointcloud(mesh):
    if not mesh.has_normals:
        mesh = compute_vertex_normals(mesh)
    return LabeledPointCloud(positions=mesh.vertices.copy(), normals=mesh.vertex_normals.copy(),
                             labels=None if mesh.vertex_labels is None else mesh.vertex_labels.copy())


def compact(mesh, vertex_mask=None):
    """Drops unreferenced vertices (or the ones outside vertex_mask). Returns (mesh, old index of each new vertex)"""
    if vertex_mask is None:
        vertex_mask = np.zeros(mesh.vertex_count, dtype=bool)
        vertex_mask[mesh.triangles.reshape(-1)] = True
    kept = np.flatnonzero(vertex_mask)
    remap = np.full(mesh.vertex_count, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    triangles = remap[mesh.triangles]
    triangles = triangles[np.all(triangles >= 0, axis=1)]
    return mesh.with_(vertices=mesh.vertices[kept], triangles=triangles,
                      vertex_normals=None if mesh.vertex_normals is None else mesh.vertex_normals[kept],
                      vertex_labels=None if mesh.vertex_labels is None else mesh.vertex_labels[kept],
                      normal_fallback=None if mesh.normal_fallback is None else mesh.normal_fallback[kept]), kept
