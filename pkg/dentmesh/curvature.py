import logging
from dataclasses import dataclass

import numpy as np
import igl
from scipy.sparse import csr_matrix

from dentmesh.exceptions import DentmeshException
from dentmesh.io import write_ply
from dentmesh.mesh import edge_topology, vertex_normals
from dentmesh.util import timing

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-14  # relative to the squared mean edge length
CLAMP_PERCENTILES = (2, 98)


@dataclass(frozen=True, eq=False)
class CurvatureField:
    """
    Mean curvature H per vertex: positive on convex bumps, negative in concave valleys (with outward normals).
    fallback flags vertices that used umbrella weights because their one-ring is degenerate.
    boundary flags vertices on open edges (H = 0 there).
    """
    values: np.ndarray
    fallback: np.ndarray
    boundary: np.ndarray

    def __len__(self):
        return len(self.values)


def _face_geometry(vertices, triangles):
    """Triangle areas and the mean squared edge length"""
    v = vertices[triangles]
    areas = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1) / 2
    edges = np.concatenate([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]])
    return areas, float(np.mean(np.einsum('ij,ij->i', edges, edges))) if len(edges) else 0.0


def _igl_arrays(vertices, triangles):
    return np.ascontiguousarray(vertices, dtype=np.float64), np.ascontiguousarray(triangles, dtype=np.int64)


def mixed_voronoi_areas(vertices, triangles):
    """Mixed Voronoi cell area of every vertex; obtuse triangles give half (obtuse corner) or a quarter of their area"""
    v, f = _igl_arrays(vertices, triangles)
    if not len(f):
        return np.zeros(len(v))
    return np.asarray(igl.massmatrix(v, f, igl.MASSMATRIX_TYPE_VORONOI).diagonal()).ravel()


def cotangent_laplacian(vertices, triangles):
    """Sparse L with L[i, j] = (cot a + cot b) / 2 for each edge and L[i, i] = -sum of the row"""
    v, f = _igl_arrays(vertices, triangles)
    if not len(f):
        return csr_matrix((len(v), len(v)))
    return csr_matrix(igl.cotmatrix(v, f))


def _umbrella(vertices, triangles, indices):
    """Uniform-weight curvature normal 4 (mean(p_j) - p_i) / mean |p_j - p_i|^2 for the given vertices"""
    neighbors = [set() for _ in indices]
    position = {v: n for n, v in enumerate(indices)}
    for face in triangles[np.isin(triangles, indices).any(axis=1)]:
        for v in face:
            if v in position:
                neighbors[position[v]].update(int(w) for w in face if w != v)
    result = np.zeros((len(indices), 3))
    for n, v in enumerate(indices):
        if not neighbors[n]:
            continue
        ring = vertices[sorted(neighbors[n])] - vertices[v]
        mean_sq = np.mean(np.einsum('ij,ij->i', ring, ring))
        if mean_sq > 0:
            result[n] = 4 * ring.mean(axis=0) / mean_sq
    return result


@timing
def mean_curvature(mesh, normals=None):
    """
    Discrete mean curvature from the cotangent Laplace-Beltrami operator over mixed Voronoi areas.
    The curvature normal K = L p / A points into the surface on convex regions, so H = |K| / 2 is signed
    negative when K agrees with the vertex normal.
    """
    vertices, triangles = mesh.vertices, mesh.triangles
    n = mesh.vertex_count
    if normals is None:
        normals = mesh.vertex_normals if mesh.has_normals else vertex_normals(vertices, triangles)[0]
    values = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    boundary = np.zeros(n, dtype=bool)
    if not len(triangles):
        return CurvatureField(values, fallback, boundary)
    topology = edge_topology(triangles)
    open_edges = topology.edges[topology.face_counts == 1]
    boundary[open_edges.reshape(-1)] = True
    if np.any(topology.face_counts > 2):
        raise DentmeshException("Mean curvature needs a manifold mesh, split non-manifold vertices first.")

    areas, scale = _face_geometry(vertices, triangles)
    bad_faces = areas <= DEGENERATE_AREA * scale
    # degenerate faces add nothing to the operators; their corners fall back to umbrella weights below
    good = triangles[~bad_faces]
    mixed = mixed_voronoi_areas(vertices, good)
    laplacian = cotangent_laplacian(vertices, good)
    with np.errstate(divide='ignore', invalid='ignore'):
        curvature_normal = (laplacian @ vertices) / mixed[:, None]

    referenced = np.zeros(n, dtype=bool)
    referenced[triangles.reshape(-1)] = True
    fallback[triangles[bad_faces].reshape(-1)] = True
    fallback |= referenced & ~(mixed > DEGENERATE_AREA * scale)
    fallback &= ~boundary
    if fallback.any():
        indices = np.flatnonzero(fallback)
        logger.warning(f"{len(indices)} vertices have a degenerate one-ring, using umbrella weights.")
        curvature_normal[indices] = _umbrella(vertices, triangles, indices)

    magnitude = np.linalg.norm(curvature_normal, axis=1) / 2
    sign = np.where(np.einsum('ij,ij->i', curvature_normal, normals) > 0, -1.0, 1.0)
    values = np.where(referenced & ~boundary, sign * magnitude, 0.0)
    values[~np.isfinite(values)] = 0.0
    return CurvatureField(values=values, fallback=fallback, boundary=boundary)


def curvature_colors(values, percentiles=CLAMP_PERCENTILES):
    """Linear map from the lowest H (red) to the highest H (blue), clamped at the given percentiles"""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(values, percentiles)
    if hi > lo:
        t = np.clip((values - lo) / (hi - lo), 0, 1)
    else:
        t = np.full(len(values), 0.5)
    colors = np.zeros((len(values), 3), dtype=np.uint8)
    colors[:, 0] = np.rint(255 * (1 - t))
    colors[:, 2] = np.rint(255 * t)
    return colors


def export_curvature_colormap(mesh, field, path, binary=True):
    if len(field) != mesh.vertex_count:
        raise DentmeshException("Curvature field length differs from the vertex count.")
    colors = curvature_colors(field.values)
    write_ply(path, mesh.vertices, mesh.triangles, mesh.vertex_normals, mesh.vertex_labels, colors, binary)
    logger.info(f"Wrote curvature colormap to {path}")
    return path


def summary(field):
    values = field.values
    return {
        'min': float(values.min()) if len(values) else 0.0,
        'max': float(values.max()) if len(values) else 0.0,
        'mean': float(values.mean()) if len(values) else 0.0,
        'negative_count': int(np.count_nonzero(values < 0)),
        'fallback_count': int(field.fallback.sum()),
        'boundary_count': int(field.boundary.sum()),
    }
