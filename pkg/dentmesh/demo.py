"""
Synthetic fixtures: a labeled crown-on-slab jaw stand-in, icospheres, planar grids and a non-manifold bowtie.
"""
import logging

import numpy as np
import trimesh

from dentmesh.mesh import TriangleMesh, compute_vertex_normals

logger = logging.getLogger(__name__)


def grid_triangles(nx, ny, offset=0):
    """Two counter-clockwise (seen from +Z) triangles per cell of an nx x ny vertex grid laid out row by row"""
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    a = (j * nx + i).reshape(-1) + offset
    b, c, d = a + 1, a + nx + 1, a + nx
    return np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])


def plane_grid(n, size=1.0):
    """n x n vertices spanning [0, size]^2 in the z = 0 plane"""
    xs = np.linspace(0.0, size, n)
    x, y = np.meshgrid(xs, xs)
    vertices = np.stack([x.reshape(-1), y.reshape(-1), np.zeros(n * n)], axis=1)
    return compute_vertex_normals(TriangleMesh(vertices=vertices, triangles=grid_triangles(n, n)))


def crown_on_slab(n_crowns=4, nx=320, ny=160, width=2.0, depth=1.0, crown_radius=0.16, crown_height=0.12,
                  arch=(0.5, 1.0), sharpness=36.0, label_jitter=1.5, seed=0):
    """
    Heightfield jaw stand-in. The gingiva is a doubly curved arch z = -(ax x'^2 + ay y'^2) around the slab center;
    n_crowns paraboloid domes sit on it in a row, each joined to the gingiva by a softplus fillet, which leaves a
    concave valley ring around every crown.

    Vertices within crown_radius of a crown center carry the crown number (1..n_crowns), the rest 0. The label edge
    is jittered per vertex by up to label_jitter grid spacings (seeded), giving a ragged tooth-gingiva border.
    """
    if not 1 <= n_crowns <= 16:
        raise ValueError("between 1 and 16 crowns")
    x, y = np.meshgrid(np.linspace(0.0, width, nx), np.linspace(0.0, depth, ny))
    x, y = x.reshape(-1), y.reshape(-1)
    ax, ay = arch
    height = -(ax * (x - width / 2) ** 2 + ay * (y - depth / 2) ** 2)
    spacing = max(width / (nx - 1), depth / (ny - 1))
    jitter = label_jitter * spacing * np.random.default_rng(seed).uniform(-1.0, 1.0, size=len(x))
    labels = np.zeros(len(x), dtype=np.int64)
    for n, cx in enumerate(np.linspace(0.0, width, n_crowns + 2)[1:-1]):
        r = np.hypot(x - cx, y - depth / 2)
        dome = crown_height * (1 - (r / crown_radius) ** 2)
        height += np.logaddexp(0.0, sharpness * dome) / sharpness
        labels[r + jitter < crown_radius] = n + 1
    height -= height.min()
    vertices = np.stack([x, y, height], axis=1)
    mesh = TriangleMesh(vertices=vertices, triangles=grid_triangles(nx, ny), vertex_labels=labels)
    logger.debug(f"Generated crown-on-slab demo {mesh}")
    return compute_vertex_normals(mesh)


def icosphere(subdivisions=3, radius=1.0):
    """Subdivided icosahedron with outward winding; 10 * 4^s + 2 vertices"""
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    mesh = TriangleMesh(vertices=np.asarray(sphere.vertices, dtype=np.float64),
                        triangles=np.asarray(sphere.faces, dtype=np.int64))
    return compute_vertex_normals(mesh)


def bowtie(n=12):
    """
    Two n x n grid patches labeled 0 and 1 touching at a single corner vertex, plus a fin triangle standing on an
    interior edge of the first patch, so the fixture has both a non-manifold vertex and a non-manifold edge.
    """
    step = 1.0 / (n - 1)
    xs = np.linspace(0.0, 1.0, n)
    x, y = np.meshgrid(xs, xs)
    first = np.stack([x.reshape(-1), y.reshape(-1), np.zeros(n * n)], axis=1)
    second = first + (1.0, 1.0, 0.0)
    second_triangles = grid_triangles(n, n)
    # the first corner of the second patch is the last corner of the first one
    remap = np.arange(n * n) + n * n - 1
    second_triangles = remap[second_triangles]
    vertices = np.vstack([first, second[1:]])
    a = (n // 2) * n + n // 2
    apex = len(vertices)
    vertices = np.vstack([vertices, first[a] + (step / 2, step / 2, step)])
    fin = np.array([[a, a + n + 1, apex]])
    triangles = np.concatenate([grid_triangles(n, n), second_triangles, fin])
    labels = np.concatenate([np.zeros(n * n, dtype=np.int64), np.ones(n * n - 1, dtype=np.int64), [0]])
    return compute_vertex_normals(TriangleMesh(vertices=vertices, triangles=triangles, vertex_labels=labels))
