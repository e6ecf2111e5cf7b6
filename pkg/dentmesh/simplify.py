"""
Edge-collapse simplification driven by quadric error metrics.

qem_simplify is the plain quadric baseline. selective_downsample multiplies every collapse cost by k_neg when the
mean curvature averaged over the two endpoints is negative and by k_pos otherwise, so concave valleys (the
tooth-gingiva junction) are collapsed last. The curvature is recomputed on the partially simplified mesh every
curvature_refresh_interval collapses.
"""
import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial import cKDTree

from dentmesh import CONFIG
from dentmesh.curvature import mean_curvature
from dentmesh.exceptions import TargetUnreachable, ConfigError
from dentmesh.mesh import TriangleMesh, compact, compute_vertex_normals, edge_topology, vertex_normals
from dentmesh.util import timing

logger = logging.getLogger(__name__)

SINGULAR_DET = 1e-12
FLIP_MIN_AREA = 1e-14  # relative to the squared edge length of the collapsed pair
INFINITE = math.inf
METHODS = ('qem', 'selective')


class SimplifyConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    target_vertex_count: Optional[int] = CONFIG['TARGET_VERTEX_COUNT']
    target_triangle_count: Optional[int] = None  # stops on triangle count instead of vertex count when set
    k_neg: float = CONFIG['K_NEG']
    k_pos: float = CONFIG['K_POS']
    curvature_refresh_interval: Optional[int] = None  # None: REFRESH_FRACTION of the initial vertex count
    allow_nonedge_pairs: bool = False
    pair_distance: float = 0.0

    @model_validator(mode='after')
    def check(self):
        if not self.k_neg >= self.k_pos > 0:
            raise ValueError("weights must satisfy k_neg >= k_pos > 0")
        if self.curvature_refresh_interval is not None and self.curvature_refresh_interval < 1:
            raise ValueError("curvature_refresh_interval must be at least 1")
        if self.target_vertex_count is None and self.target_triangle_count is None:
            raise ValueError("a vertex or triangle target is required")
        for target in (self.target_vertex_count, self.target_triangle_count):
            if target is not None and target < 0:
                raise ValueError("targets must be non-negative")
        if self.pair_distance < 0:
            raise ValueError("pair_distance must be non-negative")
        return self

    def refresh_interval(self, vertex_count):
        if self.curvature_refresh_interval:
            return self.curvature_refresh_interval
        return max(1, int(round(CONFIG['REFRESH_FRACTION'] * vertex_count)))


@dataclass
class SimplifyReport:
    """kept[i] is the input index of output vertex i; costs are the weighted costs of executed collapses in order"""
    kept: np.ndarray = None
    costs: list = field(default_factory=list)
    collapses: int = 0
    rejected: int = 0
    refreshes: int = 0


def plane_quadrics(mesh):
    """Fundamental quadric p p^T of every triangle, p = (a, b, c, d) the unit plane equation"""
    v, t = mesh.vertices, mesh.triangles
    normals = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    lengths = np.linalg.norm(normals, axis=1)
    ok = lengths > 0
    normals[ok] /= lengths[ok, None]
    normals[~ok] = 0
    planes = np.hstack([normals, -np.einsum('ij,ij->i', normals, v[t[:, 0]])[:, None]])
    return planes[:, :, None] * planes[:, None, :]


def compute_quadrics(mesh):
    """Per vertex sum of the fundamental quadrics of its incident triangles, (V, 4, 4)"""
    face_quadrics = plane_quadrics(mesh)
    quadrics = np.zeros((mesh.vertex_count, 4, 4))
    for j in range(3):
        np.add.at(quadrics, mesh.triangles[:, j], face_quadrics)
    return quadrics


def quadric_error(q, position):
    h = np.append(np.asarray(position, dtype=np.float64), 1.0)
    return max(0.0, float(h @ q @ h))


def _batch_errors(q, positions):
    h = np.concatenate([positions, np.ones((len(positions), 1))], axis=1)
    return np.maximum(0.0, np.einsum('ni,nij,nj->n', h, q, h))


def contraction_targets(qa, qb, pa, pb):
    """
    Batched optimal placement: solves the 3x3 system of Qa + Qb, falling back to the cheapest of
    (pa, pb, midpoint) where the normalized determinant is below SINGULAR_DET. Returns (targets, costs).
    """
    q = qa + qb
    a = q[:, :3, :3]
    scale = np.abs(a).max(axis=(1, 2))
    regular = scale > 0
    det = np.zeros(len(q))
    det[regular] = np.linalg.det(a[regular] / scale[regular, None, None])
    regular &= np.abs(det) >= SINGULAR_DET
    targets = np.empty((len(q), 3))
    costs = np.empty(len(q))
    if regular.any():
        targets[regular] = np.linalg.solve(a[regular], -q[regular, :3, 3][:, :, None])[:, :, 0]
        costs[regular] = _batch_errors(q[regular], targets[regular])
    singular = ~regular
    if singular.any():
        candidates = np.stack([pa[singular], pb[singular], (pa[singular] + pb[singular]) / 2], axis=1)
        qs = q[singular]
        candidate_costs = np.stack([_batch_errors(qs, candidates[:, i]) for i in range(3)], axis=1)
        best = np.argmin(candidate_costs, axis=1)  # first minimum: v1, then v2, then midpoint
        rows = np.arange(len(best))
        targets[singular] = candidates[rows, best]
        costs[singular] = candidate_costs[rows, best]
    return targets, costs


def optimal_contraction_target(q1, q2, v1, v2):
    targets, costs = contraction_targets(np.asarray(q1)[None], np.asarray(q2)[None],
                                         np.asarray(v1, dtype=np.float64)[None],
                                         np.asarray(v2, dtype=np.float64)[None])
    return targets[0], float(costs[0])


def edge_collapse_coefficient(field, v1, v2, config):
    values = getattr(field, 'values', field)
    mean = (values[v1] + values[v2]) / 2
    return config.k_neg if mean < 0 else config.k_pos


class EdgeCollapser:
    """
    Greedy edge collapse over a lazy-deletion heap. Entries carry the version counters of both endpoints and the
    heap epoch at push time; an entry is stale when any of them changed. Collapses that would flip a triangle by
    more than 90 degrees or break the link condition are re-queued with infinite cost.
    """

    def __init__(self, mesh, config, weighted):
        self.config = config
        self.weighted = weighted and config.k_neg != config.k_pos
        self.positions = mesh.vertices.copy()
        self.labels = None if mesh.vertex_labels is None else mesh.vertex_labels.copy()
        # topology lives in plain lists of ints; the collapse loop never touches numpy scalars
        self.faces = mesh.triangles.tolist()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.vertex_alive = np.ones(mesh.vertex_count, dtype=bool)
        self.vertex_faces = [set() for _ in range(mesh.vertex_count)]
        for f, face in enumerate(self.faces):
            for v in face:
                self.vertex_faces[v].add(f)
        self.quadrics = compute_quadrics(mesh)
        self.version = [0] * mesh.vertex_count
        self.epoch = 0
        self.curvature = np.zeros(mesh.vertex_count)
        self.vertex_count = mesh.vertex_count
        self.face_count = mesh.triangle_count
        self.extra_pairs = [set() for _ in range(mesh.vertex_count)]
        if config.allow_nonedge_pairs and config.pair_distance > 0:
            self._add_nonedge_pairs(mesh)
        self.report = SimplifyReport()
        self.heap = []

    def _add_nonedge_pairs(self, mesh):
        edges = {tuple(e) for e in edge_topology(mesh.triangles).edges.tolist()}
        for a, b in sorted(cKDTree(mesh.vertices).query_pairs(self.config.pair_distance)):
            if (a, b) not in edges:
                self.extra_pairs[a].add(b)
                self.extra_pairs[b].add(a)

    def alive_faces(self):
        return np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)[self.face_alive]

    def ring(self, v):
        faces = self.faces
        return {w for f in self.vertex_faces[v] for w in faces[f]} - {v}

    def is_boundary_vertex(self, v):
        counts = {}
        faces = self.faces
        for f in self.vertex_faces[v]:
            for w in faces[f]:
                if w != v:
                    counts[w] = counts.get(w, 0) + 1
        return any(c == 1 for c in counts.values())

    def _coefficients(self, a, b):
        if not self.weighted:
            return np.ones(len(a))
        mean = (self.curvature[a] + self.curvature[b]) / 2
        return np.where(mean < 0, self.config.k_neg, self.config.k_pos)

    def _push_pairs(self, pairs):
        if not len(pairs):
            return
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        a, b = pairs.min(axis=1), pairs.max(axis=1)
        targets, costs = contraction_targets(self.quadrics[a], self.quadrics[b], self.positions[a],
                                             self.positions[b])
        weighted = costs * self._coefficients(a, b)
        version, heap, epoch = self.version, self.heap, self.epoch
        for w, ai, bi, t in zip(weighted.tolist(), a.tolist(), b.tolist(), targets.tolist()):
            heapq.heappush(heap, (w, ai, bi, version[ai], version[bi], epoch, tuple(t)))

    def rebuild(self):
        """Recomputes every candidate from scratch under a new epoch"""
        self.epoch += 1
        pairs = edge_topology(self.alive_faces()).edges.tolist()
        pairs += [(a, b) for a in range(len(self.extra_pairs)) for b in self.extra_pairs[a] if a < b]
        self.heap = []
        if not pairs:
            return
        pairs = np.asarray(sorted(pairs), dtype=np.int64)
        targets, costs = contraction_targets(self.quadrics[pairs[:, 0]], self.quadrics[pairs[:, 1]],
                                             self.positions[pairs[:, 0]], self.positions[pairs[:, 1]])
        weighted = costs * self._coefficients(pairs[:, 0], pairs[:, 1])
        version = self.version
        self.heap = [(w, a, b, version[a], version[b], self.epoch, tuple(t))
                     for w, (a, b), t in zip(weighted.tolist(), pairs.tolist(), targets.tolist())]
        heapq.heapify(self.heap)

    def refresh_curvature(self):
        alive = self.alive_faces()
        referenced = np.zeros(len(self.positions), dtype=bool)
        referenced[alive.reshape(-1)] = True
        current, kept = compact(TriangleMesh(vertices=self.positions, triangles=alive), referenced)
        normals, _ = vertex_normals(current.vertices, current.triangles)
        self.curvature = np.zeros(len(self.positions))
        self.curvature[kept] = mean_curvature(current, normals=normals).values
        self.report.refreshes += 1

    def is_valid(self, a, b, target):
        faces_a, faces_b = self.vertex_faces[a], self.vertex_faces[b]
        shared = faces_a & faces_b
        if shared:
            opposite = {w for f in shared for w in self.faces[f]} - {a, b}
            if (self.ring(a) & self.ring(b)) - {a, b} != opposite:
                return False
            if len(shared) == 2 and self.is_boundary_vertex(a) and self.is_boundary_vertex(b):
                return False
        elif not self._nonedge_merge_valid(a, b):
            return False
        moved = sorted((faces_a | faces_b) - shared)
        if not moved:
            return True
        tri = np.array([self.faces[f] for f in moved], dtype=np.int64)
        old = self.positions[tri]
        new = old.copy()
        new[(tri == a) | (tri == b)] = target
        old_n = np.cross(old[:, 1] - old[:, 0], old[:, 2] - old[:, 0])
        new_n = np.cross(new[:, 1] - new[:, 0], new[:, 2] - new[:, 0])
        scale = np.sum((self.positions[a] - self.positions[b]) ** 2) or 1.0
        if np.any(np.linalg.norm(new_n, axis=1) <= FLIP_MIN_AREA * scale):
            return False
        return bool(np.all(np.einsum('ij,ij->i', old_n, new_n) >= 0))

    def _nonedge_merge_valid(self, a, b):
        if b not in self.extra_pairs[a]:
            return False
        faces_a = {frozenset(self.faces[f]) - {a} for f in self.vertex_faces[a]}
        edge_count = {}
        for f in self.vertex_faces[a] | self.vertex_faces[b]:
            for w in self.faces[f]:
                if w not in (a, b):
                    edge_count[w] = edge_count.get(w, 0) + 1
        if any(c > 2 for c in edge_count.values()):
            return False
        return not any(frozenset(self.faces[f]) - {b} in faces_a for f in self.vertex_faces[b])

    def collapse(self, a, b, target):
        """Merges b into a at target"""
        target = np.asarray(target)
        shared = self.vertex_faces[a] & self.vertex_faces[b]
        if self.labels is not None:
            da = np.sum((self.positions[a] - target) ** 2)
            db = np.sum((self.positions[b] - target) ** 2)
            if db < da:
                self.labels[a] = self.labels[b]
        for f in sorted(shared):
            self.face_alive[f] = False
            for w in self.faces[f]:
                self.vertex_faces[w].discard(f)
        for f in sorted(self.vertex_faces[b]):
            face = self.faces[f]
            face[face.index(b)] = a
            self.vertex_faces[a].add(f)
        self.vertex_faces[b] = set()
        for w in self.extra_pairs[b]:
            self.extra_pairs[w].discard(b)
            if w != a:
                self.extra_pairs[w].add(a)
                self.extra_pairs[a].add(w)
        self.extra_pairs[a].discard(b)
        self.extra_pairs[b] = set()
        self.positions[a] = target
        self.quadrics[a] += self.quadrics[b]
        self.vertex_alive[b] = False
        self.version[a] += 1
        self.version[b] += 1
        self.vertex_count -= 1
        self.face_count -= len(shared)
        neighbors = sorted(self.ring(a) | self.extra_pairs[a])
        self._push_pairs([(a, w) for w in neighbors])

    def _done(self):
        if self.config.target_triangle_count is not None:
            return self.face_count <= self.config.target_triangle_count
        return self.vertex_count <= self.config.target_vertex_count

    def run(self):
        interval = self.config.refresh_interval(self.vertex_count)
        if self.weighted:
            self.refresh_curvature()
        self.rebuild()
        since_refresh = 0
        stalled = False
        while not self._done():
            if not self.heap:
                raise TargetUnreachable(f"No collapsible pairs left at {self.vertex_count} vertices.")
            cost, a, b, va, vb, epoch, target = heapq.heappop(self.heap)
            if epoch != self.epoch or va != self.version[a] or vb != self.version[b]:
                continue
            if cost == INFINITE:
                if stalled:
                    raise TargetUnreachable(f"Topology blocks further collapses at {self.vertex_count} vertices.")
                stalled = True
                self.rebuild()
                continue
            if not self.is_valid(a, b, target):
                self.report.rejected += 1
                heapq.heappush(self.heap, (INFINITE, a, b, va, vb, epoch, target))
                continue
            self.collapse(a, b, target)
            stalled = False
            self.report.collapses += 1
            self.report.costs.append(cost)
            since_refresh += 1
            if self.weighted and since_refresh >= interval and not self._done():
                since_refresh = 0
                self.refresh_curvature()
                self.rebuild()
        return self.result()

    def result(self):
        mesh = TriangleMesh(vertices=self.positions, triangles=self.alive_faces(),
                            vertex_labels=self.labels)
        mesh, kept = compact(mesh, self.vertex_alive)
        self.report.kept = kept
        return compute_vertex_normals(mesh)


def _check_target(mesh, config):
    if config.target_triangle_count is not None:
        if config.target_triangle_count > mesh.triangle_count:
            raise ConfigError(f"Target of {config.target_triangle_count} triangles exceeds {mesh.triangle_count}.")
        return config.target_triangle_count == mesh.triangle_count
    if config.target_vertex_count > mesh.vertex_count:
        raise ConfigError(f"Target of {config.target_vertex_count} vertices exceeds {mesh.vertex_count}.")
    return config.target_vertex_count == mesh.vertex_count


@timing
def simplify_with_report(mesh, config, method='selective'):
    if method not in METHODS:
        raise ConfigError(f"Unknown simplification method '{method}'.")
    if _check_target(mesh, config):
        return mesh, SimplifyReport(kept=np.arange(mesh.vertex_count))
    if config.target_triangle_count is None:
        logger.info(f"Simplifying {mesh} with {method} to {config.target_vertex_count} vertices")
    else:
        logger.info(f"Simplifying {mesh} with {method} to {config.target_triangle_count} triangles")
    collapser = EdgeCollapser(mesh, config, weighted=method == 'selective')
    result = collapser.run()
    report = collapser.report
    logger.info(f"Simplified to {result}: {report.collapses} collapses, {report.rejected} rejections, "
                f"{report.refreshes} curvature refreshes")
    return result, report


def qem_simplify(mesh, target, by_triangles=False):
    config = (SimplifyConfig(target_vertex_count=None, target_triangle_count=target) if by_triangles
              else SimplifyConfig(target_vertex_count=target))
    return simplify_with_report(mesh, config, method='qem')[0]


def selective_downsample(mesh, config=None):
    return simplify_with_report(mesh, config or SimplifyConfig(), method='selective')[0]
