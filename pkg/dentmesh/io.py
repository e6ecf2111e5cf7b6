"""
Mesh and point cloud files.

PLY goes through plyfile, so ascii and both binary byte orders read alike. A vertex carries x, y, z, optional
nx, ny, nz, optional integer `label` and optional uchar red, green, blue; a face carries a `vertex_indices` list,
polygons are fan triangulated.
OBJ goes through trimesh with vertex order kept; labels live in a `<name>.labels.json` sidecar holding
{"labels": [...]}.
"""
import logging
from pathlib import Path

import numpy as np
import trimesh
from plyfile import PlyData, PlyElement, PlyParseError

from dentmesh.exceptions import ParseError, LabelMismatch, DentmeshException
from dentmesh.mesh import TriangleMesh, LabeledPointCloud
from dentmesh.util import read_json, write_json

logger = logging.getLogger(__name__)

FORMATS = ('ply', 'obj')
OBJ_DIGITS = 17


def guess_format(path, fmt=None):
    fmt = fmt or Path(path).suffix.lstrip('.').lower()
    if fmt not in FORMATS:
        raise ParseError(f"Unsupported mesh format '{fmt}'.")
    return fmt


def labels_sidecar(path):
    path = Path(path)
    return path.with_name(path.stem + '.labels.json')


def load_mesh(path, fmt=None):
    fmt = guess_format(path, fmt)
    if not Path(path).exists():
        raise ParseError(f"No such file: {path}")
    logger.info(f"Loading {fmt} mesh {path}")
    if fmt == 'ply':
        vertices, triangles, normals, labels = read_ply(path)
    else:
        vertices, triangles, normals = read_obj(path)
        labels = None
    sidecar = labels_sidecar(path)
    if labels is None and sidecar.exists():
        labels = read_labels(sidecar)
        if len(labels) != len(vertices):
            raise LabelMismatch(f"{sidecar} holds {len(labels)} labels for {len(vertices)} vertices.")
    return build_mesh(vertices, triangles, normals, labels)


def build_mesh(vertices, triangles, normals=None, labels=None):
    """Drops repeated-index and zero-area triangles, then validates the mesh"""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        raise ParseError("Face references a vertex that does not exist.")
    t = triangles
    repeated = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
    doubled_area = np.linalg.norm(np.cross(vertices[t[:, 1]] - vertices[t[:, 0]],
                                           vertices[t[:, 2]] - vertices[t[:, 0]]), axis=1)
    drop = repeated | (doubled_area <= 0)
    if drop.any():
        logger.warning(f"Dropped {int(drop.sum())} zero-area triangles.")
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths == 0):
            logger.warning("File normals contain zero vectors, ignoring them.")
            normals = None
        else:
            normals = normals / lengths[:, None]
    try:
        return TriangleMesh(vertices=vertices, triangles=triangles[~drop], vertex_normals=normals,
                            vertex_labels=labels, dropped_triangles=int(drop.sum()))
    except DentmeshException as e:
        raise ParseError(str(e))


def save_mesh(mesh, path, fmt=None, binary=True, colors=None):
    fmt = guess_format(path, fmt)
    if fmt == 'ply':
        write_ply(path, mesh.vertices, mesh.triangles, mesh.vertex_normals, mesh.vertex_labels, colors, binary)
    else:
        write_obj(path, mesh.vertices, mesh.triangles, mesh.vertex_normals)
        if mesh.has_labels:
            write_json(labels_sidecar(path), {'labels': mesh.vertex_labels})
    logger.debug(f"Saved {mesh} to {path}")
    return path


def save_pointcloud(cloud, path, binary=True, colors=None):
    write_ply(path, cloud.positions, None, cloud.normals, cloud.labels, colors, binary)
    return path


def load_pointcloud(path):
    """Reads a PLY point cloud; normals are required"""
    vertices, _, normals, labels = read_ply(path)
    if normals is None:
        raise ParseError(f"{path} has no normals.")
    try:
        return LabeledPointCloud(positions=vertices, normals=normals / np.linalg.norm(normals, axis=1)[:, None],
                                 labels=labels)
    except DentmeshException as e:
        raise ParseError(str(e))


def read_labels(path):
    data = read_json(path)
    try:
        labels = data['labels'] if isinstance(data, dict) else data
        return np.asarray(labels, dtype=np.int64)
    except (KeyError, TypeError, ValueError):
        raise ParseError(f"{path} is not a label file.")


def write_labels(path, labels):
    return write_json(path, {'labels': np.asarray(labels, dtype=np.int64)})


def _triangles(polygons):
    polygons = list(polygons)
    if not polygons:
        return np.zeros((0, 3), dtype=np.int64)
    if all(len(p) == 3 for p in polygons):
        return np.asarray(np.vstack(polygons), dtype=np.int64)
    triangles = []
    for polygon in polygons:
        polygon = [int(i) for i in polygon]
        triangles.extend((polygon[0], polygon[j], polygon[j + 1]) for j in range(1, len(polygon) - 1))
    return np.array(triangles, dtype=np.int64).reshape(-1, 3)


def read_ply(path):
    """Returns (vertices, triangles, normals or None, labels or None)"""
    try:
        ply = PlyData.read(str(path))
    except (PlyParseError, ValueError, EOFError) as e:
        raise ParseError(f"{path}: {e}")
    if 'vertex' not in ply:
        raise ParseError("PLY file without vertex element.")
    data = ply['vertex'].data
    names = data.dtype.names
    if not all(axis in names for axis in 'xyz'):
        raise ParseError("PLY vertices need x, y and z.")
    vertices = np.stack([data[axis] for axis in 'xyz'], axis=1).astype(np.float64)
    normals = None
    if all(n in names for n in ('nx', 'ny', 'nz')):
        normals = np.stack([data[n] for n in ('nx', 'ny', 'nz')], axis=1).astype(np.float64)
    labels = data['label'].astype(np.int64) if 'label' in names else None
    triangles = np.zeros((0, 3), dtype=np.int64)
    if 'face' in ply:
        faces = ply['face'].data
        index_field = next((name for name in ('vertex_indices', 'vertex_index') if name in faces.dtype.names), None)
        if index_field is None:
            raise ParseError("PLY face element without an index list.")
        triangles = _triangles(faces[index_field])
    return vertices, triangles, normals, labels


def write_ply(path, vertices, triangles=None, normals=None, labels=None, colors=None, binary=True, byte_order='<'):
    """A point cloud is written by passing triangles=None, which leaves out the face element"""
    vertices = np.asarray(vertices, dtype=np.float64)
    fields = [('x', 'f8'), ('y', 'f8'), ('z', 'f8')]
    if normals is not None:
        fields += [('nx', 'f8'), ('ny', 'f8'), ('nz', 'f8')]
    if labels is not None:
        fields += [('label', 'i4')]
    if colors is not None:
        fields += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
    data = np.zeros(len(vertices), dtype=np.dtype(fields))
    for i, axis in enumerate('xyz'):
        data[axis] = vertices[:, i]
    if normals is not None:
        for i, axis in enumerate(('nx', 'ny', 'nz')):
            data[axis] = normals[:, i]
    if labels is not None:
        data['label'] = labels
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        for i, channel in enumerate(('red', 'green', 'blue')):
            data[channel] = colors[:, i]
    elements = [PlyElement.describe(data, 'vertex')]
    if triangles is not None:
        faces = np.zeros(len(triangles), dtype=[('vertex_indices', 'i4', (3,))])
        faces['vertex_indices'] = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        elements.append(PlyElement.describe(faces, 'face', len_types={'vertex_indices': 'u1'}))
    PlyData(elements, text=not binary, byte_order=byte_order).write(str(path))
    return path


def read_obj(path):
    """Returns (vertices, triangles, normals or None). Polygons come back triangulated."""
    try:
        loaded = trimesh.load_mesh(str(path), file_type='obj', process=False, maintain_order=True)
    except (ValueError, IndexError, KeyError) as e:
        raise ParseError(f"{path}: {e}")
    if not isinstance(loaded, trimesh.Trimesh):
        raise ParseError(f"{path} holds no triangle mesh.")
    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    triangles = np.asarray(loaded.faces, dtype=np.int64).reshape(-1, 3)
    # vertex normals from the file when it has vn records, otherwise trimesh derives them from the faces
    normals = np.asarray(loaded.vertex_normals, dtype=np.float64) if len(triangles) else None
    return vertices, triangles, normals


def write_obj(path, vertices, triangles, normals=None):
    mesh = trimesh.Trimesh(vertices=vertices, faces=triangles, vertex_normals=normals, process=False)
    mesh.export(str(path), file_type='obj', include_normals=normals is not None, digits=OBJ_DIGITS)
    return path
