"""
Multi-view rendering of an aligned mesh.

The mesh is aligned with PCA (arch along X, occlusal side up along +Z), then seen by perspective cameras placed on
an evenly divided latitude/longitude grid of the upper hemisphere, each aimed at the centroid. A vertical downward
directional light shades the surface (Lambert, clamped). Every view keeps its depth buffer and, per pixel, the
index of the mesh vertex closest to the surface point drawn there.

.geom sidecar layout (little endian):
    8 bytes   magic b'DMGEOM01'
    uint32    width, uint32 height
    float64   4x4 world-to-camera matrix, row major
    float64   focal length in pixels, near plane, far plane
    float32   depth plane, height x width, camera-space z, +inf where nothing was drawn
    int32     vertex id plane, height x width, -1 where nothing was drawn
"""
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dentmesh import CONFIG
from dentmesh.exceptions import InvalidGrid, DegenerateMesh, FrameMismatch, DentmeshException, ParseError
from dentmesh.mesh import vertex_normals
from dentmesh.util import timing, write_json, read_json

logger = logging.getLogger(__name__)

GEOM_MAGIC = b'DMGEOM01'
GEOM_HEADER = struct.Struct('<8sII16d3d')
NONE = -1
EIGEN_TOLERANCE = 1e-6  # relative gap under which two principal variances are treated as equal
POLE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AlignmentTransform:
    """aligned = (p - center) @ rotation.T; degenerate is set when some principal axes were ambiguous"""
    center: np.ndarray
    rotation: np.ndarray
    degenerate: bool = False

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def apply_vectors(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation + self.center

    def to_dict(self):
        return {'center': self.center.tolist(), 'rotation': self.rotation.tolist(), 'degenerate': self.degenerate}


def _principal_axes(vertices):
    centered = vertices - vertices.mean(axis=0)
    covariance = centered.T @ centered / len(vertices)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues, kind='stable')[::-1]
    return eigenvalues[order], eigenvectors[:, order].T


def pca_align(mesh):
    """
    Rotates the mesh about its centroid so the largest variance lies along X, the second along Y and the smallest
    along Z, with Z chosen so the mean vertex normal points up. Axes whose variance is not distinct are completed
    from the coordinate axes by Gram-Schmidt and the transform is flagged degenerate.
    """
    if not mesh.vertex_count:
        raise DegenerateMesh("Cannot align an empty mesh.")
    center = mesh.vertices.mean(axis=0)
    values, vectors = _principal_axes(mesh.vertices)
    top = values[0] if values[0] > 0 else 1.0
    distinct = []
    for i in range(3):
        neighbors = [values[j] for j in (i - 1, i + 1) if 0 <= j < 3]
        distinct.append(all(abs(values[i] - v) > EIGEN_TOLERANCE * top for v in neighbors))
    axes = []
    for i in range(3):
        if distinct[i]:
            axis = vectors[i] * (1 if vectors[i][np.argmax(np.abs(vectors[i]))] > 0 else -1)
        else:
            axis = None
        axes.append(axis)
    degenerate = not all(distinct)
    if degenerate:
        logger.warning(f"Degenerate covariance (variances {values.tolist()}), completing axes by Gram-Schmidt.")
        chosen = [a for a in axes if a is not None]
        for i in range(3):
            if axes[i] is not None:
                continue
            for candidate in np.eye(3):
                v = candidate - sum(np.dot(candidate, c) * c for c in chosen)
                if np.linalg.norm(v) > 1e-6:
                    axes[i] = v / np.linalg.norm(v)
                    chosen.append(axes[i])
                    break
    rotation = np.array(axes)
    rotation[2] = np.cross(rotation[0], rotation[1])
    normals = mesh.vertex_normals if mesh.has_normals else vertex_normals(mesh.vertices, mesh.triangles)[0]
    if (normals @ rotation[2]).mean() < 0:
        # half turn about X keeps the frame right handed
        rotation[1] *= -1
        rotation[2] *= -1
    transform = AlignmentTransform(center=center, rotation=rotation, degenerate=degenerate)
    aligned = mesh.with_(vertices=transform.apply(mesh.vertices),
                         vertex_normals=None if not mesh.has_normals else transform.apply_vectors(normals))
    return aligned, transform


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float  # vertical, radians
    resolution: int
    near: float
    far: float
    rotation: np.ndarray = field(init=False, repr=False)  # rows: right, true up, forward

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float64)
        look_at = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        object.__setattr__(self, 'position', position)
        object.__setattr__(self, 'look_at', look_at)
        forward = look_at - position
        if np.linalg.norm(forward) == 0:
            raise DentmeshException("Camera position coincides with its target.")
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < POLE_TOLERANCE:
            up = np.array([1.0, 0.0, 0.0])
            right = np.cross(forward, up)
        object.__setattr__(self, 'up', up)
        right = right / np.linalg.norm(right)
        object.__setattr__(self, 'rotation', np.array([right, np.cross(right, forward), forward]))

    @property
    def focal(self):
        return self.resolution / 2 / math.tan(self.fov / 2)

    @property
    def forward(self):
        return self.rotation[2]

    def view_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = -self.rotation @ self.position
        return matrix

    def to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def project(self, points):
        """Continuous pixel coordinates (x right, y down) and camera-space depth"""
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            x = self.resolution / 2 + self.focal * cam[:, 0] / z
            y = self.resolution / 2 - self.focal * cam[:, 1] / z
        return np.stack([x, y], axis=1), z

    def unproject(self, pixel_xy, depth):
        pixel_xy = np.asarray(pixel_xy, dtype=np.float64).reshape(-1, 2)
        depth = np.asarray(depth, dtype=np.float64).reshape(-1)
        x = (pixel_xy[:, 0] - self.resolution / 2) * depth / self.focal
        y = -(pixel_xy[:, 1] - self.resolution / 2) * depth / self.focal
        return np.stack([x, y, depth], axis=1) @ self.rotation + self.position

    def axis_residual(self, point):
        """Distance from point to the optical axis"""
        offset = np.asarray(point, dtype=np.float64) - self.position
        return float(np.linalg.norm(offset - np.dot(offset, self.forward) * self.forward))

    def to_dict(self):
        return {'position': self.position.tolist(), 'look_at': self.look_at.tolist(), 'up': self.up.tolist(),
                'fov': self.fov, 'resolution': self.resolution, 'near': self.near, 'far': self.far}

    @classmethod
    def from_dict(cls, d):
        return cls(position=d['position'], look_at=d['look_at'], up=d['up'], fov=d['fov'],
                   resolution=d['resolution'], near=d['near'], far=d['far'])


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple
    n_lat: int
    n_lon: int
    radius: float
    center: np.ndarray

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def to_dict(self):
        return {'n_lat': self.n_lat, 'n_lon': self.n_lon, 'radius': self.radius, 'center': self.center.tolist(),
                'cameras': [camera.to_dict() for camera in self.cameras]}

    def save(self, path):
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        d = read_json(path)
        return cls(cameras=tuple(Camera.from_dict(c) for c in d['cameras']), n_lat=d['n_lat'], n_lon=d['n_lon'],
                   radius=d['radius'], center=np.asarray(d['center']))


@dataclass(frozen=True)
class DirectionalLight:
    direction: tuple = (0.0, 0.0, -1.0)
    color: tuple = (1.0, 1.0, 1.0)
    intensity: float = CONFIG['LIGHT_INTENSITY']

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1) > 1e-9:
            raise DentmeshException("Light direction must be a unit vector.")


def view_grid(views=None, n_lat=None, n_lon=None):
    """Resolves a view count preset and explicit latitude/longitude counts into (n_lat, n_lon)"""
    if views is not None and n_lat is None and n_lon is None:
        if views not in CONFIG['VIEW_PRESETS']:
            raise InvalidGrid(f"No grid preset for {views} views, give --n-lat and --n-lon.")
        return CONFIG['VIEW_PRESETS'][views]
    n_lat = CONFIG['N_LAT'] if n_lat is None else n_lat
    n_lon = CONFIG['N_LON'] if n_lon is None else n_lon
    if views is not None and views != n_lat * n_lon:
        raise InvalidGrid(f"{views} views do not match a {n_lat} x {n_lon} grid.")
    return n_lat, n_lon


def build_hemisphere_rig(mesh, n_lat=CONFIG['N_LAT'], n_lon=CONFIG['N_LON'], fov=math.radians(CONFIG['FOV_DEGREES']),
                         resolution=CONFIG['RESOLUTION'], radius_factor=CONFIG['RIG_RADIUS']):
    """
    Latitudes sit at the middle of n_lat equal bands of [0, 90] degrees, which keeps cameras off the mesh plane and
    off the pole; longitudes are evenly spaced over [0, 360).
    """
    if n_lat < 1 or n_lon < 1:
        raise InvalidGrid(f"Invalid camera grid {n_lat} x {n_lon}.")
    if resolution < 1 or not 0 < fov < math.pi:
        raise InvalidGrid("Resolution must be positive and the field of view within (0, 180) degrees.")
    center = mesh.vertices.mean(axis=0)
    diagonal = mesh.bbox_diagonal()
    if diagonal <= 0:
        raise DegenerateMesh("Cannot place cameras around a zero-extent mesh.")
    radius = radius_factor * diagonal
    near, far = 1e-3 * radius, radius + 2 * diagonal
    cameras = []
    for i in range(n_lat):
        theta = math.pi / 2 * (i + 0.5) / n_lat
        for j in range(n_lon):
            phi = 2 * math.pi * j / n_lon
            direction = np.array([math.cos(theta) * math.cos(phi), math.cos(theta) * math.sin(phi), math.sin(theta)])
            cameras.append(Camera(position=center + radius * direction, look_at=center, up=(0.0, 0.0, 1.0),
                                  fov=fov, resolution=resolution, near=near, far=far))
    logger.debug(f"Built a {n_lat} x {n_lon} rig at radius {radius:.4f}")
    return CameraRig(cameras=tuple(cameras), n_lat=n_lat, n_lon=n_lon, radius=radius, center=center)


@dataclass(frozen=True, eq=False)
class RenderedView:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) camera-space z, inf where empty
    vertex_id: np.ndarray  # (H, W) int, NONE where empty
    camera: Camera
    scene_min: np.ndarray = None
    scene_max: np.ndarray = None

    @property
    def covered(self):
        return self.vertex_id != NONE

    def depth_range(self):
        finite = self.depth[np.isfinite(self.depth)]
        return float(finite.max() - finite.min()) if len(finite) else 0.0

    def save(self, directory, index):
        directory = Path(directory)
        png = directory / f"view_{index:03}.png"
        geom = directory / f"view_{index:03}.geom"
        Image.fromarray(self.rgb).save(png)
        write_geom(geom, self)
        return png, geom


def write_geom(path, view):
    camera = view.camera
    height, width = view.depth.shape
    header = GEOM_HEADER.pack(GEOM_MAGIC, width, height, *camera.view_matrix().reshape(-1),
                              camera.focal, camera.near, camera.far)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(view.depth.astype('<f4').tobytes())
        f.write(view.vertex_id.astype('<i4').tobytes())
    return path


def read_geom(path):
    """Returns (view matrix, focal, near, far, depth, vertex_id)"""
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < GEOM_HEADER.size or raw[:8] != GEOM_MAGIC:
        raise ParseError(f"{path} is not a view geometry file.")
    fields = GEOM_HEADER.unpack_from(raw)
    width, height = fields[1], fields[2]
    matrix = np.array(fields[3:19]).reshape(4, 4)
    focal, near, far = fields[19:22]
    plane = width * height
    depth = np.frombuffer(raw, dtype='<f4', count=plane, offset=GEOM_HEADER.size).reshape(height, width)
    vertex_id = np.frombuffer(raw, dtype='<i4', count=plane, offset=GEOM_HEADER.size + 4 * plane)
    return matrix, focal, near, far, depth.astype(np.float64), vertex_id.reshape(height, width).astype(np.int64)


@timing
def rasterize_view(mesh, camera, light=DirectionalLight()):
    """
    Z-buffered perspective rasterization sampled at pixel centers. Depth and normals are interpolated
    perspective-correctly; shade = clamp(intensity * max(0, n . -light)) per channel times the light color.
    Triangles crossing the near plane are skipped.
    """
    if not mesh.has_normals:
        raise DentmeshException("Rasterization needs vertex normals.")
    res = camera.resolution
    pixel_xy, z = camera.project(mesh.vertices)
    depth = np.full((res, res), np.inf)
    face_id = np.full((res, res), -1, dtype=np.int64)
    weights = np.zeros((res, res, 3))
    triangles = mesh.triangles
    in_front = np.all(z[triangles] > camera.near, axis=1)
    for f in np.flatnonzero(in_front):
        a, b, c = triangles[f]
        (x0, y0), (x1, y1), (x2, y2) = pixel_xy[a], pixel_xy[b], pixel_xy[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        col_lo = max(int(math.ceil(min(x0, x1, x2) - 0.5)), 0)
        col_hi = min(int(math.floor(max(x0, x1, x2) - 0.5)), res - 1)
        row_lo = max(int(math.ceil(min(y0, y1, y2) - 0.5)), 0)
        row_hi = min(int(math.floor(max(y0, y1, y2) - 0.5)), res - 1)
        if col_lo > col_hi or row_lo > row_hi:
            continue
        xs = np.arange(col_lo, col_hi + 1) + 0.5
        ys = (np.arange(row_lo, row_hi + 1) + 0.5)[:, None]
        w0 = ((x1 - xs) * (y2 - ys) - (x2 - xs) * (y1 - ys)) / area
        w1 = ((x2 - xs) * (y0 - ys) - (x0 - xs) * (y2 - ys)) / area
        w2 = 1 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inverse = w0 / z[a] + w1 / z[b] + w2 / z[c]
        pixel_depth = 1 / inverse
        window = depth[row_lo:row_hi + 1, col_lo:col_hi + 1]
        closer = inside & (pixel_depth < window)
        if not closer.any():
            continue
        window[closer] = pixel_depth[closer]
        face_id[row_lo:row_hi + 1, col_lo:col_hi + 1][closer] = f
        corrected = np.stack([w0 / z[a], w1 / z[b], w2 / z[c]], axis=-1) / inverse[..., None]
        weights[row_lo:row_hi + 1, col_lo:col_hi + 1][closer] = corrected[closer]

    rgb = np.zeros((res, res, 3), dtype=np.uint8)
    vertex_id = np.full((res, res), NONE, dtype=np.int64)
    covered = face_id >= 0
    if covered.any():
        corners = triangles[face_id[covered]]  # (P, 3)
        w = weights[covered]  # (P, 3)
        surface = np.einsum('pk,pkj->pj', w, mesh.vertices[corners])
        distances = np.linalg.norm(mesh.vertices[corners] - surface[:, None, :], axis=2)
        vertex_id[covered] = corners[np.arange(len(corners)), np.argmin(distances, axis=1)]
        normals = np.einsum('pk,pkj->pj', w, mesh.vertex_normals[corners])
        normals /= np.maximum(np.linalg.norm(normals, axis=1), 1e-300)[:, None]
        lambert = np.maximum(0.0, normals @ -np.asarray(light.direction, dtype=np.float64))
        shade = np.clip(light.intensity * lambert[:, None] * np.asarray(light.color), 0, 1)
        rgb[covered] = np.rint(shade * 255).astype(np.uint8)
    lo, hi = mesh.bbox()
    return RenderedView(rgb=rgb, depth=depth, vertex_id=vertex_id, camera=camera, scene_min=lo, scene_max=hi)


def render_views(mesh, rig, light=DirectionalLight(), threads=1):
    """Renders every camera of the rig; results keep rig order for any thread count"""
    logger.info(f"Rendering {len(rig)} views with {threads} threads")
    if threads <= 1:
        return [rasterize_view(mesh, camera, light) for camera in rig]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(lambda camera: rasterize_view(mesh, camera, light), rig.cameras))


@dataclass(frozen=True, eq=False)
class Projection:
    """Per point: continuous pixel coordinates, integer pixel (column, row), camera depth and visibility"""
    pixel_xy: np.ndarray
    pixels: np.ndarray
    depth: np.ndarray
    visible: np.ndarray

    def records(self):
        return [(i, (int(col), int(row)), bool(v))
                for i, ((col, row), v) in enumerate(zip(self.pixels.tolist(), self.visible.tolist()))]

    def to_dict(self):
        return {'pixels': self.pixels, 'visible': self.visible, 'depth': self.depth}


def default_depth_epsilon(view):
    return CONFIG['DEPTH_EPSILON_FRACTION'] * view.depth_range()


def project_points(cloud, view, depth_epsilon=None, footprint_slack=CONFIG['FOOTPRINT_SLACK'], strict=False):
    """
    A point is visible when it projects inside the viewport in front of the camera onto a covered pixel, and its
    depth does not exceed the depth buffer there by more than depth_epsilon plus footprint_slack pixel footprints
    at that depth. One footprint is depth / focal, the world size of a pixel; it absorbs the depth change across a
    pixel on slanted triangles. footprint_slack=0 gives a plain epsilon test.
    """
    camera = view.camera
    if view.scene_min is not None:
        lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
        if np.any(lo > view.scene_max) or np.any(hi < view.scene_min):
            message = "Point cloud does not overlap the rendered scene, frames probably differ."
            if strict:
                raise FrameMismatch(message)
            logger.warning(message)
    epsilon = default_depth_epsilon(view) if depth_epsilon is None else depth_epsilon
    pixel_xy, depth = camera.project(cloud.positions)
    res = camera.resolution
    finite = np.all(np.isfinite(pixel_xy), axis=1)
    pixels = np.full((cloud.count, 2), -1, dtype=np.int64)
    pixels[finite] = np.floor(pixel_xy[finite]).astype(np.int64)
    inside = finite & (depth > camera.near) & np.all((pixels >= 0) & (pixels < res), axis=1)
    visible = np.zeros(cloud.count, dtype=bool)
    cols, rows = pixels[inside, 0], pixels[inside, 1]
    slack = epsilon + footprint_slack * depth[inside] / camera.focal
    visible[inside] = view.covered[rows, cols] & (depth[inside] <= view.depth[rows, cols] + slack)
    return Projection(pixel_xy=pixel_xy, pixels=pixels, depth=depth, visible=visible)


def unproject(view, pixel_xy, depth):
    return view.camera.unproject(pixel_xy, depth)


def coverage(projections):
    """Fraction of points visible in at least one view"""
    seen = np.zeros(len(projections[0].visible), dtype=bool)
    for projection in projections:
        seen |= projection.visible
    return float(seen.mean())


def save_views(views, rig, directory):
    """Writes view_XXX.png and view_XXX.geom per view and rig.json; returns the written paths in order"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, view in enumerate(views):
        paths.extend(view.save(directory, i))
    paths.append(rig.save(directory / 'rig.json'))
    logger.info(f"Saved {len(views)} views to {directory}")
    return paths


def load_view(directory, index, camera):
    directory = Path(directory)
    geom = directory / f"view_{index:03}.geom"
    if not geom.exists():
        raise ParseError(f"Missing view geometry {geom}.")
    matrix, focal, near, far, depth, vertex_id = read_geom(geom)
    if not np.allclose(matrix, camera.view_matrix(), atol=1e-9) or depth.shape != (camera.resolution,) * 2:
        raise FrameMismatch(f"{geom} does not belong to camera {index} of the rig.")
    png = directory / f"view_{index:03}.png"
    if png.exists():
        with Image.open(png) as image:
            rgb = np.asarray(image.convert('RGB'))
    else:
        rgb = np.zeros(depth.shape + (3,), dtype=np.uint8)
    return RenderedView(rgb=rgb, depth=depth, vertex_id=vertex_id, camera=camera)


def load_views(directory):
    """Reads rig.json and every view of the rig from a render output directory"""
    directory = Path(directory)
    if not (directory / 'rig.json').exists():
        raise ParseError(f"{directory} holds no rig.json.")
    rig = CameraRig.load(directory / 'rig.json')
    return rig, [load_view(directory, i, camera) for i, camera in enumerate(rig)]
