import math
import os
import unittest

import numpy as np

from dentmesh.exceptions import InvalidGrid, FrameMismatch, ParseError, DegenerateMesh
from dentmesh.mesh import TriangleMesh, mesh_to_pointcloud
from dentmesh.render import (Camera, CameraRig, DirectionalLight, NONE, pca_align, view_grid, build_hemisphere_rig,
                             rasterize_view, render_views, project_points, unproject, coverage, save_views,
                             load_view, load_views, read_geom)
from tests import DentmeshTest, sphere, small_jaw, plane


def square(z=0.0, half=1.0, normal=(0.0, 0.0, 1.0)):
    vertices = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return TriangleMesh(vertices=vertices, triangles=[[0, 1, 2], [0, 2, 3]], vertex_normals=np.tile(normal, (4, 1)))


def top_camera(height=5.0, resolution=64):
    return Camera(position=(0, 0, height), look_at=(0, 0, 0), up=(0, 1, 0), fov=math.radians(40),
                  resolution=resolution, near=0.01, far=100)


def rotation_matrix(x, y, z):
    cx, sx, cy, sy, cz, sz = math.cos(x), math.sin(x), math.cos(y), math.sin(y), math.cos(z), math.sin(z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def ray_cast_depth(mesh, camera, pixels):
    """Camera depth of the first triangle hit through each pixel center, inf on a miss (Moller-Trumbore)"""
    directions = camera.unproject(pixels + 0.5, np.ones(len(pixels))) - camera.position  # camera z of each is 1
    corners = mesh.vertices[mesh.triangles]
    e1, e2 = corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]
    s = camera.position - corners[:, 0]
    q = np.cross(s, e1)
    depth = np.full(len(pixels), np.inf)
    with np.errstate(divide='ignore', invalid='ignore'):
        for i, d in enumerate(directions):
            p = np.cross(d, e2)
            det = np.einsum('ij,ij->i', e1, p)
            u = np.einsum('ij,ij->i', s, p) / det
            v = (q @ d) / det
            t = np.einsum('ij,ij->i', e2, q) / det
            hit = (det != 0) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > camera.near)
            if hit.any():
                depth[i] = t[hit].min()
    return depth


def ray_cast_visibility(mesh, cloud, camera, epsilon, slack):
    """Visibility by brute force against every triangle; also returns a mask of cases within rounding of the cut"""
    pixel_xy, depth = camera.project(cloud.positions)
    pixels = np.floor(pixel_xy).astype(np.int64)
    inside = (depth > camera.near) & np.all((pixels >= 0) & (pixels < camera.resolution), axis=1)
    hit = np.full(cloud.count, np.inf)
    hit[inside] = ray_cast_depth(mesh, camera, pixels[inside])
    tolerance = hit + epsilon + slack * depth / camera.focal
    visible = inside & np.isfinite(hit) & (depth <= tolerance)
    borderline = np.isfinite(hit) & (np.abs(depth - tolerance) < 1e-9)
    return visible, borderline


class TestRig(DentmeshTest):
    def test_hemisphere_rig(self):
        mesh = small_jaw()
        n_lat, n_lon = view_grid(96)
        rig = build_hemisphere_rig(mesh, n_lat, n_lon)
        self.assertEqual(96, len(rig))
        center = mesh.vertices.mean(axis=0)
        for camera in rig:
            self.assertLess(camera.axis_residual(center), 1e-9)
            self.assertGreater(camera.position[2], center[2])
            self.assertAlmostEqual(rig.radius, float(np.linalg.norm(camera.position - center)))
            self.assertAllClose(camera.rotation @ camera.rotation.T, np.eye(3), atol=1e-12)
        self.assertAlmostEqual(2 * mesh.bbox_diagonal(), rig.radius)

    def test_single_ring(self):
        rig = build_hemisphere_rig(small_jaw(), 1, 4)
        offsets = np.array([camera.position - rig.center for camera in rig])
        for i in range(4):
            a, b = offsets[i, :2], offsets[(i + 1) % 4, :2]
            self.assertAlmostEqual(0.0, float(np.dot(a, b)) / float(np.dot(a, a)))
        # a single band sits at 45 degrees of elevation
        self.assertAlmostEqual(math.sin(math.pi / 4), offsets[0, 2] / rig.radius)

    def test_invalid_grids(self):
        with self.assertRaises(InvalidGrid):
            view_grid(50)
        with self.assertRaises(InvalidGrid):
            view_grid(96, 4, 4)
        with self.assertRaises(InvalidGrid):
            build_hemisphere_rig(small_jaw(), 0, 4)
        self.assertEqual((4, 8), view_grid(32))
        self.assertEqual((3, 5), view_grid(15, 3, 5))

    def test_zero_extent(self):
        mesh = TriangleMesh(vertices=np.ones((3, 3)), triangles=np.zeros((0, 3)))
        with self.assertRaises(DegenerateMesh):
            build_hemisphere_rig(mesh, 1, 4)

    def test_pole_camera(self):
        camera = Camera(position=(0, 0, 3), look_at=(0, 0, 0), up=(0, 0, 1), fov=1.0, resolution=8, near=0.1,
                        far=10)
        self.assertAllClose(camera.rotation @ camera.rotation.T, np.eye(3), atol=1e-12)
        self.assertAllClose(camera.forward, [0.0, 0.0, -1.0], atol=0)

    def test_rig_file(self):
        rig = build_hemisphere_rig(small_jaw(), 2, 3)
        path = rig.save(self.tmp / 'rig.json')
        loaded = CameraRig.load(path)
        self.assertEqual(6, len(loaded))
        for a, b in zip(rig, loaded):
            self.assertAllClose(b.view_matrix(), a.view_matrix(), atol=1e-12)


class TestRasterize(DentmeshTest):
    def test_lit_from_above(self):
        view = rasterize_view(square(), top_camera())
        self.assertEqual((255, 255, 255), tuple(view.rgb[32, 32]))
        self.assertEqual((0, 0, 0), tuple(view.rgb[0, 0]))
        self.assertEqual(NONE, view.vertex_id[0, 0])
        self.assertTrue(np.isinf(view.depth[0, 0]))

    def test_half_intensity(self):
        view = rasterize_view(square(), top_camera(), DirectionalLight(intensity=0.5))
        self.assertEqual((128, 128, 128), tuple(view.rgb[32, 32]))

    def test_vertical_wall_is_dark(self):
        wall = TriangleMesh(vertices=[[0, -1, -1], [0, 1, -1], [0, 1, 1], [0, -1, 1]], triangles=[[0, 1, 2], [0, 2, 3]],
                            vertex_normals=np.tile([1.0, 0.0, 0.0], (4, 1)))
        camera = Camera(position=(5, 0, 0), look_at=(0, 0, 0), up=(0, 0, 1), fov=math.radians(40), resolution=64,
                        near=0.01, far=100)
        view = rasterize_view(wall, camera)
        self.assertTrue(view.covered[32, 32])
        self.assertEqual((0, 0, 0), tuple(view.rgb[32, 32]))
        self.assertAlmostEqual(5.0, view.depth[32, 32])

    def test_nearer_surface_wins(self):
        lower, upper = square(0.0), square(1.0)
        mesh = TriangleMesh(vertices=np.vstack([lower.vertices, upper.vertices]),
                            triangles=np.vstack([lower.triangles, upper.triangles + 4]),
                            vertex_normals=np.tile([0.0, 0.0, 1.0], (8, 1)))
        view = rasterize_view(mesh, top_camera())
        self.assertAlmostEqual(4.0, view.depth[32, 32])
        # the upper square is nearer, so it hides the lower one completely
        self.assertTrue(np.all(view.vertex_id[view.covered] >= 4))

    def test_vertex_id_is_nearest_corner(self):
        camera = top_camera(resolution=64)
        view = rasterize_view(square(), camera)
        corners = square().vertices
        for row, col in ((20, 20), (20, 44), (44, 44), (44, 20)):
            point = camera.unproject([[col + 0.5, row + 0.5]], [view.depth[row, col]])[0]
            nearest = int(np.argmin(np.linalg.norm(corners - point, axis=1)))
            self.assertEqual(nearest, view.vertex_id[row, col])

    def test_sphere_depth_oracle(self):
        mesh = sphere(2)
        self.assertLessEqual(mesh.triangle_count, 500)
        rig = build_hemisphere_rig(mesh, 1, 4, resolution=128)
        cloud = mesh_to_pointcloud(mesh)
        for camera in rig:
            view = rasterize_view(mesh, camera)
            for epsilon, slack in ((1e-3, 0.0), (1e-3, 2.0), (0.05, 0.0)):
                projection = project_points(cloud, view, depth_epsilon=epsilon, footprint_slack=slack)
                expected, borderline = ray_cast_visibility(mesh, cloud, camera, epsilon, slack)
                self.assertTrue(np.array_equal(expected[~borderline], projection.visible[~borderline]))
            towards = camera.position - mesh.vertices
            facing = np.einsum('ij,ij->i', mesh.vertex_normals, towards / np.linalg.norm(towards, axis=1)[:, None])
            self.assertFalse(projection.visible[facing < -0.3].any())

    def test_occluded_plane_depth_oracle(self):
        floor = plane(8)
        lid = square(z=0.5, half=0.2)
        mesh = TriangleMesh(vertices=np.vstack([floor.vertices, lid.vertices + (0.5, 0.5, 0)]),
                            triangles=np.vstack([floor.triangles, lid.triangles + floor.vertex_count]),
                            vertex_normals=np.vstack([floor.vertex_normals, lid.vertex_normals]))
        camera = Camera(position=(0.5, 0.5, 3), look_at=(0.5, 0.5, 0), up=(0, 1, 0), fov=math.radians(40),
                        resolution=128, near=0.01, far=10)
        view = rasterize_view(mesh, camera)
        cloud = mesh_to_pointcloud(mesh)
        projection = project_points(cloud, view, depth_epsilon=1e-3, footprint_slack=2.0)
        expected, borderline = ray_cast_visibility(mesh, cloud, camera, 1e-3, 2.0)
        self.assertTrue(np.array_equal(expected[~borderline], projection.visible[~borderline]))
        # floor vertices under the lid are hidden, the lid corners are not
        under = np.all(np.abs(floor.vertices[:, :2] - 0.5) < 0.15, axis=1)
        self.assertTrue(under.any())
        self.assertFalse(projection.visible[:floor.vertex_count][under].any())
        self.assertTrue(projection.visible[floor.vertex_count:].all())

    def test_threads_do_not_change_images(self):
        mesh = small_jaw()
        rig = build_hemisphere_rig(mesh, 1, 4, resolution=64)
        single = render_views(mesh, rig, threads=1)
        parallel = render_views(mesh, rig, threads=2)
        for a, b in zip(single, parallel):
            self.assertTrue(np.array_equal(a.rgb, b.rgb))
            self.assertTrue(np.array_equal(a.depth, b.depth))
            self.assertTrue(np.array_equal(a.vertex_id, b.vertex_id))


class TestProjection(DentmeshTest):
    def test_project_unproject(self):
        camera = build_hemisphere_rig(small_jaw(), 2, 4).cameras[5]
        points = small_jaw().vertices[::37]
        pixel_xy, depth = camera.project(points)
        self.assertAllClose(camera.unproject(pixel_xy, depth), points, atol=1e-9)

    def test_plane_from_above(self):
        mesh = plane(8)
        camera = Camera(position=(0.5, 0.5, 3), look_at=(0.5, 0.5, 0), up=(0, 1, 0), fov=math.radians(40),
                        resolution=128, near=0.01, far=10)
        view = rasterize_view(mesh, camera)
        projection = project_points(mesh_to_pointcloud(mesh), view)
        rows, cols = np.divmod(np.arange(64), 8)
        border = (rows == 0) | (rows == 7) | (cols == 0) | (cols == 7)
        # border vertices land on pixels whose centers fall just outside the plane
        self.assertFalse(np.isfinite(view.depth[projection.pixels[border, 1], projection.pixels[border, 0]]).any())
        self.assertFalse(projection.visible[border].any())
        self.assertTrue(projection.visible[~border].all())
        self.assertAlmostEqual(36 / 64, coverage([projection]))
        records = projection.records()
        self.assertEqual(64, len(records))
        self.assertEqual(0, records[0][0])
        inner = projection.pixels[9]
        self.assertAllClose(unproject(view, projection.pixel_xy[9:10], projection.depth[9:10])[0], mesh.vertices[9],
                            atol=1e-9)
        self.assertTrue(view.covered[inner[1], inner[0]])

    def test_points_behind_the_camera(self):
        mesh = plane(8)
        view = rasterize_view(mesh, top_camera())
        cloud = mesh_to_pointcloud(mesh).with_(positions=mesh.vertices + (0, 0, 10))
        projection = project_points(cloud, view)
        self.assertFalse(projection.visible.any())
        with self.assertRaises(FrameMismatch):
            project_points(cloud, view, strict=True)

    def test_alignment(self):
        mesh = small_jaw()
        rotation = rotation_matrix(0.3, -0.2, 1.1)
        moved = mesh.with_(vertices=mesh.vertices @ rotation.T + (4, -1, 2),
                           vertex_normals=mesh.vertex_normals @ rotation.T)
        aligned, transform = pca_align(mesh)
        realigned, moved_transform = pca_align(moved)
        self.assertFalse(transform.degenerate)
        self.assertAllClose(np.abs(realigned.vertices), np.abs(aligned.vertices), atol=1e-9)
        self.assertAllClose(moved_transform.invert(realigned.vertices), moved.vertices, atol=1e-9)
        self.assertGreater(aligned.vertex_normals[:, 2].mean(), 0)
        self.assertGreater(np.ptp(aligned.vertices[:, 0]), np.ptp(aligned.vertices[:, 1]))
        self.assertAlmostEqual(1.0, np.linalg.det(transform.rotation))

    def test_sphere_alignment_is_degenerate(self):
        _, transform = pca_align(sphere(2))
        self.assertTrue(transform.degenerate)
        self.assertAllClose(transform.rotation @ transform.rotation.T, np.eye(3), atol=1e-9)
        self.assertAlmostEqual(1.0, np.linalg.det(transform.rotation))


class TestViewFiles(DentmeshTest):
    def test_round_trip(self):
        mesh = small_jaw()
        rig = build_hemisphere_rig(mesh, 1, 2, resolution=48)
        views = render_views(mesh, rig)
        paths = save_views(views, rig, self.tmp / 'render')
        self.assertEqual(5, len(paths))
        loaded_rig, loaded = load_views(self.tmp / 'render')
        self.assertEqual(2, len(loaded))
        for view, copy in zip(views, loaded):
            self.assertTrue(np.array_equal(view.rgb, copy.rgb))
            self.assertTrue(np.array_equal(view.depth.astype(np.float32), copy.depth))
            self.assertTrue(np.array_equal(view.vertex_id, copy.vertex_id))
        matrix, focal, near, far, _, _ = read_geom(self.tmp / 'render' / 'view_001.geom')
        self.assertAllClose(matrix, rig.cameras[1].view_matrix(), atol=0)
        self.assertEqual(rig.cameras[1].focal, focal)
        with self.assertRaises(FrameMismatch):
            load_view(self.tmp / 'render', 0, rig.cameras[1])

    def test_not_a_geom_file(self):
        path = self.tmp / 'view_000.geom'
        path.write_bytes(b'not a view')
        with self.assertRaises(ParseError):
            read_geom(path)
        with self.assertRaises(ParseError):
            load_views(self.tmp)


@unittest.skipUnless(os.getenv('DENTMESH_SLOW_TESTS'), 'set DENTMESH_SLOW_TESTS=1 for full-size runs')
class TestFullRigCoverage(DentmeshTest):
    def test_96_view_coverage(self):
        mesh = small_jaw()
        rig = build_hemisphere_rig(mesh, *view_grid(96), resolution=96)
        self.assertEqual(96, len(rig))
        views = render_views(mesh, rig, threads=2)
        cloud = mesh_to_pointcloud(mesh)
        self.assertGreaterEqual(coverage([project_points(cloud, view) for view in views]), 0.95)
