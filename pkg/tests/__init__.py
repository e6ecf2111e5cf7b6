import logging
import os
import shutil
import tempfile
import unittest
from functools import lru_cache
from pathlib import Path

import numpy as np

os.environ.setdefault('DENTMESH_CONFIG', 'tests.config')

from dentmesh import setup_logging  # noqa: E402
from dentmesh.demo import crown_on_slab, icosphere, plane_grid, bowtie  # noqa: E402
from dentmesh.mesh import TriangleMesh, LabeledPointCloud  # noqa: E402


@lru_cache(maxsize=None)
def small_jaw():
    """Crown-on-slab demo at test size (96 x 48 vertices, 4 crowns)"""
    return crown_on_slab(n_crowns=4, nx=96, ny=48)


@lru_cache(maxsize=None)
def sphere(subdivisions=3, radius=1.0):
    return icosphere(subdivisions, radius)


@lru_cache(maxsize=None)
def plane(n=20):
    return plane_grid(n)


def bowtie_mesh(n=6):
    return bowtie(n)


def random_cloud(n, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return LabeledPointCloud(positions=rng.uniform(size=(n, 3)), normals=normals,
                             labels=rng.integers(0, classes, size=n))


def flipped(mesh):
    """Same surface with every triangle wound the other way"""
    return TriangleMesh(vertices=mesh.vertices, triangles=mesh.triangles[:, ::-1], vertex_labels=mesh.vertex_labels)


class DentmeshTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        setup_logging(to_file=False, default_level=logging.WARNING)

    def setUp(self):
        self.logger = logging.getLogger(__name__)
        self.tmp = Path(tempfile.mkdtemp(prefix='dentmesh-'))

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def assertAllClose(self, actual, expected, atol=1e-9, rtol=0.0):
        np.testing.assert_allclose(actual, expected, atol=atol, rtol=rtol)
