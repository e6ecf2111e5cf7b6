"""
Seeded rigid augmentations. Random numbers come from numpy's PCG64 bit generator; its state is handed in by the
caller and the advanced state is handed back, so nothing global is consumed.
"""
import logging
import math
from pathlib import Path
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from dentmesh import CONFIG
from dentmesh.util import write_json

logger = logging.getLogger(__name__)

AXES = ('X', 'Y', 'Z')


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    translation_range: float = Field(default=CONFIG['TRANSLATION_RANGE'], ge=0)
    rotation_sigma: float = Field(default=CONFIG['ROTATION_SIGMA'], ge=0)
    rotation_unit: Literal['radians', 'degrees'] = 'radians'
    rotation_axes: Tuple[Literal['X', 'Y', 'Z'], ...] = ('Z',)

    @field_validator('rotation_axes')
    @classmethod
    def ordered_axes(cls, axes):
        if len(set(axes)) != len(axes):
            raise ValueError("rotation axes must not repeat")
        return tuple(a for a in AXES if a in axes)


def rng_state(seed):
    return np.random.PCG64(seed).state


def _generator(state):
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def axis_rotation(axis, angle):
    c, s = math.cos(angle), math.sin(angle)
    if axis == 'X':
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 'Y':
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def random_translate(cloud, config, state):
    """Shifts every point by u * extent per axis, u uniform in [-range, range]. Returns (cloud, offset, state)"""
    rng = _generator(state)
    u = rng.uniform(-config.translation_range, config.translation_range, size=3)
    extent = cloud.positions.max(axis=0) - cloud.positions.min(axis=0)
    offset = u * extent
    logger.debug(f"Translating by {offset.tolist()}")
    return cloud.with_(positions=cloud.positions + offset), offset, rng.bit_generator.state


def random_rotate(cloud, config, state):
    """
    Draws one normal angle per selected axis and rotates positions (about the centroid) and normals, applying X
    before Y before Z. Returns (cloud, rotation matrix, angles in radians keyed by axis, state).
    """
    rng = _generator(state)
    angles = rng.normal(0.0, config.rotation_sigma, size=len(config.rotation_axes))
    if config.rotation_unit == 'degrees':
        angles = np.radians(angles)
    rotation = np.eye(3)
    for axis, angle in zip(config.rotation_axes, angles):
        rotation = axis_rotation(axis, angle) @ rotation
    centroid = cloud.positions.mean(axis=0)
    positions = (cloud.positions - centroid) @ rotation.T + centroid
    normals = cloud.normals @ rotation.T
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    angles = {axis: float(angle) for axis, angle in zip(config.rotation_axes, angles)}
    return cloud.with_(positions=positions, normals=normals), rotation, angles, rng.bit_generator.state


def augment(cloud, config, state=None):
    """Translation followed by rotation. Returns (cloud, metadata, state)"""
    state = state or rng_state(config.seed)
    cloud, offset, state = random_translate(cloud, config, state)
    cloud, rotation, angles, state = random_rotate(cloud, config, state)
    metadata = {
        'seed': config.seed,
        'generator': 'PCG64',
        'translation_range': config.translation_range,
        'offset': offset,
        'rotation_sigma': config.rotation_sigma,
        'rotation_unit': config.rotation_unit,
        'rotation_axes': list(config.rotation_axes),
        'angles_radians': angles,
        'rotation': rotation,
        'order': ['translate', 'rotate'],
    }
    return cloud, metadata, state


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + '.aug.json')


def write_sidecar(path, metadata):
    return write_json(sidecar_path(path), metadata)
