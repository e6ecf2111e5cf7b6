"""
End-to-end batch pipeline driven by a JSON config: load -> align -> simplify -> render -> project -> fuse -> evaluate
(-> augment when configured). Every artifact is listed with its SHA-256 in manifest.json; the artifacts of a stage
that fails are renamed with a .partial suffix.
"""
import json
import logging
import math
import os
from pathlib import Path
from time import time
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.special import softmax

from dentmesh import CONFIG
from dentmesh.augment import AugmentConfig, augment, write_sidecar
from dentmesh.boundary import boundary_density, detect_boundary_points
from dentmesh.demo import crown_on_slab
from dentmesh.exceptions import ConfigError, MissingLabels, TooFewBoundaryPoints
from dentmesh.fusion import (gather_pixel_scores, one_hot_encode, concat_features, fill_from_nearest_visible,
                             OracleScores, ScoreFiles, label_image)
from dentmesh.io import load_mesh, save_mesh, save_pointcloud, write_labels
from dentmesh.mesh import (split_nonmanifold_vertices, normalize_coordinates, compute_vertex_normals,
                           mesh_to_pointcloud, mesh_stats)
from dentmesh.metrics import iou_report, cross_entropy, image_cross_entropy, cbl_loss, total_loss
from dentmesh.render import (pca_align, build_hemisphere_rig, render_views, save_views, project_points, coverage,
                             view_grid, DirectionalLight)
from dentmesh.simplify import SimplifyConfig, simplify_with_report
from dentmesh.util import write_json, file_hash, read_json

logger = logging.getLogger(__name__)

PARTIAL_SUFFIX = '.partial'


class StageModel(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class DemoInput(StageModel):
    n_crowns: int = Field(default=4, ge=1, le=16)
    nx: int = Field(default=320, ge=8)
    ny: int = Field(default=160, ge=8)
    label_jitter: float = Field(default=1.5, ge=0)
    seed: int = 0


class SimplifyStage(StageModel):
    method: Literal['qem', 'selective'] = 'selective'
    target_vertex_count: Optional[int] = Field(default=None, ge=0)
    target_fraction: Optional[float] = Field(default=None, gt=0, le=1)
    target_triangle_count: Optional[int] = Field(default=None, ge=0)
    k_neg: float = CONFIG['K_NEG']
    k_pos: float = CONFIG['K_POS']
    refresh_interval: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode='after')
    def check(self):
        targets = [t for t in (self.target_vertex_count, self.target_fraction, self.target_triangle_count)
                   if t is not None]
        if len(targets) > 1:
            raise ValueError("give only one of target_vertex_count, target_fraction and target_triangle_count")
        weights = {'k_neg', 'k_pos', 'refresh_interval'} & self.model_fields_set
        if self.method == 'qem' and weights:
            raise ValueError(f"{', '.join(sorted(weights))} only apply to the selective method")
        return self

    def simplify_config(self, vertex_count):
        """SimplifyConfig for a mesh with vertex_count vertices"""
        vertices = self.target_vertex_count
        if self.target_fraction is not None:
            vertices = int(round(self.target_fraction * vertex_count))
        if self.target_triangle_count is None and vertices is None:
            vertices = min(CONFIG['TARGET_VERTEX_COUNT'], vertex_count)
        try:
            return SimplifyConfig(target_vertex_count=vertices, target_triangle_count=self.target_triangle_count,
                                  k_neg=self.k_neg, k_pos=self.k_pos,
                                  curvature_refresh_interval=self.refresh_interval)
        except ValidationError as e:
            raise ConfigError(str(e))


class RenderStage(StageModel):
    views: Optional[int] = None
    n_lat: Optional[int] = Field(default=None, ge=1)
    n_lon: Optional[int] = Field(default=None, ge=1)
    fov_degrees: float = Field(default=CONFIG['FOV_DEGREES'], gt=0, lt=180)
    resolution: int = Field(default=CONFIG['RESOLUTION'], ge=1)
    light_intensity: float = Field(default=CONFIG['LIGHT_INTENSITY'], ge=0)
    radius_factor: float = Field(default=CONFIG['RIG_RADIUS'], gt=0)
    depth_epsilon: Optional[float] = Field(default=None, ge=0)
    footprint_slack: float = Field(default=CONFIG['FOOTPRINT_SLACK'], ge=0)


class FuseStage(StageModel):
    oracle: bool = True
    scores_dir: Optional[Path] = None  # view_XXX.npy, C x H x W per view
    softmax: bool = False

    @model_validator(mode='after')
    def check(self):
        if not self.oracle and self.scores_dir is None:
            raise ValueError("scores_dir is required unless oracle scores are used")
        return self


class EvaluateStage(StageModel):
    boundary_k: int = Field(default=CONFIG['BOUNDARY_K'], ge=1)
    density_m: int = Field(default=CONFIG['DENSITY_M'], ge=1)
    losses: bool = True
    ce_reduction: Literal['mean', 'sum'] = 'mean'
    cbl_radius: Optional[float] = Field(default=None, gt=0)


class PipelineConfig(StageModel):
    input: Optional[Path] = None
    demo: Optional[DemoInput] = None
    output: Path
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    threads: int = Field(default=CONFIG['THREADS'], ge=1)
    repair: bool = True
    normalize: bool = True
    simplify: SimplifyStage = SimplifyStage()
    render: RenderStage = RenderStage()
    fuse: FuseStage = FuseStage()
    evaluate: EvaluateStage = EvaluateStage()
    augment: Optional[AugmentConfig] = None

    @model_validator(mode='after')
    def check(self):
        if (self.input is None) == (self.demo is None):
            raise ValueError("exactly one of input and demo is required")
        return self


def load_pipeline_config(path, **overrides):
    """
    Reads and validates a pipeline config. Relative paths are taken from the config file's directory;
    overrides (None values ignored) replace top-level keys.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"No such config file: {path}")
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object.")
    base = path.parent
    for key in ('input', 'output'):
        if isinstance(data.get(key), str) and not os.path.isabs(data[key]):
            data[key] = str(base / data[key])
    fuse = data.get('fuse')
    if isinstance(fuse, dict) and isinstance(fuse.get('scores_dir'), str) and not os.path.isabs(fuse['scores_dir']):
        fuse['scores_dir'] = str(base / fuse['scores_dir'])
    data.update({k: str(v) if isinstance(v, Path) else v for k, v in overrides.items() if v is not None})
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid pipeline config {path}: {e}")
    check_paths(config)
    return config


def check_paths(config):
    if config.input is not None and not config.input.exists():
        raise ConfigError(f"Input mesh {config.input} does not exist.")
    if not config.fuse.oracle and not config.fuse.scores_dir.is_dir():
        raise ConfigError(f"Score directory {config.fuse.scores_dir} does not exist.")


def density_or_none(mesh, k, m):
    """Boundary average distance of a labeled mesh's vertices, None when there are too few boundary points"""
    if not mesh.has_labels:
        return None
    cloud = mesh_to_pointcloud(mesh)
    try:
        return boundary_density(cloud, detect_boundary_points(cloud, k), m).avg_distance
    except TooFewBoundaryPoints as e:
        logger.warning(str(e))
        return None


def simplify_stats(before, after, report, method, config, k=CONFIG['BOUNDARY_K'], m=CONFIG['DENSITY_M']):
    return {
        'method': method,
        'vertices_before': before.vertex_count,
        'vertices_after': after.vertex_count,
        'triangles_before': before.triangle_count,
        'triangles_after': after.triangle_count,
        'target_vertex_count': config.target_vertex_count,
        'target_triangle_count': config.target_triangle_count,
        'k_neg': config.k_neg if method == 'selective' else None,
        'k_pos': config.k_pos if method == 'selective' else None,
        'refresh_interval': config.refresh_interval(before.vertex_count) if method == 'selective' else None,
        'collapses': report.collapses,
        'rejected': report.rejected,
        'curvature_refreshes': report.refreshes,
        'boundary_k': k,
        'density_m': m,
        'boundary_avg_distance_before': density_or_none(before, k, m),
        'boundary_avg_distance_after': density_or_none(after, k, m),
    }


def as_probabilities(scores, axis):
    """Scores whose entries along axis already form distributions are kept, others go through a softmax"""
    scores = np.asarray(scores, dtype=np.float64)
    if np.all(scores >= 0) and np.allclose(scores.sum(axis=axis), 1, atol=1e-6):
        return scores
    return softmax(scores, axis=axis)


class Pipeline:
    STAGES = ('load', 'align', 'simplify', 'render', 'project', 'fuse', 'evaluate', 'augment')

    def __init__(self, config):
        self.config = config
        self.output = Path(config.output)
        self.artifacts = []
        self.stage = None
        self.mesh = self.cloud = self.rig = None
        self.views = self.projections = self.scores = self.gathered = self.predicted = None

    def emit(self, path):
        self.artifacts.append((self.stage, Path(path)))
        return path

    def stages(self):
        return [s for s in self.STAGES if s != 'augment' or self.config.augment is not None]

    def run(self):
        self.output.mkdir(parents=True, exist_ok=True)
        started = time()
        for stage in self.stages():
            self.stage = stage
            first = len(self.artifacts)
            logger.info(f"Pipeline stage {stage}")
            try:
                getattr(self, f"_{stage}")()
            except Exception:
                logger.exception(f"Pipeline stage {stage} failed")
                self._mark_partial(first)
                self.write_manifest(failed=stage)
                raise
        manifest = self.write_manifest()
        logger.info(f"Pipeline completed in {time() - started:.1f}s")
        return manifest

    def _mark_partial(self, first):
        for i in range(first, len(self.artifacts)):
            stage, path = self.artifacts[i]
            if path.exists():
                partial = path.with_name(path.name + PARTIAL_SUFFIX)
                path.replace(partial)
                self.artifacts[i] = (stage, partial)

    def write_manifest(self, failed=None):
        entries = [{'stage': stage, 'path': path.relative_to(self.output).as_posix(), 'sha256': file_hash(path)}
                   for stage, path in self.artifacts if path.exists()]
        manifest = {'status': 'failed' if failed else 'complete', 'failed_stage': failed,
                    'seed': self.config.seed, 'artifacts': entries}
        write_json(self.output / 'manifest.json', manifest)
        return manifest

    def _load(self):
        config = self.config
        if config.demo is not None:
            mesh = crown_on_slab(config.demo.n_crowns, config.demo.nx, config.demo.ny,
                                     label_jitter=config.demo.label_jitter, seed=config.demo.seed)
        else:
            mesh = load_mesh(config.input)
        if config.repair:
            mesh = split_nonmanifold_vertices(mesh)
        mesh = compute_vertex_normals(mesh)
        if config.normalize:
            mesh, transform = normalize_coordinates(mesh)
            self.emit(write_json(self.output / 'normalization.json', transform.to_dict()))
        if not mesh.has_labels:
            raise MissingLabels("The pipeline needs a labeled mesh.")
        self.emit(write_json(self.output / 'input_stats.json', mesh_stats(mesh).to_dict()))
        self.mesh = mesh

    def _align(self):
        self.mesh, transform = pca_align(self.mesh)
        self.emit(write_json(self.output / 'alignment.json', transform.to_dict()))
        self.emit(save_mesh(self.mesh, self.output / 'aligned.ply'))

    def _simplify(self):
        stage = self.config.simplify
        config = stage.simplify_config(self.mesh.vertex_count)
        before = self.mesh
        self.mesh, report = simplify_with_report(before, config, stage.method)
        evaluate = self.config.evaluate
        stats = simplify_stats(before, self.mesh, report, stage.method, config, evaluate.boundary_k,
                               evaluate.density_m)
        self.emit(write_json(self.output / 'simplify.json', stats))
        self.emit(save_mesh(self.mesh, self.output / 'simplified.ply'))
        self.cloud = mesh_to_pointcloud(self.mesh)

    def _render(self):
        stage = self.config.render
        n_lat, n_lon = view_grid(stage.views, stage.n_lat, stage.n_lon)
        self.rig = build_hemisphere_rig(self.mesh, n_lat, n_lon, math.radians(stage.fov_degrees), stage.resolution,
                                        stage.radius_factor)
        light = DirectionalLight(intensity=stage.light_intensity)
        self.views = render_views(self.mesh, self.rig, light, self.config.threads)
        for path in save_views(self.views, self.rig, self.output / 'views'):
            self.emit(path)

    def _project(self):
        stage = self.config.render
        self.projections = [project_points(self.cloud, view, stage.depth_epsilon, stage.footprint_slack)
                            for view in self.views]
        summary = {'coverage': coverage(self.projections),
                   'visible_per_view': [int(p.visible.sum()) for p in self.projections],
                   'points': self.cloud.count}
        self.emit(write_json(self.output / 'projection.json', summary))

    def _fuse(self):
        stage = self.config.fuse
        if stage.oracle:
            self.scores = OracleScores(self.views, self.cloud.labels)
        else:
            self.scores = ScoreFiles(stage.scores_dir, len(self.views))
        self.gathered = gather_pixel_scores(self.cloud, self.views, self.scores, stage.softmax, self.projections,
                                            self.config.threads)
        encoded = one_hot_encode(self.gathered.scores, self.gathered.visible)
        fused = concat_features(self.cloud, encoded, self.gathered.counts)
        for path in fused.save(self.output / 'features.bin'):
            self.emit(path)
        labels = np.argmax(self.gathered.scores, axis=1).astype(np.int64)
        self.predicted = fill_from_nearest_visible(self.cloud.positions, labels, self.gathered.visible)
        self.emit(write_labels(self.output / 'predicted.labels.json', self.predicted))

    def _evaluate(self):
        stage = self.config.evaluate
        gt = self.cloud.labels
        report = iou_report(self.predicted, gt, self.cloud, stage.boundary_k)
        if stage.losses:
            report['losses'] = self.losses(gt, stage.cbl_radius, stage.ce_reduction).to_dict()
        self.emit(write_json(self.output / 'report.json', report))
        logger.info(f"mIoU {report['miou']:.4f}, boundary IoU {report['boundary_iou']:.4f}")

    def losses(self, gt, radius, reduction='mean'):
        visible = self.gathered.visible
        point_probabilities = as_probabilities(self.gathered.scores[visible], axis=1)
        ce_point = cross_entropy(point_probabilities, gt[visible], reduction) if visible.any() else 0.0
        ce_image = 0.0
        for view, scores in zip(self.views, self.scores):
            ce_image += image_cross_entropy(as_probabilities(scores, axis=0), label_image(view, gt), reduction)
        ce_image /= len(self.views)
        cbl = cbl_loss(self.cloud.positions, gt, self.gathered.scores, radius)
        return total_loss(ce_image, ce_point, cbl)

    def _augment(self):
        config = self.config.augment
        if 'seed' not in config.model_fields_set:
            config = config.model_copy(update={'seed': self.config.seed})
        cloud, metadata, _ = augment(self.cloud, config)
        path = self.emit(save_pointcloud(cloud, self.output / 'augmented.ply'))
        self.emit(write_sidecar(path, metadata))


def run_pipeline(config):
    return Pipeline(config).run()


