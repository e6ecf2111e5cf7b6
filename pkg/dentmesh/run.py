"""
Command line frontend. Exit codes: 0 success, 1 runtime failure, 2 usage or validation error; failures print one
JSON line {"error": ..., "message": ...} on stderr.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path
from time import time

import numpy as np
from pydantic import ValidationError

from dentmesh import CONFIG, setup_logging
from dentmesh.augment import AugmentConfig, augment, rng_state, write_sidecar
from dentmesh.boundary import detect_boundary_points, boundary_density, boundary_colors
from dentmesh.curvature import mean_curvature, export_curvature_colormap, summary
from dentmesh.demo import crown_on_slab, icosphere, plane_grid, bowtie
from dentmesh.exceptions import DentmeshException, ConfigError, MissingLabels
from dentmesh.fusion import (gather_pixel_scores, one_hot_encode, concat_features, majority_vote_segment,
                             OracleScores, ScoreFiles)
from dentmesh.io import load_mesh, save_mesh, save_pointcloud, read_labels, write_labels, labels_sidecar
from dentmesh.mesh import split_nonmanifold_vertices, normalize_coordinates, compute_vertex_normals, mesh_to_pointcloud
from dentmesh.metrics import iou_report
from dentmesh.pipeline import load_pipeline_config, run_pipeline, simplify_stats
from dentmesh.render import (pca_align, build_hemisphere_rig, render_views, save_views, load_views, project_points,
                             coverage, view_grid, DirectionalLight)
from dentmesh.simplify import SimplifyConfig, simplify_with_report
from dentmesh.util import write_json

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def report_error(name, message):
    print(json.dumps({'error': name, 'message': message}), file=sys.stderr)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        report_error('UsageError', message)
        sys.exit(EXIT_USAGE)


def prepare_mesh(args):
    mesh = load_mesh(args.input)
    if getattr(args, 'repair', False):
        mesh = split_nonmanifold_vertices(mesh)
    if not mesh.has_normals:
        mesh = compute_vertex_normals(mesh)
    if getattr(args, 'normalize', False):
        mesh, _ = normalize_coordinates(mesh)
    return mesh


def units(args):
    return 'normalized' if getattr(args, 'normalize', False) else 'input'


def cmd_simplify(args):
    weights = [flag for flag, value in (('--k-neg', args.k_neg), ('--k-pos', args.k_pos),
                                        ('--refresh-interval', args.refresh_interval)) if value is not None]
    if args.method == 'qem' and weights:
        raise ConfigError(f"{', '.join(weights)} require --method selective.")
    if (args.target is None) == (args.target_faces is None):
        raise ConfigError("Give exactly one of --target and --target-faces.")
    try:
        config = SimplifyConfig(target_vertex_count=args.target, target_triangle_count=args.target_faces,
                                k_neg=CONFIG['K_NEG'] if args.k_neg is None else args.k_neg,
                                k_pos=CONFIG['K_POS'] if args.k_pos is None else args.k_pos,
                                curvature_refresh_interval=args.refresh_interval)
    except ValidationError as e:
        raise ConfigError(str(e))
    mesh = prepare_mesh(args)
    started = time()
    result, report = simplify_with_report(mesh, config, args.method)
    runtime = time() - started
    save_mesh(result, args.output)
    stats = simplify_stats(mesh, result, report, args.method, config, args.k, args.m)
    stats['units'] = units(args)
    stats['runtime_seconds'] = runtime
    write_json(args.stats or Path(args.output).with_suffix('.stats.json'), stats)
    return EXIT_OK


def cmd_curvature(args):
    mesh = prepare_mesh(args)
    field = mean_curvature(mesh)
    export_curvature_colormap(mesh, field, args.output)
    write_json(args.summary or Path(args.output).with_suffix('.curvature.json'), summary(field))
    return EXIT_OK


def cmd_boundary(args):
    cloud = mesh_to_pointcloud(prepare_mesh(args))
    if cloud.labels is None:
        raise MissingLabels(f"{args.input} carries no labels.")
    boundary = detect_boundary_points(cloud, args.k)
    density = boundary_density(cloud, boundary, args.m)
    report = density.to_dict()
    report.update({'units': units(args), 'k': boundary.k_used, 'points': cloud.count})
    write_json(args.output, report)
    if args.ply:
        save_pointcloud(cloud, args.ply, colors=boundary_colors(cloud.count, boundary))
    if args.mask:
        write_json(args.mask, {'mask': boundary.mask(cloud.count).astype(np.uint8), 'k': boundary.k_used})
    return EXIT_OK


def cmd_render(args):
    mesh = prepare_mesh(args)
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    if not args.no_align:
        mesh, transform = pca_align(mesh)
        write_json(output / 'alignment.json', transform.to_dict())
    save_mesh(mesh, output / 'aligned.ply')
    n_lat, n_lon = view_grid(args.views, args.n_lat, args.n_lon)
    rig = build_hemisphere_rig(mesh, n_lat, n_lon, math.radians(args.fov), args.resolution, args.radius)
    views = render_views(mesh, rig, DirectionalLight(intensity=args.light_intensity), args.threads)
    save_views(views, rig, output)
    return EXIT_OK


def load_cloud(path):
    return mesh_to_pointcloud(load_mesh(path))


def cmd_project(args):
    cloud = load_cloud(args.input)
    _, views = load_views(args.views_dir)
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    projections = []
    for i, view in enumerate(views):
        projection = project_points(cloud, view, args.depth_epsilon, args.footprint_slack)
        projections.append(projection)
        write_json(output / f"projection_{i:03}.json",
                   {'view': i, 'points': [[index, list(pixel), visible] for index, pixel, visible in
                                          projection.records()]})
    write_json(output / 'coverage.json', {'coverage': coverage(projections), 'points': cloud.count,
                                          'visible_per_view': [int(p.visible.sum()) for p in projections]})
    return EXIT_OK


def cmd_fuse(args):
    cloud = load_cloud(args.input)
    _, views = load_views(args.views_dir)
    if args.oracle:
        if cloud.labels is None:
            raise MissingLabels("Oracle scores need a labeled cloud.")
        scores = OracleScores(views, cloud.labels)
    else:
        scores = ScoreFiles(args.scores, len(views))
    gathered = gather_pixel_scores(cloud, views, scores, args.softmax, threads=args.threads)
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    encoded = one_hot_encode(gathered.scores, gathered.visible)
    concat_features(cloud, encoded, gathered.counts).save(output / 'features.bin')
    predicted = majority_vote_segment(cloud, views, scores, gathered=gathered)
    write_labels(output / 'predicted.labels.json', predicted)
    return EXIT_OK


def labels_from(path):
    """Labels from a .labels.json file or from a labeled mesh"""
    if str(path).endswith('.json'):
        return read_labels(path)
    mesh = load_mesh(path)
    if not mesh.has_labels:
        raise MissingLabels(f"{path} carries no labels (no {labels_sidecar(path).name} either).")
    return mesh.vertex_labels


def cmd_evaluate(args):
    pred, gt = labels_from(args.pred), labels_from(args.gt)
    source = args.cloud or args.gt
    if str(source).endswith('.json'):
        raise ConfigError("Boundary IoU needs point positions: pass --cloud or a labeled ground truth mesh.")
    cloud = load_cloud(source)
    write_json(args.output, iou_report(pred, gt, cloud, args.k))
    return EXIT_OK


def cmd_augment(args):
    cloud = load_cloud(args.input)
    try:
        config = AugmentConfig(seed=args.seed, translation_range=args.translation_range,
                               rotation_sigma=args.rotation_sigma, rotation_unit=args.rotation_unit,
                               rotation_axes=tuple(args.rotation_axes.upper()))
    except ValidationError as e:
        raise ConfigError(str(e))
    cloud, metadata, _ = augment(cloud, config, rng_state(config.seed))
    save_pointcloud(cloud, args.output)
    write_sidecar(args.output, metadata)
    return EXIT_OK


def cmd_pipeline(args):
    config = load_pipeline_config(args.config, output=args.output, threads=args.threads, seed=args.seed)
    if args.ce_sum:
        config = config.model_copy(update={'evaluate': config.evaluate.model_copy(update={'ce_reduction': 'sum'})})
    manifest = run_pipeline(config)
    logger.info(f"Pipeline wrote {len(manifest['artifacts'])} artifacts to {config.output}")
    return EXIT_OK


def cmd_demo(args):
    if args.fixture == 'crown_on_slab':
        mesh = crown_on_slab(args.crowns, args.nx, args.ny, label_jitter=args.label_jitter, seed=args.seed)
    elif args.fixture == 'icosphere':
        mesh = icosphere(args.subdivisions, args.radius)
    elif args.fixture == 'plane':
        mesh = plane_grid(args.n)
    else:
        mesh = bowtie(args.n)
    save_mesh(mesh, args.output)
    logger.info(f"Wrote {args.fixture} fixture {mesh} to {args.output}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--log-file', action='store_true', help="also log to the rotating files in assets/")

    threaded = argparse.ArgumentParser(add_help=False)
    threaded.add_argument('--threads', type=int, default=CONFIG['THREADS'], help="worker threads")

    mesh_input = argparse.ArgumentParser(add_help=False)
    mesh_input.add_argument('--repair', action='store_true', help="split non-manifold vertices first")
    mesh_input.add_argument('--normalize', action='store_true', help="normalize coordinates first")

    parser = ArgumentParser(prog='dentmesh', description="Boundary-preserving dental mesh processing")
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    p = sub.add_parser('simplify', parents=[common, mesh_input], help="simplify a mesh")
    p.add_argument('input')
    p.add_argument('output')
    p.add_argument('--method', choices=['qem', 'selective'], default='selective')
    p.add_argument('--target', type=int, help="target vertex count")
    p.add_argument('--target-faces', type=int, help="target triangle count")
    p.add_argument('--k-neg', type=float, help=f"weight of concave edges (default {CONFIG['K_NEG']})")
    p.add_argument('--k-pos', type=float, help=f"weight of other edges (default {CONFIG['K_POS']})")
    p.add_argument('--refresh-interval', type=int, help="collapses between curvature refreshes")
    p.add_argument('--stats', help="stats JSON path (default <output>.stats.json)")
    p.add_argument('--k', type=int, default=CONFIG['BOUNDARY_K'])
    p.add_argument('--m', type=int, default=CONFIG['DENSITY_M'])
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser('curvature', parents=[common, mesh_input], help="mean curvature colormap")
    p.add_argument('input')
    p.add_argument('output', help="colored PLY")
    p.add_argument('--summary', help="summary JSON path (default <output>.curvature.json)")
    p.set_defaults(func=cmd_curvature)

    p = sub.add_parser('boundary', parents=[common, mesh_input], help="boundary points and density")
    p.add_argument('input')
    p.add_argument('output', help="density report JSON")
    p.add_argument('--k', type=int, default=CONFIG['BOUNDARY_K'])
    p.add_argument('--m', type=int, default=CONFIG['DENSITY_M'])
    p.add_argument('--ply', help="point cloud with boundary points in red")
    p.add_argument('--mask', help="per-point binary boundary mask JSON")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser('render', parents=[common, threaded, mesh_input], help="render the hemisphere views")
    p.add_argument('input')
    p.add_argument('output', help="output directory")
    p.add_argument('--views', type=int, help=f"view count preset: {sorted(CONFIG['VIEW_PRESETS'])}")
    p.add_argument('--n-lat', type=int)
    p.add_argument('--n-lon', type=int)
    p.add_argument('--fov', type=float, default=CONFIG['FOV_DEGREES'], help="degrees")
    p.add_argument('--resolution', type=int, default=CONFIG['RESOLUTION'])
    p.add_argument('--light-intensity', type=float, default=CONFIG['LIGHT_INTENSITY'])
    p.add_argument('--radius', type=float, default=CONFIG['RIG_RADIUS'], help="multiple of the bbox diagonal")
    p.add_argument('--no-align', action='store_true', help="render the mesh as given")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('project', parents=[common], help="project points into rendered views")
    p.add_argument('input', help="point cloud or mesh in the frame of the views (aligned.ply)")
    p.add_argument('views_dir')
    p.add_argument('output', help="output directory")
    p.add_argument('--depth-epsilon', type=float, help="absolute depth tolerance (default: a fraction of the depth range)")
    p.add_argument('--footprint-slack', type=float, default=CONFIG['FOOTPRINT_SLACK'],
                   help="extra depth tolerance in pixel footprints; 0 for a plain epsilon test")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser('fuse', parents=[common, threaded], help="fuse per-view class scores onto points")
    p.add_argument('input', help="the rendered mesh (aligned.ply)")
    p.add_argument('views_dir')
    p.add_argument('output', help="output directory")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--scores', help="directory of view_XXX.npy score maps")
    source.add_argument('--oracle', action='store_true', help="score maps rendered from the input labels")
    p.add_argument('--softmax', action='store_true', help="softmax scores before averaging")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser('evaluate', parents=[common], help="IoU report")
    p.add_argument('pred', help="predicted labels (.labels.json or labeled mesh)")
    p.add_argument('gt', help="ground truth labels (.labels.json or labeled mesh)")
    p.add_argument('output', help="report JSON")
    p.add_argument('--cloud', help="point cloud for boundary IoU (default: the ground truth mesh)")
    p.add_argument('--k', type=int, default=CONFIG['BOUNDARY_K'])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('augment', parents=[common], help="seeded rigid augmentation")
    p.add_argument('input')
    p.add_argument('output', help="augmented PLY, metadata goes to <output>.aug.json")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--translation-range', type=float, default=CONFIG['TRANSLATION_RANGE'])
    p.add_argument('--rotation-sigma', type=float, default=CONFIG['ROTATION_SIGMA'])
    p.add_argument('--rotation-unit', choices=['radians', 'degrees'], default='radians')
    p.add_argument('--rotation-axes', default='Z', help="any of X, Y, Z, e.g. XYZ")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser('pipeline', parents=[common], help="run a pipeline config")
    p.add_argument('config')
    p.add_argument('--output')
    p.add_argument('--seed', type=int)
    p.add_argument('--threads', type=int, help="worker threads (overrides the config)")
    p.add_argument('--ce-sum', action='store_true', help="sum cross entropy over items instead of averaging")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser('demo', parents=[common], help="write a synthetic fixture mesh")
    p.add_argument('output')
    p.add_argument('--fixture', choices=['crown_on_slab', 'icosphere', 'plane', 'bowtie'], default='crown_on_slab')
    p.add_argument('--crowns', type=int, default=4)
    p.add_argument('--nx', type=int, default=320)
    p.add_argument('--ny', type=int, default=160)
    p.add_argument('--label-jitter', type=float, default=1.5, help="crown label edge roughness in grid spacings")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--subdivisions', type=int, default=3)
    p.add_argument('--radius', type=float, default=1.0)
    p.add_argument('--n', type=int, default=32, help="grid size of the plane and bowtie fixtures")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(default_level=getattr(logging, args.log_level), to_file=args.log_file)
    try:
        return args.func(args)
    except DentmeshException as e:
        logger.debug("Command failed", exc_info=True)
        report_error(type(e).__name__, str(e))
        return EXIT_USAGE if e.usage else EXIT_FAILURE
    except OSError as e:
        report_error(type(e).__name__, str(e))
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
