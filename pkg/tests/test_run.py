import contextlib
import io
import json

import numpy as np

from dentmesh import NUM_CLASSES
from dentmesh.io import load_mesh, read_labels, write_labels, load_pointcloud
from dentmesh.metrics import class_name
from dentmesh.run import main, EXIT_OK, EXIT_FAILURE, EXIT_USAGE
from dentmesh.util import read_json
from tests import DentmeshTest


class CommandTest(DentmeshTest):
    def run_command(self, *argv):
        """Runs the command line frontend and returns (exit code, parsed JSON error line or None)"""
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            try:
                code = main([str(a) for a in argv] + ['--log-level', 'WARNING'])
            except SystemExit as e:
                code = e.code
        lines = [line for line in stderr.getvalue().splitlines() if line.startswith('{')]
        return code, json.loads(lines[-1]) if lines else None

    def demo_mesh(self, name='demo.ply', *options):
        path = self.tmp / name
        code, _ = self.run_command('demo', path, *options)
        self.assertEqual(EXIT_OK, code)
        return path


class TestCommands(CommandTest):
    def test_simplify(self):
        source = self.demo_mesh('demo.ply', '--nx', 48, '--ny', 24)
        output = self.tmp / 'simplified.ply'
        code, error = self.run_command('simplify', source, output, '--target', 300)
        self.assertEqual(EXIT_OK, code, error)
        self.assertEqual(300, load_mesh(output).vertex_count)
        stats = read_json(self.tmp / 'simplified.stats.json')
        for key in ('vertices_before', 'vertices_after', 'triangles_before', 'triangles_after', 'runtime_seconds',
                    'boundary_avg_distance_before', 'boundary_avg_distance_after', 'collapses'):
            self.assertIn(key, stats)
        self.assertEqual(48 * 24, stats['vertices_before'])
        self.assertEqual('selective', stats['method'])
        self.assertEqual(10.0, stats['k_neg'])

    def test_qem_rejects_weights(self):
        source = self.demo_mesh('plane.ply', '--fixture', 'plane', '--n', 8)
        code, error = self.run_command('simplify', source, self.tmp / 'out.ply', '--method', 'qem', '--k-neg', 5,
                                       '--target', 20)
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('ConfigError', error['error'])
        self.assertFalse((self.tmp / 'out.ply').exists())

    def test_usage_errors(self):
        source = self.demo_mesh('plane.ply', '--fixture', 'plane', '--n', 8)
        code, error = self.run_command('simplify', source, self.tmp / 'out.ply', '--target', 65)
        self.assertEqual(EXIT_USAGE, code)
        code, error = self.run_command('simplify', self.tmp / 'missing.ply', self.tmp / 'out.ply', '--target', 10)
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('ParseError', error['error'])
        code, error = self.run_command('simplify', source)
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('UsageError', error['error'])
        code, _ = self.run_command('render', source, self.tmp / 'views', '--views', 50)
        self.assertEqual(EXIT_USAGE, code)

    def test_runtime_failure(self):
        source = self.demo_mesh('plane.ply', '--fixture', 'plane', '--n', 8)
        code, error = self.run_command('boundary', source, self.tmp / 'density.json')
        self.assertEqual(EXIT_FAILURE, code)
        self.assertEqual('MissingLabels', error['error'])

    def test_curvature_and_boundary(self):
        source = self.demo_mesh('demo.ply', '--nx', 48, '--ny', 24)
        code, _ = self.run_command('curvature', source, self.tmp / 'curvature.ply')
        self.assertEqual(EXIT_OK, code)
        summary = read_json(self.tmp / 'curvature.curvature.json')
        self.assertLess(summary['min'], 0)
        self.assertGreater(summary['max'], 0)
        code, _ = self.run_command('boundary', source, self.tmp / 'density.json', '--ply', self.tmp / 'boundary.ply',
                                   '--mask', self.tmp / 'mask.json', '--normalize')
        self.assertEqual(EXIT_OK, code)
        report = read_json(self.tmp / 'density.json')
        self.assertEqual('normalized', report['units'])
        self.assertEqual(4, report['m'])
        self.assertEqual(report['boundary_count'], sum(read_json(self.tmp / 'mask.json')['mask']))

    def test_render_is_deterministic(self):
        source = self.demo_mesh('demo.ply', '--nx', 48, '--ny', 24)
        for name in ('a', 'b'):
            code, _ = self.run_command('render', source, self.tmp / name, '--n-lat', 1, '--n-lon', 3,
                                       '--resolution', 48, '--threads', 2)
            self.assertEqual(EXIT_OK, code)
        for name in ('view_000.png', 'view_002.geom', 'rig.json', 'aligned.ply', 'alignment.json'):
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes(), name)

    def test_render_project_fuse_evaluate(self):
        source = self.demo_mesh('demo.ply', '--nx', 48, '--ny', 24)
        views = self.tmp / 'views'
        self.assertEqual(EXIT_OK, self.run_command('render', source, views, '--n-lat', 2, '--n-lon', 4,
                                                   '--resolution', 128)[0])
        aligned = views / 'aligned.ply'
        self.assertEqual(EXIT_OK, self.run_command('project', aligned, views, self.tmp / 'projection')[0])
        projection = read_json(self.tmp / 'projection' / 'projection_000.json')
        self.assertEqual(48 * 24, len(projection['points']))
        self.assertGreater(read_json(self.tmp / 'projection' / 'coverage.json')['coverage'], 0.9)
        self.assertEqual(EXIT_OK, self.run_command('project', aligned, views, self.tmp / 'strict',
                                                   '--footprint-slack', 0)[0])
        strict = read_json(self.tmp / 'strict' / 'coverage.json')['visible_per_view']
        default = read_json(self.tmp / 'projection' / 'coverage.json')['visible_per_view']
        self.assertTrue(all(s <= d for s, d in zip(strict, default)))

        self.assertEqual(EXIT_OK, self.run_command('fuse', aligned, views, self.tmp / 'fused', '--oracle')[0])
        header = read_json(self.tmp / 'fused' / 'features.bin.json')
        self.assertEqual(6 + NUM_CLASSES, header['width'])
        predicted = read_labels(self.tmp / 'fused' / 'predicted.labels.json')
        self.assertEqual(48 * 24, len(predicted))

        code, _ = self.run_command('evaluate', self.tmp / 'fused' / 'predicted.labels.json', aligned,
                                   self.tmp / 'report.json', '--cloud', aligned)
        self.assertEqual(EXIT_OK, code)
        report = read_json(self.tmp / 'report.json')
        self.assertEqual(NUM_CLASSES + 2, len(report))
        self.assertGreater(report['miou'], 0.8)
        self.assertIsNone(report['iou_T5'])

    def test_evaluate_defaults_to_the_ground_truth_cloud(self):
        source = self.demo_mesh('demo.ply', '--nx', 32, '--ny', 16)
        code, error = self.run_command('evaluate', source, source, self.tmp / 'report.json')
        self.assertEqual(EXIT_OK, code, error)
        report = read_json(self.tmp / 'report.json')
        expected = {f"iou_{class_name(c)}" for c in range(NUM_CLASSES)} | {'miou', 'boundary_iou'}
        self.assertEqual(expected, set(report))
        self.assertEqual(1.0, report['miou'])
        self.assertEqual(1.0, report['boundary_iou'])

        labels = self.tmp / 'gt.labels.json'
        write_labels(labels, load_mesh(source).vertex_labels)
        code, _ = self.run_command('evaluate', source, labels, self.tmp / 'other.json')
        self.assertEqual(EXIT_USAGE, code)
        code, _ = self.run_command('evaluate', source, labels, self.tmp / 'other.json', '--cloud', source)
        self.assertEqual(EXIT_OK, code)
        self.assertEqual(report, read_json(self.tmp / 'other.json'))

    def test_fuse_needs_a_score_source(self):
        code, error = self.run_command('fuse', self.tmp / 'a.ply', self.tmp, self.tmp / 'fused')
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('UsageError', error['error'])

    def test_augment(self):
        source = self.demo_mesh('demo.ply', '--nx', 32, '--ny', 16)
        output = self.tmp / 'augmented.ply'
        code, _ = self.run_command('augment', source, output, '--seed', 3, '--rotation-axes', 'xz')
        self.assertEqual(EXIT_OK, code)
        metadata = read_json(self.tmp / 'augmented.aug.json')
        self.assertEqual(['X', 'Z'], metadata['rotation_axes'])
        self.assertEqual(32 * 16, load_pointcloud(output).count)
        code, error = self.run_command('augment', source, output, '--rotation-axes', 'zz')
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('ConfigError', error['error'])


class TestPipelineCommand(CommandTest):
    def write_config(self, **overrides):
        config = {
            'demo': {'n_crowns': 4, 'nx': 64, 'ny': 32},
            'output': 'out',
            'seed': 5,
            'simplify': {'method': 'selective', 'target_fraction': 0.5},
            'render': {'n_lat': 3, 'n_lon': 8, 'resolution': 192},
            'fuse': {'oracle': True},
            'evaluate': {'losses': True},
            'augment': {'rotation_axes': ['Z']},
        }
        config.update(overrides)
        path = self.tmp / 'pipeline.json'
        path.write_text(json.dumps(config))
        return path

    def test_demo_pipeline(self):
        path = self.write_config()
        for name in ('first', 'second'):
            code, error = self.run_command('pipeline', path, '--output', self.tmp / name, '--threads', 2)
            self.assertEqual(EXIT_OK, code, error)
        first = read_json(self.tmp / 'first' / 'manifest.json')
        self.assertEqual(first, read_json(self.tmp / 'second' / 'manifest.json'))
        self.assertEqual('complete', first['status'])
        self.assertEqual(5, first['seed'])
        stages = [entry['stage'] for entry in first['artifacts']]
        self.assertEqual(['load', 'align', 'simplify', 'render', 'project', 'fuse', 'evaluate', 'augment'],
                         list(dict.fromkeys(stages)))
        report = read_json(self.tmp / 'first' / 'report.json')
        self.assertGreaterEqual(report['miou'], 0.95)
        losses = report['losses']
        self.assertAlmostEqual(losses['total'], losses['ce_image'] + losses['ce_point'] + losses['cbl'])
        stats = read_json(self.tmp / 'first' / 'simplify.json')
        self.assertEqual(1024, stats['vertices_after'])
        self.assertEqual(5, read_json(self.tmp / 'first' / 'augmented.aug.json')['seed'])

    def test_missing_input_fails_before_any_stage(self):
        path = self.write_config(demo=None, input='missing.ply')
        code, error = self.run_command('pipeline', path)
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('ConfigError', error['error'])
        self.assertFalse((self.tmp / 'out').exists())

    def test_invalid_config(self):
        path = self.write_config(simplify={'method': 'qem', 'k_neg': 4})
        self.assertEqual(EXIT_USAGE, self.run_command('pipeline', path)[0])
        path = self.write_config(render={'n_lat': 0})
        self.assertEqual(EXIT_USAGE, self.run_command('pipeline', path)[0])

    def test_failed_stage_is_recorded(self):
        (self.tmp / 'scores').mkdir()
        path = self.write_config(fuse={'oracle': False, 'scores_dir': 'scores'},
                                 render={'n_lat': 1, 'n_lon': 2, 'resolution': 32})
        code, error = self.run_command('pipeline', path)
        self.assertEqual(EXIT_USAGE, code)
        self.assertEqual('ParseError', error['error'])
        manifest = read_json(self.tmp / 'out' / 'manifest.json')
        self.assertEqual('failed', manifest['status'])
        self.assertEqual('fuse', manifest['failed_stage'])
        self.assertFalse((self.tmp / 'out' / 'features.bin').exists())

    def test_nonmanifold_input(self):
        source = self.demo_mesh('bowtie.ply', '--fixture', 'bowtie', '--n', 12)
        path = self.write_config(demo=None, input='bowtie.ply', simplify={'target_fraction': 0.8},
                                 render={'n_lat': 1, 'n_lon': 4, 'resolution': 64}, evaluate={'losses': False})
        code, error = self.run_command('pipeline', path)
        self.assertEqual(EXIT_OK, code, error)
        stats = read_json(self.tmp / 'out' / 'input_stats.json')
        self.assertEqual(0, stats['nonmanifold_edge_count'])
        self.assertGreater(stats['vertex_count'], load_mesh(source).vertex_count)
        predicted = read_labels(self.tmp / 'out' / 'predicted.labels.json')
        self.assertTrue(set(np.unique(predicted).tolist()) <= {0, 1})

    def test_cross_entropy_sum(self):
        path = self.write_config(render={'n_lat': 1, 'n_lon': 4, 'resolution': 64}, augment=None)
        self.assertEqual(EXIT_OK, self.run_command('pipeline', path, '--output', self.tmp / 'mean')[0])
        self.assertEqual(EXIT_OK, self.run_command('pipeline', path, '--output', self.tmp / 'sum', '--ce-sum')[0])
        mean = read_json(self.tmp / 'mean' / 'report.json')['losses']
        summed = read_json(self.tmp / 'sum' / 'report.json')['losses']
        self.assertGreaterEqual(summed['ce_point'], mean['ce_point'])
        self.assertGreaterEqual(summed['ce_image'], mean['ce_image'])
        self.assertEqual(mean['cbl'], summed['cbl'])
