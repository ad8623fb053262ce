# Tests for evaluation sets, protocols and reports
import json
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.models.evaluator import (
    EvalBucket, EvalReport, ModelEvaluator, build_local_eval_set, cached_local_eval_set, greedy_match, quantize,
)
from src.models.predictor import WatermarkPredictor
from src.models.watermark_model import WatermarkModel
from src.utils.helpers import MaskGenerationError
from tests.fixtures import tiny_model_config

BUCKETS = [(0.1, 0.2), (0.8, 0.9)]


def _images(count=2, size=16):
    torch.manual_seed(0)
    return [torch.rand(3, size, size) * 2 - 1 for _ in range(count)]


def _evaluator(variant='D'):
    torch.manual_seed(0)
    predictor = WatermarkPredictor(WatermarkModel(tiny_model_config(variant)), device="cpu")
    return ModelEvaluator(predictor, _images(), seed=0, config_digest="cfg")


class TestLocalEvalSet(unittest.TestCase):

    def test_buckets_are_filled_with_mirrors(self):
        eval_set = build_local_eval_set([0, 1], 'rectangle', BUCKETS, 4, np.random.default_rng(0), 32)
        self.assertEqual([len(b.samples) for b in eval_set], [4, 4])
        for bucket in eval_set:
            for sample in bucket.samples:
                self.assertTrue(bucket.contains(sample.mask.area_ratio()))
            self.assertEqual(sum(s.inverted for s in bucket.samples), 2)

    def test_bucket_bounds_are_exclusive(self):
        bucket = EvalBucket((0.1, 0.2))
        self.assertTrue(bucket.contains(0.15))
        self.assertFalse(bucket.contains(0.1))
        self.assertFalse(bucket.contains(0.2))
        self.assertAlmostEqual(bucket.midpoint, 0.15)

    def test_same_seed_same_set(self):
        a = build_local_eval_set([0, 1], 'rectangle', BUCKETS, 2, np.random.default_rng(5), 32)
        b = build_local_eval_set([0, 1], 'rectangle', BUCKETS, 2, np.random.default_rng(5), 32)
        for bucket_a, bucket_b in zip(a, b):
            for sa, sb in zip(bucket_a.samples, bucket_b.samples):
                self.assertEqual(sa.image_id, sb.image_id)
                self.assertTrue(torch.equal(sa.mask.data, sb.mask.data))

    def test_odd_per_bucket(self):
        with self.assertRaises(ValueError):
            build_local_eval_set([0], 'rectangle', BUCKETS, 3, np.random.default_rng(0), 32)

    def test_bucket_without_mirror(self):
        with self.assertRaises(ValueError):
            build_local_eval_set([0], 'rectangle', [(0.1, 0.2)], 2, np.random.default_rng(0), 32)

    def test_starvation_is_reported(self):
        buckets = [(0.001, 0.002), (0.998, 0.999)]
        with self.assertRaisesRegex(MaskGenerationError, "bucket starvation"):
            build_local_eval_set([0], 'irregular', buckets, 2, np.random.default_rng(0), 32, max_attempts=2)

    def test_unknown_mask_source(self):
        with self.assertRaises(ValueError):
            build_local_eval_set([0], 'stars', BUCKETS, 2, np.random.default_rng(0), 32)


class TestEvalSetCache(unittest.TestCase):

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_second_call_reads_cache(self):
        first = cached_local_eval_set([0, 1], 'rectangle', BUCKETS, 2, 3, 32, cache_dir=self.temp_dir)
        self.assertEqual(len(list(self.temp_dir.glob("evalset_*.joblib"))), 1)
        second = cached_local_eval_set([0, 1], 'rectangle', BUCKETS, 2, 3, 32, cache_dir=self.temp_dir)
        self.assertEqual([s.mask.area_ratio() for s in first[0].samples],
                         [s.mask.area_ratio() for s in second[0].samples])


class TestHelpers(unittest.TestCase):

    def test_greedy_match(self):
        a = torch.zeros(4, 4)
        b = torch.zeros(4, 4)
        a[:2] = 1
        b[2:] = 1
        self.assertEqual(greedy_match([a, b], [b, a]), {0: 1, 1: 0})
        self.assertEqual(greedy_match([a], [b]), {})
        self.assertEqual(greedy_match([], [a]), {})

    def test_quantize_lands_on_8bit_grid(self):
        img = torch.rand(3, 8, 8) * 2 - 1
        levels = (quantize(img) + 1) * 127.5
        self.assertTrue(torch.allclose(levels, levels.round(), atol=1e-4))


class TestEvalReport(unittest.TestCase):

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        rows = []
        for i, (lo, hi) in enumerate([(0.1, 0.2), (0.2, 0.3), (0.3, 0.4)]):
            for j in range(2):
                rows.append({'sample_id': 2 * i + j, 'distortion': 'none', 'bucket_lo': lo, 'bucket_hi': hi,
                             'bit_accuracy': 0.5 + 0.2 * i, 'psnr': 40.0, 'ssim': 0.98, 'error': None})
        rows.append({'sample_id': 6, 'distortion': 'none', 'bucket_lo': 0.1, 'bucket_hi': 0.2,
                     'error': 'no watermark region detected'})
        self.report = EvalReport(rows, {'checkpoint_id': 'ck', 'config_digest': 'cfg', 'seed': 0})

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_summary_skips_failures(self):
        summary = self.report.summary()
        self.assertEqual(list(summary['samples']), [2, 2, 2])
        self.assertAlmostEqual(summary['bit_accuracy'].iloc[0], 0.5)
        self.assertEqual(len(self.report.failures), 1)

    def test_ratio_trend(self):
        self.assertAlmostEqual(self.report.ratio_trend()['none'], 1.0)

    def test_provenance_digest(self):
        self.assertIn('digest', self.report.provenance)
        self.assertEqual(len(self.report.provenance['digest']), 64)

    def test_save(self):
        paths = self.report.save(self.temp_dir, prefix="local")
        for path in paths.values():
            self.assertTrue(path.exists())
        data = json.loads(paths['json'].read_text())
        self.assertEqual(data['failures'], 1)
        self.assertAlmostEqual(data['quality']['psnr'], 40.0)


class TestModelEvaluator(unittest.TestCase):

    def setUp(self):
        self.eval_set = build_local_eval_set([0, 1], 'rectangle', BUCKETS, 2, np.random.default_rng(0), 16)

    def test_robustness_rows(self):
        report = _evaluator('D').evaluate_robustness(self.eval_set, suites=('none', 'valuemetric'))
        self.assertEqual(len(report.rows), 4 * 2)
        self.assertEqual(len(report.failures), 0)
        self.assertTrue(set(report.rows['suite']) == {'none', 'valuemetric'})
        for column in ('bit_accuracy', 'iou_watermarked', 'iou_unwatermarked', 'psnr', 'ssim'):
            self.assertIn(column, report.rows)
        self.assertEqual(report.provenance['config_digest'], 'cfg')

    def test_per_distortion_suite(self):
        evaluator = _evaluator('D')
        report = evaluator.evaluate_robustness(self.eval_set[:1], suites=('per-distortion',))
        expected = len(evaluator.valuemetric) + len(evaluator.geometric)
        self.assertEqual(len(report.rows), 2 * expected)

    def test_unknown_suite(self):
        with self.assertRaises(ValueError):
            _evaluator('D').evaluate_robustness(self.eval_set, suites=('weather',))

    def test_masking_strategies(self):
        report = _evaluator('ED').evaluate_masking_strategies(self.eval_set, area_range=(0.1, 0.2))
        self.assertEqual(set(report.rows['strategy']), {'full', 'predicted', 'ground_truth'})
        self.assertEqual(len(report.rows), 3 * 2)
        with self.assertRaises(ValueError):
            _evaluator('ED').evaluate_masking_strategies(self.eval_set, area_range=(0.5, 0.6))

    def test_multi_watermark(self):
        report = _evaluator('ED').evaluate_multi_watermark([0, 1], n_range=(1, 2), area_frac=0.05)
        self.assertEqual(len(report.rows), 2 * (1 + 2))
        self.assertEqual(set(report.rows['n']), {1, 2})
        self.assertTrue(((report.rows['bit_accuracy'] >= 0) & (report.rows['bit_accuracy'] <= 1)).all())

    def test_global_protocol_rows(self):
        report = _evaluator('D').evaluate_global([0, 1], suites=('none', 'geometric'))
        self.assertEqual(report.kind, 'global')
        self.assertEqual(len(report.rows), 2 * 2)
        self.assertEqual(len(report.failures), 0)
        self.assertTrue((report.rows['area_ratio'] == 1.0).all())
        summary = report.summary()
        self.assertEqual(list(summary['suite']), ['geometric', 'none'])
        self.assertEqual(list(summary['samples']), [2, 2])
        quality = report.global_quality()
        self.assertGreater(quality['psnr'], 0.0)
        self.assertLessEqual(quality['ssim'], 1.0)

    def test_global_protocol_on_ed_model(self):
        report = _evaluator('ED').evaluate_global([0])
        self.assertEqual(list(report.rows['distortion']), ['none'])
        self.assertTrue(0.0 <= report.rows['bit_accuracy'].iloc[0] <= 1.0)

    def test_global_protocol_above_native_resolution(self):
        evaluator = _evaluator('D')
        report = evaluator.evaluate_global([0, 1], scale=2)
        self.assertEqual(len(report.failures), 0)
        self.assertEqual(set(report.rows['scale']), {2})
        self.assertTrue(((report.rows['bit_accuracy'] >= 0) & (report.rows['bit_accuracy'] <= 1)).all())
        with self.assertRaises(ValueError):
            evaluator.evaluate_global([0], scale=0.5)

    def test_global_protocol_is_reproducible(self):
        a = _evaluator('D').evaluate_global([0, 1], suites=('none', 'valuemetric'))
        b = _evaluator('D').evaluate_global([0, 1], suites=('none', 'valuemetric'))
        self.assertTrue(a.rows.equals(b.rows))
        self.assertEqual(a.provenance['digest'], b.provenance['digest'])

    def test_calibration_threshold_covers_clean_noise(self):
        evaluator = _evaluator('ED')
        report = evaluator.calibrate([0, 1], percentile=100)
        self.assertEqual(report.kind, 'calibration')
        self.assertEqual(len(report.rows), 2)
        threshold = evaluator.calibration['confidence_threshold']
        self.assertEqual(report.provenance['calibration']['confidence_threshold'], threshold)

        for image in evaluator.images:
            result = evaluator.predictor.locate_and_extract(image, raise_on_empty=False)
            self.assertTrue(not result.detected or result.mean_mask_confidence <= threshold)
            self.assertEqual(evaluator.above_calibration(result), 0.0)

    def test_robustness_rows_carry_calibration(self):
        evaluator = _evaluator('D')
        evaluator.calibrate([0, 1])
        report = evaluator.evaluate_robustness(self.eval_set)
        self.assertIn('above_calibration', report.rows)
        self.assertIn('calibration', report.to_dict()['provenance'])

    def test_calibration_arguments(self):
        evaluator = _evaluator('D')
        with self.assertRaises(ValueError):
            evaluator.above_calibration(None)
        with self.assertRaises(ValueError):
            evaluator.calibrate([0], percentile=101)
        with self.assertRaises(ValueError):
            evaluator.calibrate([])

    def test_multi_watermark_requires_ed(self):
        with self.assertRaises(ValueError):
            _evaluator('D').evaluate_multi_watermark([0], n_range=(1, 1))


if __name__ == '__main__':
    unittest.main()
