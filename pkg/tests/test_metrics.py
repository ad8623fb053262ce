# Tests for image quality and localization metrics
import sys
import unittest
from pathlib import Path

import numpy as np
import torch

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.data.masks import Mask
from src.utils.helpers import MetricError
from src.utils.metrics import PSNR_CAP, UNWATERMARKED, WATERMARKED, iou, psnr, ssim, to_uint8


class TestPSNR(unittest.TestCase):

    def test_identical_images_hit_the_cap(self):
        img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
        self.assertEqual(psnr(img, img.copy()), PSNR_CAP)

    def test_black_against_white(self):
        black = np.zeros((16, 16, 3), dtype=np.uint8)
        white = np.full((16, 16, 3), 255, dtype=np.uint8)
        self.assertAlmostEqual(psnr(black, white), 0.0)

    def test_one_level_error(self):
        a = np.full((16, 16, 3), 100, dtype=np.uint8)
        b = np.full((16, 16, 3), 101, dtype=np.uint8)
        self.assertAlmostEqual(psnr(a, b), 20 * np.log10(255), places=6)

    def test_tensors_are_quantized(self):
        img = torch.zeros(3, 16, 16)
        self.assertEqual(psnr(img, img.clone()), PSNR_CAP)
        self.assertEqual(to_uint8(img).shape, (16, 16, 3))

    def test_shape_mismatch(self):
        with self.assertRaises(MetricError):
            psnr(np.zeros((16, 16, 3), np.uint8), np.zeros((16, 8, 3), np.uint8))


class TestSSIM(unittest.TestCase):

    def setUp(self):
        self.img = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)

    def test_identical_images(self):
        self.assertAlmostEqual(ssim(self.img, self.img.copy()), 1.0, places=6)

    def test_negative_image_is_anticorrelated(self):
        self.assertLess(ssim(self.img, 255 - self.img), 0.0)

    def test_window_larger_than_image(self):
        small = np.zeros((8, 8, 3), dtype=np.uint8)
        with self.assertRaises(MetricError):
            ssim(small, small)


class TestIoU(unittest.TestCase):

    def test_both_empty(self):
        self.assertEqual(iou(torch.zeros(4, 4), torch.zeros(4, 4)), 1.0)

    def test_identical(self):
        mask = torch.zeros(4, 4)
        mask[1:3, 1:3] = 1
        self.assertEqual(iou(mask, mask.clone()), 1.0)

    def test_disjoint(self):
        a = torch.zeros(4, 4)
        b = torch.zeros(4, 4)
        a[0, 0] = 1
        b[3, 3] = 1
        self.assertEqual(iou(a, b), 0.0)

    def test_partial_overlap(self):
        pred = torch.zeros(4, 4)
        gt = torch.zeros(4, 4)
        pred[0, 0:2] = 1
        gt[0, 0] = 1
        self.assertAlmostEqual(iou(Mask(pred), Mask(gt)), 0.5)

    def test_unwatermarked_class(self):
        full = torch.ones(4, 4)
        self.assertEqual(iou(full, full, UNWATERMARKED), 1.0)
        half = torch.zeros(4, 4)
        half[:2] = 1
        self.assertEqual(iou(half, full, UNWATERMARKED), 0.0)
        self.assertEqual(iou(half, full, WATERMARKED), 0.5)

    def test_rejects_soft_masks(self):
        with self.assertRaises(MetricError):
            iou(torch.full((4, 4), 0.5), torch.zeros(4, 4))

    def test_rejects_unknown_class(self):
        with self.assertRaises(ValueError):
            iou(torch.zeros(4, 4), torch.zeros(4, 4), positive_class="both")


if __name__ == '__main__':
    unittest.main()
