# Tests for the watermark encoder and JND modulation
import sys
import unittest
from pathlib import Path

import torch

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.models.embedder import WatermarkEncoder, apply_jnd_modulation, jnd_map


class TestWatermarkEncoder(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.image = torch.rand(2, 3, 16, 16) - 0.5
        self.features = torch.randn(2, 4, 16, 16)

    def test_d_mode_output_shape(self):
        encoder = WatermarkEncoder(4, 'D', depth=2, base_channels=4)
        self.assertEqual(encoder(self.image, self.features).shape, self.image.shape)

    def test_d_mode_rejects_mask(self):
        encoder = WatermarkEncoder(4, 'D', depth=2, base_channels=4)
        with self.assertRaises(ValueError):
            encoder(self.image, self.features, torch.ones(2, 1, 16, 16))

    def test_ed_mode_requires_mask(self):
        encoder = WatermarkEncoder(4, 'ED', depth=2, base_channels=4)
        self.assertEqual(encoder.in_channels, 8)
        with self.assertRaises(ValueError):
            encoder(self.image, self.features)
        out = encoder(self.image, self.features, torch.ones(16, 16))
        self.assertEqual(out.shape, self.image.shape)

    def test_zero_head_returns_cover(self):
        encoder = WatermarkEncoder(4, 'D', depth=2, base_channels=4).eval()
        with torch.no_grad():
            encoder.unet.head.weight.zero_()
            encoder.unet.head.bias.zero_()
            out = encoder(self.image, self.features)
        self.assertTrue(torch.equal(out, self.image))

    def test_invalid_mode(self):
        with self.assertRaises(ValueError):
            WatermarkEncoder(4, 'X')


class TestJND(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(1)
        self.image = torch.rand(2, 3, 16, 16) * 2 - 1

    def test_map_shape_and_scale(self):
        jnd = jnd_map(self.image)
        self.assertEqual(tuple(jnd.shape), (2, 1, 16, 16))
        self.assertTrue(bool((jnd > 0).all()))
        for i in range(2):
            self.assertAlmostEqual(float(jnd[i].mean()), 1.0, places=4)

    def test_constant_gray_gives_constant_map(self):
        gray = torch.zeros(1, 3, 16, 16)
        jnd = jnd_map(gray)
        self.assertTrue(torch.allclose(jnd, torch.ones_like(jnd), atol=1e-5))

    def test_edges_score_above_flat_regions(self):
        edge = torch.full((1, 3, 16, 16), -0.6)
        edge[..., 8:] = 0.6
        jnd = jnd_map(edge)[0, 0]
        on_edge = jnd[:, 7:9]
        flat = torch.cat([jnd[:, :3], jnd[:, -3:]], dim=1)
        self.assertGreater(float(on_edge.min()), float(flat.max()))

    def test_map_is_non_negative(self):
        torch.manual_seed(3)
        images = torch.rand(100, 3, 16, 16) * 2 - 1
        self.assertTrue(bool((jnd_map(images) >= 0).all()))

    def test_map_carries_no_gradient(self):
        image = self.image.clone().requires_grad_(True)
        self.assertFalse(jnd_map(image).requires_grad)

    def test_single_image(self):
        self.assertEqual(tuple(jnd_map(self.image[0]).shape), (1, 16, 16))

    def test_zero_strength_returns_original(self):
        encoded = self.image + 0.1
        out = apply_jnd_modulation(self.image, encoded, 0.0)
        self.assertTrue(torch.allclose(out, self.image))

    def test_output_is_clamped(self):
        out = apply_jnd_modulation(self.image, self.image + 5.0, 2.0)
        self.assertLessEqual(float(out.max()), 1.0)
        self.assertGreaterEqual(float(out.min()), -1.0)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            apply_jnd_modulation(self.image, self.image[:1], 1.0)
        with self.assertRaises(ValueError):
            apply_jnd_modulation(self.image, self.image, -0.5)


if __name__ == '__main__':
    unittest.main()
