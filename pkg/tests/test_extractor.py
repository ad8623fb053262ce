# Tests for the dual-head watermark decoder
import sys
import unittest
from pathlib import Path

import torch

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.data.masks import Mask
from src.models.extractor import WatermarkDecoder, binarize_mask, extract_bits, predict_mask
from src.models.layers import NestedUNet, UNet


class TestWatermarkDecoder(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.decoder = WatermarkDecoder(
            4, feature_channels=4, codec_blocks=1, extractor_depth=2, extractor_channels=4,
            localizer_channels=4, localizer_mid_channels=2, localizer_stages=2, localizer_height=3,
        ).eval()
        self.images = torch.rand(2, 3, 16, 16) * 2 - 1

    def test_soft_mask_range(self):
        soft = self.decoder.predict_mask(self.images)
        self.assertEqual(tuple(soft.shape), (2, 1, 16, 16))
        self.assertGreaterEqual(float(soft.min()), 0.0)
        self.assertLessEqual(float(soft.max()), 1.0)

    def test_bit_logits_shape(self):
        self.assertEqual(tuple(self.decoder.extract_bits(self.images).shape), (2, 4))

    def test_forward_returns_both_heads(self):
        soft, logits = self.decoder(self.images, self.images * 0)
        self.assertEqual(tuple(soft.shape), (2, 1, 16, 16))
        self.assertEqual(tuple(logits.shape), (2, 4))

    def test_heads_share_no_weights(self):
        localizer = {id(p) for p in self.decoder.localizer.parameters()}
        extractor = {id(p) for p in self.decoder.extractor.parameters()}
        self.assertFalse(localizer & extractor)

    def test_single_image_helpers(self):
        self.assertEqual(tuple(predict_mask(self.images[0], self.decoder).shape), (1, 16, 16))
        self.assertEqual(tuple(extract_bits(self.images[0], self.decoder).shape), (4,))

    def test_bad_input_shape(self):
        with self.assertRaises(ValueError):
            self.decoder.predict_mask(self.images[0])
        with self.assertRaises(ValueError):
            self.decoder.extract_bits(torch.zeros(1, 1, 16, 16))


class TestBinarize(unittest.TestCase):

    def test_threshold_is_strict(self):
        hard = binarize_mask(torch.tensor([0.2, 0.5, 0.51, 0.9]))
        self.assertEqual(hard.tolist(), [0.0, 0.0, 1.0, 1.0])

    def test_mask_in_mask_out(self):
        hard = binarize_mask(Mask(torch.full((4, 4), 0.7)), threshold=0.6)
        self.assertIsInstance(hard, Mask)
        self.assertTrue(hard.is_binary)
        self.assertEqual(hard.area_ratio(), 1.0)


class TestLayers(unittest.TestCase):

    def test_unet_shape(self):
        net = UNet(3, 5, depth=2, base_channels=4)
        self.assertEqual(tuple(net(torch.zeros(1, 3, 16, 16)).shape), (1, 5, 16, 16))

    def test_unet_rejects_indivisible_size(self):
        with self.assertRaises(ValueError):
            UNet(3, 5, depth=2, base_channels=4)(torch.zeros(1, 3, 18, 18))

    def test_nested_unet_odd_size(self):
        net = NestedUNet(3, 1, stages=2, height=3, mid_ch=2, channels=4).eval()
        self.assertEqual(tuple(net(torch.zeros(1, 3, 15, 21)).shape), (1, 1, 15, 21))


if __name__ == '__main__':
    unittest.main()
