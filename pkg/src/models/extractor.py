"""Dual-head watermark decoder: localization (nested U-Net) and bit extraction (U-Net + codec head)"""
import logging

import torch
import torch.nn as nn

from src.data.masks import Mask, MaskKind
from src.models.codec import MessageDecoder, feature_to_logits
from src.models.layers import NestedUNet, UNet

logger = logging.getLogger(__name__)


class WatermarkDecoder(nn.Module):
    """Two heads that share no weights.

    ``localizer`` reads the (distorted) fused image and predicts the soft
    watermark mask; ``extractor`` + ``message_decoder`` read the isolated image
    and produce l bit logits.
    """

    def __init__(self, message_length, feature_channels=16, codec_blocks=3,
                 extractor_depth=4, extractor_channels=32,
                 localizer_channels=16, localizer_mid_channels=8,
                 localizer_stages=3, localizer_height=4):
        super().__init__()
        self.message_length = message_length
        self.localizer = NestedUNet(3, 1, stages=localizer_stages, height=localizer_height,
                                    mid_ch=localizer_mid_channels, channels=localizer_channels)
        self.extractor = UNet(3, feature_channels, depth=extractor_depth, base_channels=extractor_channels)
        self.message_decoder = MessageDecoder(message_length, feature_channels, codec_blocks)

    @staticmethod
    def _check_image(img):
        if img.dim() != 4 or img.shape[1] != 3:
            raise ValueError(f"expected a B×3×H×W image batch, got shape {tuple(img.shape)}")

    def mask_logits(self, img):
        self._check_image(img)
        return self.localizer(img)

    def predict_mask(self, img):
        """Soft mask B×1×H×W in [0, 1]"""
        return torch.sigmoid(self.mask_logits(img))

    def extract_bits(self, masked_img):
        """Bit logits B×l from an image whose non-watermark pixels are zeroed"""
        self._check_image(masked_img)
        return feature_to_logits(self.extractor(masked_img), self.message_decoder)

    def forward(self, fused, masked):
        return self.predict_mask(fused), self.extract_bits(masked)


def predict_mask(img, decoder):
    squeeze = img.dim() == 3
    out = decoder.predict_mask(img[None] if squeeze else img)
    return out[0] if squeeze else out


def extract_bits(masked_img, decoder):
    squeeze = masked_img.dim() == 3
    out = decoder.extract_bits(masked_img[None] if squeeze else masked_img)
    return out[0] if squeeze else out


def binarize_mask(soft, threshold=0.5):
    """Hard {0, 1} mask, 1 iff soft > threshold. Accepts a Mask or a tensor and returns the same kind."""
    if isinstance(soft, Mask):
        return Mask((soft.data > threshold).float(), MaskKind.COMPOSITE)
    return (soft > threshold).float()
