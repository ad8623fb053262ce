"""Watermark encoder and JND perceptual modulation"""
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F
from kornia.filters import spatial_gradient

from src.models.layers import UNet

logger = logging.getLogger(__name__)

# Luminance adaptation (Chou & Li style curve, 8-bit domain)
_LA_DARK_GAIN = 17.0
_LA_BRIGHT_SLOPE = 3.0 / 128.0
_LA_FLOOR = 3.0
# Texture masking gain applied to the Sobel gradient magnitude
_TEXTURE_GAIN = 0.5


class WatermarkEncoder(nn.Module):
    """U-Net over concat(image, feature[, mask]) producing I_enc.

    The U-Net predicts a residual added to the cover image, so a zeroed head
    yields I_enc = I_orig whatever the message or mask.
    """

    def __init__(self, feature_channels=16, input_mode='D', depth=4, base_channels=32):
        super().__init__()
        if input_mode not in ('D', 'ED'):
            raise ValueError(f"input_mode must be 'D' or 'ED', got {input_mode!r}")
        self.input_mode = input_mode
        self.feature_channels = feature_channels
        in_channels = 3 + feature_channels + (1 if input_mode == 'ED' else 0)
        self.unet = UNet(in_channels, 3, depth=depth, base_channels=base_channels)

    @property
    def in_channels(self):
        return 3 + self.feature_channels + (1 if self.input_mode == 'ED' else 0)

    def forward(self, image, features, mask=None):
        if self.input_mode == 'D' and mask is not None:
            raise ValueError("mask not accepted in D mode")
        if self.input_mode == 'ED' and mask is None:
            raise ValueError("mask required in ED mode")
        if features.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"feature map {tuple(features.shape[-2:])} does not match image {tuple(image.shape[-2:])}")
        if features.shape[0] != image.shape[0]:
            features = features.expand(image.shape[0], -1, -1, -1)

        parts = [image, features]
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None, None]
            if mask.shape[-2:] != image.shape[-2:]:
                raise ValueError(f"mask {tuple(mask.shape[-2:])} does not match image {tuple(image.shape[-2:])}")
            parts.append(mask.to(image.dtype).expand(image.shape[0], 1, -1, -1))
        return image + self.unet(torch.cat(parts, 1))


def encode(image, features, mask, encoder):
    return encoder(image, features, mask)


@torch.no_grad()
def jnd_map(image):
    """Per-pixel visibility budget for images in [-1, 1], shape B×1×H×W.

    max(luminance adaptation over a 5×5 local mean, texture masking from the
    Sobel gradient), rescaled to mean 1 per image. Never carries gradients.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    rgb = (image.detach().clamp(-1, 1) + 1.0) * 127.5
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=rgb.dtype, device=rgb.device).view(1, 3, 1, 1)
    luma = (rgb * weights).sum(1, keepdim=True)

    background = F.avg_pool2d(F.pad(luma, (2, 2, 2, 2), mode='replicate'), 5, stride=1)
    dark = _LA_DARK_GAIN * (1.0 - torch.sqrt(background.clamp(min=0) / 127.0)) + _LA_FLOOR
    bright = _LA_BRIGHT_SLOPE * (background - 127.0) + _LA_FLOOR
    luminance = torch.where(background <= 127.0, dark, bright)

    grad = spatial_gradient(luma, mode='sobel', normalized=True)
    texture = _TEXTURE_GAIN * torch.sqrt((grad ** 2).sum(2) + 1e-12)

    jnd = torch.maximum(luminance, texture)
    jnd = jnd / jnd.mean(dim=(1, 2, 3), keepdim=True).clamp(min=1e-8)
    return jnd[0] if squeeze else jnd


def apply_jnd_modulation(original, encoded, mu, jnd=None):
    """I_wm = clamp(I_orig + mu · JND(I_orig) · (I_enc − I_orig), −1, 1)"""
    if original.shape != encoded.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(encoded.shape)}")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if jnd is None:
        jnd = jnd_map(original)
    return (original + mu * jnd * (encoded - original)).clamp(-1.0, 1.0)
