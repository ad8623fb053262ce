"""Composite watermarking model: message codec, encoder and dual-head decoder"""
import logging

import torch.nn as nn

from src.models.codec import MessageEncoder, message_to_feature
from src.models.embedder import WatermarkEncoder
from src.models.extractor import WatermarkDecoder

logger = logging.getLogger(__name__)


class WatermarkModel(nn.Module):
    """All trainable parameters of one MaskWM-D / MaskWM-ED model"""

    def __init__(self, model_cfg):
        super().__init__()
        self.config = model_cfg
        self.message_encoder = MessageEncoder(model_cfg.message_length, model_cfg.feature_channels,
                                              model_cfg.codec_blocks)
        self.encoder = WatermarkEncoder(model_cfg.feature_channels, model_cfg.variant,
                                        depth=model_cfg.encoder_depth,
                                        base_channels=model_cfg.encoder_channels)
        self.decoder = WatermarkDecoder(
            model_cfg.message_length,
            feature_channels=model_cfg.feature_channels,
            codec_blocks=model_cfg.codec_blocks,
            extractor_depth=model_cfg.extractor_depth,
            extractor_channels=model_cfg.extractor_channels,
            localizer_channels=model_cfg.localizer_channels,
            localizer_mid_channels=model_cfg.localizer_mid_channels,
            localizer_stages=model_cfg.localizer_stages,
            localizer_height=model_cfg.localizer_height,
        )
        n_params = sum(p.numel() for p in self.parameters())
        logger.debug("Built %s model (l=%d, %d parameters)", model_cfg.variant, model_cfg.message_length, n_params)

    @property
    def variant(self):
        return self.config.variant

    @property
    def message_length(self):
        return self.config.message_length

    @property
    def image_size(self):
        return self.config.image_size

    def encode(self, image, bits, mask=None):
        """I_enc for a batch of images and messages (mask only for ED)"""
        features = message_to_feature(bits, image.shape[-2], image.shape[-1], self.message_encoder)
        return self.encoder(image, features, mask if self.variant == 'ED' else None)
