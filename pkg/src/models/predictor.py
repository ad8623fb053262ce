"""User-facing embedding, localization and extraction"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from skimage.measure import label

from config.run_config import ModelConfig
from config.settings import INFERENCE_CONFIG
from src.data.checkpoint import load_checkpoint
from src.data.masks import Mask, MaskKind
from src.models.codec import bits_from_logits, message_to_hex
from src.models.embedder import apply_jnd_modulation
from src.models.extractor import binarize_mask
from src.models.trainer import fuse, isolate
from src.models.watermark_model import WatermarkModel
from src.utils.helpers import MessageLengthError, NoWatermarkDetected, get_device

logger = logging.getLogger(__name__)


@dataclass
class RegionResult:
    mask: Mask
    message: torch.Tensor
    logits: torch.Tensor
    confidence: float

    @property
    def message_hex(self):
        return message_to_hex(self.message)


@dataclass
class ExtractionResult:
    mask: Mask
    message: torch.Tensor
    mean_mask_confidence: float
    logits: torch.Tensor = None
    soft_mask: torch.Tensor = None
    per_region: list = None
    detected: bool = True
    resized: bool = False

    @property
    def message_hex(self):
        return message_to_hex(self.message)

    def to_record(self, mask_path=None):
        """Plain dict for the structured text output of ``extract``"""
        record = {
            'detected': self.detected,
            'message': self.message_hex,
            'confidence': round(self.mean_mask_confidence, 6),
            'region_count': len(self.per_region) if self.per_region is not None else int(self.detected),
            'resized': self.resized,
            'mask_path': str(mask_path) if mask_path else None,
        }
        if self.per_region:
            record['regions'] = [
                {'message': r.message_hex, 'confidence': round(r.confidence, 6),
                 'area_ratio': round(r.mask.area_ratio(), 6)}
                for r in self.per_region
            ]
        return record


def _resize(x, size, mode='bilinear'):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == 'nearest':
        return F.interpolate(x, size=size, mode='nearest')
    return F.interpolate(x, size=size, mode='bilinear', align_corners=False)


class WatermarkPredictor:
    """Wraps a trained WatermarkModel for embedding and extraction"""

    def __init__(self, model, device=None, inference_cfg=None, checkpoint_id=None, config_digest=None):
        self.device = get_device(device)
        self.model = model.to(self.device).eval()
        self.settings = {**INFERENCE_CONFIG, **(inference_cfg or {})}
        self.checkpoint_id = checkpoint_id
        self.config_digest = config_digest

    @classmethod
    def from_checkpoint(cls, path, device=None, inference_cfg=None):
        """Build the model described by the checkpoint metadata and load its weights"""
        device = get_device(device)
        metadata, payload = load_checkpoint(path, map_location=device)
        model = WatermarkModel(ModelConfig.from_dict(metadata['model_config']))
        model.load_state_dict(payload['model'])
        logger.info(f"Loaded {metadata['variant']} model (l={metadata['l']}, step {metadata['step']}) from {path}")
        return cls(model, device, inference_cfg, metadata['checkpoint_id'], metadata.get('config_digest'))

    @property
    def variant(self):
        return self.model.variant

    @property
    def native_size(self):
        return (self.model.image_size, self.model.image_size)

    @property
    def default_mu(self):
        return self.settings['mu_ed'] if self.variant == 'ED' else self.settings['mu_d']

    @property
    def provenance(self):
        return {'checkpoint_id': self.checkpoint_id, 'config_digest': self.config_digest}

    def _bits(self, bits):
        bits = torch.as_tensor(bits, dtype=torch.float32).flatten()
        if bits.numel() != self.model.message_length:
            raise MessageLengthError(
                f"message length mismatch: got {bits.numel()} bits, model expects {self.model.message_length}")
        return bits.to(self.device)

    @staticmethod
    def _image(image):
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a 3×H×W image, got shape {tuple(image.shape)}")
        return image

    @staticmethod
    def _mask_tensor(mask, shape):
        data = mask.data if isinstance(mask, Mask) else mask
        data = data.reshape(data.shape[-2:]).float()
        if tuple(data.shape) != tuple(shape):
            raise ValueError(f"mask {tuple(data.shape)} does not match image {tuple(shape)}")
        return data

    @torch.no_grad()
    def _embed_native(self, x, bits, mu, mask=None):
        """Watermarked image at native resolution (batch of one), modulated by JND"""
        encoded = self.model.encode(x, bits[None], mask)
        return apply_jnd_modulation(x, encoded, mu)

    @torch.no_grad()
    def embed_arbitrary_resolution(self, image, bits, mu=None, mask=None):
        """Embed at native resolution and carry the residual back to the input size.

        x̄ = resize(x, native); r = E(x̄, w) − x̄; y = clamp(x + resize(r, H×W), −1, 1)
        """
        x = self._image(image).to(self.device)[None]
        bits = self._bits(bits)
        mu = self.default_mu if mu is None else mu
        size = tuple(x.shape[-2:])
        small = _resize(x, self.native_size)
        small_mask = None
        if self.variant == 'ED':
            full = torch.ones(size, device=self.device) if mask is None else self._mask_tensor(mask, size)
            small_mask = _resize(full[None, None].to(self.device), self.native_size, mode='nearest')
        residual = self._embed_native(small, bits, mu, small_mask) - small
        return (x + _resize(residual, size)).clamp(-1.0, 1.0)[0]

    @torch.no_grad()
    def embed_global(self, image, bits, mu=None):
        """Watermark the whole image (ED models use the full mask)"""
        return self.embed_arbitrary_resolution(image, bits, mu)

    @torch.no_grad()
    def embed_local(self, image, bits, mask, mu=None):
        """ED embedding restricted to ``mask``; pixels outside it are returned unchanged"""
        if self.variant != 'ED':
            raise ValueError("embed_local requires an ED model")
        x = self._image(image).to(self.device)
        m = self._mask_tensor(mask, x.shape[-2:]).to(self.device)
        if not bool(((m == 0) | (m == 1)).all()):
            raise ValueError("embed_local requires a binary mask")
        wm = self.embed_arbitrary_resolution(x, bits, mu, m)
        return fuse(wm[None], x[None], m[None, None])[0]

    @torch.no_grad()
    def _prepare(self, image):
        x = self._image(image).to(self.device)[None]
        size = tuple(x.shape[-2:])
        resized = size != self.native_size
        if resized:
            logger.warning(f"Input {size[0]}x{size[1]} resized to native {self.native_size[0]}x{self.native_size[1]}")
        return _resize(x, self.native_size), size, resized

    def _restore_mask(self, hard, size):
        return _resize(hard, size, mode='nearest')[0, 0]

    @torch.no_grad()
    def extract_with_mask(self, image, mask):
        """Bit logits from the image isolated by a given mask (full, predicted or ground truth)"""
        x, size, _ = self._prepare(image)
        m = self._mask_tensor(mask, size).to(self.device)[None, None]
        m = _resize(m, self.native_size, mode='nearest')
        return self.model.decoder.extract_bits(isolate(x, m))[0]

    @torch.no_grad()
    def locate_and_extract(self, image, threshold=None, raise_on_empty=True):
        """Predict the watermark region, zero everything outside it and decode the bits"""
        threshold = self.settings['mask_threshold'] if threshold is None else threshold
        x, size, resized = self._prepare(image)
        soft = self.model.decoder.predict_mask(x)
        hard = binarize_mask(soft, threshold)
        detected = bool(hard.any())
        if not detected and raise_on_empty:
            raise NoWatermarkDetected()
        logits = self.model.decoder.extract_bits(isolate(x, hard))[0]
        confidence = float(soft[hard.bool()].mean()) if detected else 0.0
        return ExtractionResult(
            mask=Mask(self._restore_mask(hard, size).cpu(), MaskKind.COMPOSITE),
            message=bits_from_logits(logits, self.settings['bit_threshold']).cpu(),
            mean_mask_confidence=confidence,
            logits=logits.cpu(),
            soft_mask=soft[0, 0].cpu(),
            detected=detected,
            resized=resized,
        )

    @torch.no_grad()
    def extract_multi(self, image, threshold=None, raise_on_empty=True):
        """Split the predicted mask into 4-connected regions and decode each one separately"""
        threshold = self.settings['mask_threshold'] if threshold is None else threshold
        x, size, resized = self._prepare(image)
        soft = self.model.decoder.predict_mask(x)
        hard = binarize_mask(soft, threshold)[0, 0]
        labels = label(hard.cpu().numpy().astype(np.uint8), connectivity=1, background=0)
        floor = max(1, math.ceil(self.settings['min_region_fraction'] * labels.size))
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        kept = [(int(i), int(c)) for i, c in zip(ids, counts) if c >= floor]
        dropped = len(ids) - len(kept)
        if dropped:
            logger.debug(f"Discarded {dropped} components below {floor} pixels")
        if not kept:
            if raise_on_empty:
                raise NoWatermarkDetected()
            empty = self.locate_and_extract(image, threshold, raise_on_empty=False)
            empty.per_region = []
            empty.detected = False
            return empty

        regions = []
        union = torch.zeros_like(hard)
        for region_id, _ in sorted(kept, key=lambda item: -item[1]):
            region = torch.from_numpy(labels == region_id).to(hard)
            union = torch.maximum(union, region)
            logits = self.model.decoder.extract_bits(isolate(x, region[None, None]))[0]
            regions.append(RegionResult(
                mask=Mask(self._restore_mask(region[None, None], size).cpu(), MaskKind.COMPOSITE),
                message=bits_from_logits(logits, self.settings['bit_threshold']).cpu(),
                logits=logits.cpu(),
                confidence=float(soft[0, 0][region.bool()].mean()),
            ))

        confidence = float(soft[0, 0][union.bool()].mean())
        return ExtractionResult(
            mask=Mask(self._restore_mask(union[None, None], size).cpu(), MaskKind.COMPOSITE),
            message=regions[0].message,
            mean_mask_confidence=confidence,
            logits=regions[0].logits,
            soft_mask=soft[0, 0].cpu(),
            per_region=regions,
            resized=resized,
        )
