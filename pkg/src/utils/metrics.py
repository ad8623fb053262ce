"""Image quality and localization metrics on 8-bit quantized images"""
import math

import numpy as np
import torch
from skimage.metrics import mean_squared_error, structural_similarity
from sklearn.metrics import jaccard_score

from src.data.data_loader import denormalize
from src.data.masks import Mask
from src.utils.helpers import MetricError

PSNR_CAP = 100.0

WATERMARKED = "watermarked"
UNWATERMARKED = "unwatermarked"


def to_uint8(img):
    """H×W×C uint8 array from a [-1, 1] tensor (C×H×W) or pass-through for uint8 arrays"""
    if isinstance(img, np.ndarray) and img.dtype == np.uint8:
        return img
    if isinstance(img, torch.Tensor):
        return denormalize(img)
    raise MetricError(f"unsupported image type {type(img).__name__}")


def _pair(a, b):
    a, b = to_uint8(a), to_uint8(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """PSNR in dB over the 8-bit domain; identical images give PSNR_CAP"""
    a, b = _pair(a, b)
    mse = mean_squared_error(a.astype(np.float64), b.astype(np.float64))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def ssim(a, b):
    """Mean SSIM, 11×11 Gaussian window (σ=1.5), K1=0.01, K2=0.03, averaged over channels"""
    a, b = _pair(a, b)
    if min(a.shape[0], a.shape[1]) < 11:
        raise MetricError(f"image {a.shape[0]}x{a.shape[1]} smaller than the 11x11 SSIM window")
    return float(structural_similarity(
        a, b,
        channel_axis=-1 if a.ndim == 3 else None,
        data_range=255,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def _mask_array(m):
    data = m.data if isinstance(m, Mask) else m
    if isinstance(data, torch.Tensor):
        data = data.detach().cpu().numpy()
    return np.asarray(data)


def iou(pred, gt, positive_class=WATERMARKED):
    """Class-wise intersection over union of two binary masks; 1.0 when both regions are empty"""
    pred, gt = _mask_array(pred), _mask_array(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise MetricError(f"{name} mask is not binary")
    if positive_class == UNWATERMARKED:
        pred, gt = 1 - pred, 1 - gt
    elif positive_class != WATERMARKED:
        raise ValueError(f"positive_class must be '{WATERMARKED}' or '{UNWATERMARKED}'")

    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    if not pred.any() and not gt.any():
        return 1.0
    return float(jaccard_score(gt, pred, pos_label=1, zero_division=1.0))
