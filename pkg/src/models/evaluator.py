"""Evaluation harness: local-watermark eval sets, robustness sweeps and reports"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import joblib
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config.settings import EVAL_BUCKETS, EVAL_GEOMETRIC, EVAL_VALUEMETRIC, MASK_CONFIG
from src.data.data_loader import denormalize, normalize
from src.data.masks import (
    Mask, MaskGenConfig, area_ratio, gen_irregular_mask, gen_rectangle_mask, gen_segment_mask,
    invert_mask, multi_region_layout,
)
from src.models.codec import bit_accuracy, bits_from_logits, sample_message
from src.models.distortions import IDENTITY, DistortionPool, apply_distortion
from src.models.trainer import fuse
from src.utils.helpers import MaskGenerationError, MaskWMError, NoWatermarkDetected, digest
from src.utils.metrics import UNWATERMARKED, WATERMARKED, iou, psnr, ssim

logger = logging.getLogger(__name__)

SUITES = ('none', 'valuemetric', 'geometric', 'per-distortion')
MASK_SOURCES = ('rectangle', 'irregular', 'segment')


@dataclass(frozen=True, eq=False)
class EvalSample:
    image_id: int
    mask: Mask
    inverted: bool = False


@dataclass
class EvalBucket:
    ratio_range: tuple
    samples: list = field(default_factory=list)

    @property
    def midpoint(self):
        return (self.ratio_range[0] + self.ratio_range[1]) / 2

    def contains(self, ratio):
        """Strictly inside the bucket; boundary ratios belong to neither neighbour"""
        return self.ratio_range[0] < ratio < self.ratio_range[1]


def _mirror_index(buckets, index):
    lo, hi = buckets[index]
    for j, (m_lo, m_hi) in enumerate(buckets):
        if np.isclose(m_lo, 1 - hi) and np.isclose(m_hi, 1 - lo):
            return j
    raise ValueError(f"bucket {buckets[index]} has no mirror bucket [{1 - hi:.2f}, {1 - lo:.2f}]")


def _draw_mask(mask_source, size, rng, mask_cfg, ratio_range):
    if mask_source == 'rectangle':
        return gen_rectangle_mask(size, size, rng, replace(mask_cfg, rectangle_area_range=tuple(ratio_range)))
    if mask_source == 'irregular':
        return gen_irregular_mask(size, size, rng, mask_cfg)
    if mask_source == 'segment':
        return gen_segment_mask(size, size, rng, mask_cfg)
    raise ValueError(f"mask_source must be one of {MASK_SOURCES}, got {mask_source!r}")


def build_local_eval_set(images, mask_source, buckets, per_bucket, rng, size, mask_cfg=None, max_attempts=200):
    """Area-ratio buckets of (image, mask) pairs, half of them inverted masks.

    For every bucket, per_bucket/2 masks are drawn with a ratio strictly inside
    it; each is paired with a random image and its inversion lands in the
    mirror bucket, so every bucket ends up with per_bucket samples.
    """
    images = list(images)
    if not images:
        raise ValueError("no images for the evaluation set")
    if per_bucket < 2 or per_bucket % 2:
        raise ValueError(f"per_bucket must be a positive even number, got {per_bucket}")
    buckets = [tuple(b) for b in (buckets or EVAL_BUCKETS)]
    mask_cfg = mask_cfg or MaskGenConfig.from_dict(MASK_CONFIG)
    mirrors = [_mirror_index(buckets, i) for i in range(len(buckets))]

    result = [EvalBucket(b) for b in buckets]
    starved = []
    for i, (lo, hi) in enumerate(buckets):
        wanted = per_bucket // 2
        found = 0
        for _ in range(wanted * max_attempts):
            if found == wanted:
                break
            mask = _draw_mask(mask_source, size, rng, mask_cfg, (lo, hi))
            if not result[i].contains(area_ratio(mask)):
                continue
            image_id = images[int(rng.integers(0, len(images)))]
            result[i].samples.append(EvalSample(image_id, mask, False))
            result[mirrors[i]].samples.append(EvalSample(image_id, invert_mask(mask), True))
            found += 1
        if found < wanted:
            starved.append(f"[{lo}, {hi}]: {found}/{wanted}")
    if starved:
        raise MaskGenerationError(f"bucket starvation ({mask_source} masks at {size}x{size}): " + ", ".join(starved))

    logger.info(f"Built local eval set: {len(buckets)} buckets x {per_bucket} samples")
    return result


def cached_local_eval_set(images, mask_source, buckets, per_bucket, seed, size, cache_dir=None, **kwargs):
    """build_local_eval_set with a joblib cache keyed on every input"""
    key = digest({'images': [str(i) for i in images], 'source': mask_source, 'buckets': buckets,
                  'per_bucket': per_bucket, 'seed': seed, 'size': size})[:16]
    path = Path(cache_dir) / f"evalset_{key}.joblib" if cache_dir else None
    if path is not None and path.exists():
        logger.info(f"Loaded cached eval set {path}")
        return joblib.load(path)
    eval_set = build_local_eval_set(images, mask_source, buckets, per_bucket, np.random.default_rng(seed), size,
                                    **kwargs)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump(eval_set, path)
    return eval_set


def quantize(img):
    """8-bit export round-trip of a [-1, 1] image"""
    return normalize(denormalize(img)).to(img.device)


class EvalReport:
    """Per-sample metric rows plus the provenance of the run that produced them"""

    def __init__(self, rows, provenance, group_by=('distortion', 'bucket_lo', 'bucket_hi'), kind='robustness'):
        self.rows = pd.DataFrame(rows)
        self.provenance = dict(provenance)
        self.provenance['digest'] = digest({k: self.provenance.get(k)
                                            for k in ('checkpoint_id', 'config_digest', 'seed')})
        self.group_by = list(group_by)
        self.kind = kind

    @property
    def failures(self):
        if 'error' not in self.rows:
            return self.rows.iloc[0:0]
        return self.rows[self.rows['error'].notna()]

    def summary(self):
        """Means per group over successful samples"""
        ok = self.rows[self.rows['error'].isna()] if 'error' in self.rows else self.rows
        metrics = [c for c in ('bit_accuracy', 'iou_watermarked', 'iou_unwatermarked', 'iou', 'detected',
                               'above_calibration', 'confidence', 'exact_regions') if c in ok]
        grouped = ok.groupby(self.group_by, sort=True)[metrics].mean()
        grouped['samples'] = ok.groupby(self.group_by, sort=True).size()
        return grouped.reset_index()

    def global_quality(self):
        if 'psnr' not in self.rows:
            return {}
        per_sample = self.rows.drop_duplicates('sample_id')
        return {'psnr': float(per_sample['psnr'].mean()), 'ssim': float(per_sample['ssim'].mean())}

    def ratio_trend(self):
        """Spearman correlation of bucket accuracy against bucket midpoint, per distortion"""
        table = self.summary()
        table['midpoint'] = (table['bucket_lo'] + table['bucket_hi']) / 2
        trend = {}
        for name, group in table.groupby('distortion'):
            if len(group) < 2:
                continue
            rho = group['midpoint'].rank().corr(group['bit_accuracy'].rank())
            trend[name] = float(rho) if pd.notna(rho) else float('nan')
        return trend

    def to_dict(self):
        data = {
            'kind': self.kind,
            'provenance': self.provenance,
            'summary': self.summary().to_dict(orient='records'),
            'quality': self.global_quality(),
            'failures': int(len(self.failures)),
        }
        if self.kind == 'robustness':
            data['ratio_trend'] = self.ratio_trend()
        return data

    def save(self, directory, prefix='report'):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            'json': directory / f"{prefix}.json",
            'summary_csv': directory / f"{prefix}_summary.csv",
            'samples_csv': directory / f"{prefix}_samples.csv",
        }
        paths['json'].write_text(json.dumps(self.to_dict(), indent=2, default=str), encoding="utf-8")
        self.summary().to_csv(paths['summary_csv'], index=False)
        self.rows.to_csv(paths['samples_csv'], index=False)
        logger.info(f"Report written to {paths['json']}")
        return paths


def greedy_match(predicted, truth):
    """Pair predicted and ground-truth regions by repeatedly taking the largest remaining overlap"""
    overlap = np.array([[float((p * t).sum()) for t in truth] for p in predicted]).reshape(len(predicted), len(truth))
    pairs = {}
    while overlap.size and overlap.max() > 0:
        i, j = np.unravel_index(np.argmax(overlap), overlap.shape)
        pairs[int(j)] = int(i)
        overlap[i, :] = -1
        overlap[:, j] = -1
    return pairs


class ModelEvaluator:
    """Runs evaluation protocols against a WatermarkPredictor"""

    def __init__(self, predictor, images, seed=0, valuemetric_pool=None, geometric_pool=None, config_digest=None):
        self.predictor = predictor
        self.images = images
        self.seed = seed
        self.valuemetric = DistortionPool.from_dict(valuemetric_pool or EVAL_VALUEMETRIC)
        self.geometric = DistortionPool.from_dict(geometric_pool or EVAL_GEOMETRIC)
        self.provenance = {
            'checkpoint_id': predictor.checkpoint_id,
            'config_digest': config_digest or predictor.config_digest,
            'seed': seed,
            'variant': predictor.variant,
        }
        self.calibration = None

    def calibrate(self, image_ids, percentile=99.0):
        """Confidence threshold from clean, never-watermarked images.

        Undetected images count with confidence 0. The threshold is the given
        percentile of the clean confidences and is attached to the provenance
        of every later report.
        """
        if not 0.0 <= percentile <= 100.0:
            raise ValueError(f"percentile must be in [0, 100], got {percentile}")
        image_ids = list(image_ids)
        if not image_ids:
            raise ValueError("no images to calibrate on")
        rows = []
        for image_id in tqdm(image_ids, desc="Calibrating", unit="image"):
            result = self.predictor.locate_and_extract(self.images[image_id], raise_on_empty=False)
            rows.append({'image_id': str(image_id), 'distortion': 'clean', 'detected': float(result.detected),
                         'confidence': result.mean_mask_confidence, 'error': None})
        confidences = np.array([r['confidence'] for r in rows])
        self.calibration = {
            'confidence_threshold': float(np.percentile(confidences, percentile)),
            'percentile': float(percentile),
            'images': len(rows),
            'clean_detection_rate': float(np.mean([r['detected'] for r in rows])),
        }
        self.provenance['calibration'] = dict(self.calibration)
        logger.info(f"Calibrated on {len(rows)} clean images: threshold "
                    f"{self.calibration['confidence_threshold']:.4f} (p{percentile:g}), "
                    f"{self.calibration['clean_detection_rate']:.1%} falsely detected")
        return EvalReport(rows, self.provenance, group_by=('distortion',), kind='calibration')

    def above_calibration(self, result):
        """Detected with a confidence the clean images do not reach"""
        if self.calibration is None:
            raise ValueError("call calibrate() first")
        return float(result.detected and result.mean_mask_confidence > self.calibration['confidence_threshold'])

    def _specs(self, suite, rng):
        """(distortion key, spec) pairs for one sample"""
        if suite == 'none':
            return [('none', IDENTITY)]
        if suite == 'valuemetric':
            return [('valuemetric', self.valuemetric.sample(rng))]
        if suite == 'geometric':
            return [('geometric', self.geometric.sample(rng))]
        if suite == 'per-distortion':
            return [(t.kind.value, t.sample(rng)) for t in self.valuemetric.active + self.geometric.active]
        raise ValueError(f"unknown distortion suite {suite!r}; expected one of {SUITES}")

    def _embed(self, image, bits, mask):
        """Variant-appropriate embedding followed by fusion with the original outside ``mask``"""
        if self.predictor.variant == 'ED':
            return self.predictor.embed_local(image, bits, mask)
        wm = self.predictor.embed_global(image, bits)
        m = mask.as_batch().to(wm.device)
        return fuse(wm[None], image.to(wm.device)[None], m)[0]

    def evaluate_robustness(self, eval_set, suites=('none',)):
        rng = np.random.default_rng(self.seed)
        l = self.predictor.model.message_length
        rows = []
        samples = [(bucket, sample) for bucket in eval_set for sample in bucket.samples]
        for sample_id, (bucket, sample) in enumerate(tqdm(samples, desc="Evaluating", unit="sample")):
            base = {'sample_id': sample_id, 'image_id': str(sample.image_id), 'bucket_lo': bucket.ratio_range[0],
                    'bucket_hi': bucket.ratio_range[1], 'inverted': sample.inverted,
                    'area_ratio': sample.mask.area_ratio()}
            try:
                image = self.images[sample.image_id]
                bits = sample_message(l, rng)
                fused = quantize(self._embed(image, bits, sample.mask))
                quality = {'psnr': psnr(fused, image), 'ssim': ssim(fused, image)}
            except MaskWMError as e:
                logger.warning(f"Sample {sample_id} failed during embedding: {e}")
                rows.append({**base, 'distortion': 'embed', 'error': str(e)})
                continue

            for suite in suites:
                for key, spec in self._specs(suite, rng):
                    row = {**base, **quality, 'suite': suite, 'distortion': key, 'spec': spec.describe(), 'error': None}
                    try:
                        distorted, mask = apply_distortion(fused[None], sample.mask.as_batch().to(fused.device), spec)
                        result = self.predictor.locate_and_extract(distorted[0], raise_on_empty=False)
                        gt = mask[0, 0].cpu()
                        row.update({
                            'bit_accuracy': bit_accuracy(result.message, bits),
                            'iou_watermarked': iou(result.mask, gt, WATERMARKED),
                            'iou_unwatermarked': iou(result.mask, gt, UNWATERMARKED),
                            'detected': float(result.detected),
                            'confidence': result.mean_mask_confidence,
                        })
                        if self.calibration is not None:
                            row['above_calibration'] = self.above_calibration(result)
                    except MaskWMError as e:
                        logger.warning(f"Sample {sample_id} ({spec.describe()}) failed: {e}")
                        row['error'] = str(e)
                    rows.append(row)
        return EvalReport(rows, self.provenance)

    def evaluate_global(self, image_ids, suites=('none',), scale=1):
        """Whole-image protocol: embed_global, full mask everywhere, quality on the full frame.

        With scale > 1 each image is upsampled first, so embedding and extraction
        go through the arbitrary-resolution path.
        """
        if scale < 1:
            raise ValueError(f"scale must be >= 1, got {scale}")
        rng = np.random.default_rng(self.seed)
        l = self.predictor.model.message_length
        rows = []
        for sample_id, image_id in enumerate(tqdm(list(image_ids), desc="Evaluating (global)", unit="image")):
            base = {'sample_id': sample_id, 'image_id': str(image_id), 'area_ratio': 1.0, 'scale': scale}
            try:
                image = self.images[image_id]
                if scale != 1:
                    image = F.interpolate(image[None], scale_factor=scale, mode='bilinear',
                                          align_corners=False)[0].clamp(-1.0, 1.0)
                bits = sample_message(l, rng)
                wm = quantize(self.predictor.embed_global(image, bits))
                quality = {'psnr': psnr(wm, image), 'ssim': ssim(wm, image)}
            except MaskWMError as e:
                logger.warning(f"Image {image_id} failed during embedding: {e}")
                rows.append({**base, 'suite': 'embed', 'distortion': 'embed', 'error': str(e)})
                continue

            full = torch.ones(1, 1, *wm.shape[-2:], device=wm.device)
            for suite in suites:
                for key, spec in self._specs(suite, rng):
                    row = {**base, **quality, 'suite': suite, 'distortion': key, 'spec': spec.describe(), 'error': None}
                    try:
                        distorted, _ = apply_distortion(wm[None], full, spec)
                        logits = self.predictor.extract_with_mask(distorted[0], full[0, 0])
                        decoded = bits_from_logits(logits, self.predictor.settings['bit_threshold']).cpu()
                        row['bit_accuracy'] = bit_accuracy(decoded, bits)
                    except MaskWMError as e:
                        logger.warning(f"Image {image_id} ({spec.describe()}) failed: {e}")
                        row['error'] = str(e)
                    rows.append(row)
        return EvalReport(rows, self.provenance, group_by=('suite', 'distortion'), kind='global')

    def evaluate_multi_watermark(self, image_ids, n_range=(1, 5), area_frac=0.05, suites=('none',)):
        """Embed n distinct messages in disjoint regions and score region-wise recovery"""
        if self.predictor.variant != 'ED':
            raise ValueError("multi-watermark evaluation requires an ED model")
        rng = np.random.default_rng(self.seed)
        l = self.predictor.model.message_length
        size = self.predictor.model.image_size
        lo, hi = n_range
        rows = []
        for n in range(lo, hi + 1):
            layout = multi_region_layout(n, size, size, area_frac)
            for image_id in tqdm(image_ids, desc=f"Multi-watermark n={n}", unit="image"):
                image = self.images[image_id]
                messages = [sample_message(l, rng) for _ in layout]
                wm = image
                for region, bits in zip(layout, messages):
                    wm = self.predictor.embed_local(wm, bits, region)
                wm = quantize(wm)
                for suite in suites:
                    for key, spec in self._specs(suite, rng):
                        rows.extend(self._score_multi(image_id, n, wm, layout, messages, key, spec))
        return EvalReport(rows, self.provenance, group_by=('distortion', 'n'), kind='multi_watermark')

    def _score_multi(self, image_id, n, wm, layout, messages, key, spec):
        regions = torch.stack([m.data for m in layout])[None].to(wm.device)
        distorted, moved = apply_distortion(wm[None], regions, spec)
        truth = list(moved[0].cpu())
        try:
            found = self.predictor.extract_multi(distorted[0]).per_region
        except NoWatermarkDetected:
            found = []
        pairs = greedy_match([r.mask.data for r in found], truth)
        rows = []
        for j, bits in enumerate(messages):
            matched = j in pairs
            region = found[pairs[j]] if matched else None
            rows.append({
                'image_id': str(image_id), 'n': n, 'distortion': key, 'spec': spec.describe(),
                'message_index': j, 'matched': matched,
                'bit_accuracy': bit_accuracy(region.message, bits) if matched else 0.0,
                'iou': iou(region.mask, truth[j]) if matched else 0.0,
                'regions_found': len(found),
                'exact_regions': float(len(found) == n),
                'error': None,
            })
        return rows

    def evaluate_masking_strategies(self, eval_set, area_range=(0.04, 0.06)):
        """Bit accuracy when isolating with the full, predicted and ground-truth mask on the same samples"""
        rng = np.random.default_rng(self.seed)
        l = self.predictor.model.message_length
        rows = []
        samples = [s for bucket in eval_set for s in bucket.samples
                   if area_range[0] <= s.mask.area_ratio() <= area_range[1]]
        if not samples:
            raise ValueError(f"no evaluation samples with area ratio in {area_range}")
        for sample_id, sample in enumerate(samples):
            image = self.images[sample.image_id]
            bits = sample_message(l, rng)
            fused = quantize(self._embed(image, bits, sample.mask))
            predicted = self.predictor.locate_and_extract(fused, raise_on_empty=False)
            strategies = {
                'full': torch.ones_like(sample.mask.data),
                'predicted': predicted.mask.data,
                'ground_truth': sample.mask.data,
            }
            for strategy, mask in strategies.items():
                logits = self.predictor.extract_with_mask(fused, mask)
                rows.append({
                    'sample_id': sample_id, 'image_id': str(sample.image_id), 'strategy': strategy,
                    'area_ratio': sample.mask.area_ratio(),
                    'bit_accuracy': bit_accuracy(bits_from_logits(logits, self.predictor.settings['bit_threshold']).cpu(), bits),
                    'error': None,
                })
        return EvalReport(rows, self.provenance, group_by=('strategy',), kind='masking_strategies')
