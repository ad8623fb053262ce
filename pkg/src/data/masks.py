"""Training / evaluation mask generation and mask algebra.

All generators are pure functions of (size, rng, cfg): the caller owns the
``numpy.random.Generator`` and identical inputs give identical masks.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, PngImagePlugin

from config.settings import IMAGE_EXTENSIONS, MASK_CONFIG
from src.utils.helpers import MaskGenerationError

logger = logging.getLogger(__name__)


class MaskKind(str, Enum):
    FULL = "full"
    RECTANGLE = "rectangle"
    IRREGULAR = "irregular"
    SEGMENT = "segment"
    COMPOSITE = "composite"


# Order of MaskGenConfig.type_weights
SAMPLED_KINDS = (MaskKind.FULL, MaskKind.RECTANGLE, MaskKind.IRREGULAR, MaskKind.SEGMENT)


@dataclass(frozen=True, eq=False)
class Mask:
    """Single-channel H×W map in [0, 1]; ground-truth masks hold only {0, 1}"""
    data: torch.Tensor
    kind: MaskKind = MaskKind.COMPOSITE

    def __post_init__(self):
        if self.data.dim() != 2:
            raise ValueError(f"mask data must be 2-D (H, W), got shape {tuple(self.data.shape)}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def is_binary(self):
        return bool(((self.data == 0) | (self.data == 1)).all())

    def area_ratio(self):
        return area_ratio(self)

    def as_batch(self):
        """1×1×H×W float tensor, ready to multiply with a batch of images"""
        return self.data.float()[None, None]

    def to_png(self, path, soft=False, provenance=None):
        """1-bit PNG for hard masks, 8-bit grayscale when ``soft``; provenance goes into text chunks"""
        array = self.data.detach().cpu().numpy()
        if soft:
            img = Image.fromarray(np.round(array * 255).astype(np.uint8), mode="L")
        else:
            img = Image.fromarray(((array > 0.5) * 255).astype(np.uint8), mode="L").convert("1")
        info = PngImagePlugin.PngInfo()
        for key, value in (provenance or {}).items():
            info.add_text(f"maskwm:{key}", str(value))
        img.save(path, pnginfo=info)
        return Path(path)


@dataclass
class MaskGenConfig:
    rectangle_area_range: tuple = tuple(MASK_CONFIG['rectangle_area_range'])
    rectangle_aspect_range: tuple = tuple(MASK_CONFIG['rectangle_aspect_range'])
    irregular_stroke_count_range: tuple = tuple(MASK_CONFIG['irregular_stroke_count_range'])
    irregular_vertex_count_range: tuple = tuple(MASK_CONFIG['irregular_vertex_count_range'])
    irregular_brush_width_range: tuple = tuple(MASK_CONFIG['irregular_brush_width_range'])
    segment_source: str = MASK_CONFIG['segment_source']
    type_weights: tuple = field(default_factory=lambda: tuple(MASK_CONFIG['type_weights']))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown mask options {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})

    def errors(self):
        problems = []
        lo, hi = self.rectangle_area_range
        if not (0 < lo <= hi <= 1):
            problems.append(f"rectangle_area_range must satisfy 0 < min <= max <= 1, got {self.rectangle_area_range}")
        a_lo, a_hi = self.rectangle_aspect_range
        if not (0 < a_lo <= a_hi):
            problems.append(f"rectangle_aspect_range invalid: {self.rectangle_aspect_range}")
        s_lo, s_hi = self.irregular_stroke_count_range
        if not (1 <= s_lo <= s_hi):
            problems.append(f"irregular_stroke_count_range invalid: {self.irregular_stroke_count_range}")
        v_lo, v_hi = self.irregular_vertex_count_range
        if not (2 <= v_lo <= v_hi):
            problems.append(f"irregular_vertex_count_range invalid: {self.irregular_vertex_count_range}")
        b_lo, b_hi = self.irregular_brush_width_range
        if not (0 <= b_lo <= b_hi <= 1):
            problems.append(f"irregular_brush_width_range must lie in [0, 1]: {self.irregular_brush_width_range}")
        weights = self.type_weights
        if len(weights) != 4 or any(w < 0 for w in weights) or sum(weights) <= 0:
            problems.append(f"type_weights must be 4 non-negative weights with positive sum, got {weights}")
        return problems

    def validate(self):
        problems = self.errors()
        if problems:
            raise MaskGenerationError("; ".join(problems))
        return self


def _check_size(h, w):
    if h < 1 or w < 1:
        raise MaskGenerationError(f"mask dimensions must be positive, got {h}x{w}")


def gen_full_mask(h, w):
    _check_size(h, w)
    return Mask(torch.ones(h, w), MaskKind.FULL)


def gen_rectangle_mask(h, w, rng, cfg):
    """Axis-aligned rectangle whose area fraction is drawn from cfg.rectangle_area_range.

    Height is chosen from the drawn aspect ratio, clamped to the feasible band
    [area/w, min(h, area)], then width is rounded from the target area.
    """
    _check_size(h, w)
    lo, hi = cfg.rectangle_area_range
    if not (0 < lo <= hi <= 1):
        raise MaskGenerationError(f"invalid rectangle_area_range {cfg.rectangle_area_range}")
    if round(hi * h * w) < 1:
        raise MaskGenerationError(f"rectangle_area_range {cfg.rectangle_area_range} infeasible for {h}x{w}")

    area = max(1, round(rng.uniform(lo, hi) * h * w))
    aspect = rng.uniform(*cfg.rectangle_aspect_range)
    min_rows = math.ceil(area / w)
    max_rows = min(h, area)
    rows = int(np.clip(round(math.sqrt(area * aspect)), min_rows, max_rows))
    cols = int(np.clip(round(area / rows), 1, w))

    top = int(rng.integers(0, h - rows + 1))
    left = int(rng.integers(0, w - cols + 1))
    data = torch.zeros(h, w)
    data[top:top + rows, left:left + cols] = 1.0
    return Mask(data, MaskKind.RECTANGLE)


def gen_irregular_mask(h, w, rng, cfg):
    """Union of thick random polylines (LaMa-style brush strokes)"""
    _check_size(h, w)
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    n_strokes = int(rng.integers(cfg.irregular_stroke_count_range[0], cfg.irregular_stroke_count_range[1] + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(cfg.irregular_vertex_count_range[0], cfg.irregular_vertex_count_range[1] + 1))
        xs = rng.integers(0, w, size=n_vertices)
        ys = rng.integers(0, h, size=n_vertices)
        vertices = [(int(x), int(y)) for x, y in zip(xs, ys)]
        width = int(round(rng.uniform(*cfg.irregular_brush_width_range) * min(h, w)))
        draw.line(vertices, fill=1, width=width)
        if width > 1:
            r = width // 2
            for x, y in vertices:
                draw.ellipse((x - r, y - r, x + r, y + r), fill=1)
    data = torch.from_numpy((np.asarray(canvas) > 0).astype(np.float32))
    return Mask(data, MaskKind.IRREGULAR)


def list_segment_files(source):
    if source is None:
        raise MaskGenerationError("segment source not configured")
    root = Path(source)
    if not root.is_dir():
        raise MaskGenerationError(f"segment source {root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise MaskGenerationError("segment source empty")
    return files


def gen_segment_mask(h, w, rng, cfg):
    """One pre-rendered object mask from cfg.segment_source, binarised at 0.5 then resized nearest"""
    _check_size(h, w)
    files = list_segment_files(cfg.segment_source)
    path = files[int(rng.integers(0, len(files)))]
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except OSError as e:
        raise MaskGenerationError(f"unreadable segment mask {path}: {e}") from e
    binary = Image.fromarray(((gray > 0.5) * 255).astype(np.uint8), mode="L")
    resized = binary.resize((w, h), Image.NEAREST)
    data = torch.from_numpy((np.asarray(resized) > 127).astype(np.float32))
    return Mask(data, MaskKind.SEGMENT)


# one-off warnings already emitted in this process
_warned = set()

_GENERATORS = {
    MaskKind.FULL: lambda h, w, rng, cfg: gen_full_mask(h, w),
    MaskKind.RECTANGLE: gen_rectangle_mask,
    MaskKind.IRREGULAR: gen_irregular_mask,
    MaskKind.SEGMENT: gen_segment_mask,
}


def sample_training_mask(h, w, rng, cfg):
    """Pick a generator according to cfg.type_weights and run it"""
    weights = np.asarray(cfg.type_weights, dtype=np.float64)
    if weights.shape != (4,) or (weights < 0).any() or weights.sum() <= 0:
        raise MaskGenerationError(f"invalid type_weights {cfg.type_weights}")
    if cfg.segment_source is None and weights[3] > 0:
        # no segment masks available: their share goes to the other kinds
        weights = weights.copy()
        weights[3] = 0.0
        if weights.sum() <= 0:
            raise MaskGenerationError("segment source not configured")
        if "segment_fallback" not in _warned:
            _warned.add("segment_fallback")
            logger.warning("No segment_source configured; segment mask weight is redistributed to the other kinds")
    kind = SAMPLED_KINDS[int(rng.choice(4, p=weights / weights.sum()))]
    return _GENERATORS[kind](h, w, rng, cfg)


def invert_mask(m):
    if not m.is_binary:
        raise MaskGenerationError("invert_mask requires a binary mask")
    return Mask(1.0 - m.data, m.kind)


def area_ratio(m):
    data = m.data if isinstance(m, Mask) else m
    return float(data.float().sum() / data.numel())


def multi_region_layout(n, h, w, area_frac):
    """n disjoint rectangles at fixed anchors: center, top-left, top-right, bottom-left, bottom-right"""
    if not 1 <= n <= 5:
        raise MaskGenerationError(f"number of regions must be in 1..5, got {n}")
    _check_size(h, w)
    if not 0 < area_frac <= 1 or n * area_frac > 1:
        raise MaskGenerationError(f"area infeasible: {n} regions of {area_frac:.3f}")

    side = math.sqrt(area_frac)
    rows = max(1, min(h, round(h * side)))
    cols = max(1, min(w, round(w * side)))
    anchors = [
        ((h - rows) // 2, (w - cols) // 2),
        (0, 0),
        (0, w - cols),
        (h - rows, 0),
        (h - rows, w - cols),
    ][:n]

    masks = []
    union = torch.zeros(h, w)
    for top, left in anchors:
        data = torch.zeros(h, w)
        data[top:top + rows, left:left + cols] = 1.0
        if (union * data).any():
            raise MaskGenerationError(f"area infeasible: {n} regions of {area_frac:.3f} overlap at {h}x{w}")
        union += data
        masks.append(Mask(data, MaskKind.RECTANGLE))
    return masks


def union_masks(masks):
    data = torch.zeros_like(masks[0].data)
    for m in masks:
        data = torch.maximum(data, m.data)
    return Mask(data, MaskKind.COMPOSITE)


def stack_masks(masks):
    """B×1×H×W float tensor from a sequence of masks"""
    return torch.stack([m.data.float() for m in masks])[:, None]


def load_mask(path, h=None, w=None):
    """Binary mask from an image file (> 50% gray is inside), optionally resized nearest to h×w"""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            if h is not None and w is not None and gray.size != (w, h):
                gray = gray.resize((w, h), Image.NEAREST)
            array = np.asarray(gray)
    except OSError as e:
        raise MaskGenerationError(f"unreadable mask {path}: {e}") from e
    return Mask(torch.from_numpy((array > 127).astype(np.float32)), MaskKind.COMPOSITE)
