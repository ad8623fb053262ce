"""Distortion layer: valuemetric and geometric attacks with mask co-transformation.

Every distortion is a pure function of (image, mask, spec); randomness comes
only from ``spec.seed``. Non-differentiable operations pass gradients straight
through.
"""
import io
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from kornia.filters import gaussian_blur2d, median_blur
from PIL import Image
from torchvision.transforms import InterpolationMode

from src.utils.helpers import ConfigError, DistortionError

logger = logging.getLogger(__name__)


class DistortionKind(str, Enum):
    JPEG = "jpeg"
    GAUSSIAN_FILTER = "gaussian_filter"
    GAUSSIAN_NOISE = "gaussian_noise"
    MEDIAN_FILTER = "median_filter"
    SALT_PEPPER = "salt_pepper"
    RESIZE = "resize"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    HUE = "hue"
    SATURATION = "saturation"
    ROTATION = "rotation"
    PERSPECTIVE = "perspective"
    HFLIP = "hflip"
    IDENTITY = "identity"
    PLUGIN = "plugin"


GEOMETRIC_KINDS = frozenset({DistortionKind.ROTATION, DistortionKind.PERSPECTIVE, DistortionKind.HFLIP})
VALUEMETRIC_KINDS = frozenset(set(DistortionKind) - GEOMETRIC_KINDS - {DistortionKind.PLUGIN})

# (lo, hi) accepted for each numeric parameter
PARAM_BOUNDS = {
    DistortionKind.JPEG: {'quality': (1, 100)},
    DistortionKind.GAUSSIAN_FILTER: {'kernel_size': (1, 99), 'sigma': (1e-6, 100.0)},
    DistortionKind.GAUSSIAN_NOISE: {'std': (0.0, 10.0)},
    DistortionKind.MEDIAN_FILTER: {'kernel_size': (1, 99)},
    DistortionKind.SALT_PEPPER: {'ratio': (0.0, 1.0)},
    DistortionKind.RESIZE: {'scale': (1e-3, 1.0)},
    DistortionKind.BRIGHTNESS: {'factor': (0.0, 10.0)},
    DistortionKind.CONTRAST: {'factor': (0.0, 10.0)},
    DistortionKind.HUE: {'shift': (-0.5, 0.5)},
    DistortionKind.SATURATION: {'factor': (0.0, 10.0)},
    DistortionKind.ROTATION: {'angle': (-360.0, 360.0)},
    DistortionKind.PERSPECTIVE: {'scale': (0.0, 1.0)},
    DistortionKind.HFLIP: {},
    DistortionKind.IDENTITY: {},
    DistortionKind.PLUGIN: {},
}

_INTEGER_PARAMS = {'quality', 'kernel_size'}

_PLUGINS = {}


def register_distortion_plugin(name, fn):
    """Register an image → image callable usable as ``{'kind': 'plugin', 'params': {'name': name}}``"""
    if not callable(fn):
        raise TypeError(f"plugin '{name}' is not callable")
    _PLUGINS[name] = fn
    logger.info("Registered distortion plugin '%s'", name)


def unregister_distortion_plugin(name):
    _PLUGINS.pop(name, None)


def registered_plugins():
    return sorted(_PLUGINS)


def check_params(kind, params):
    kind = DistortionKind(kind)
    if kind is DistortionKind.PLUGIN:
        if not isinstance(params.get('name'), str):
            raise DistortionError("plugin distortion needs a 'name' parameter")
        return
    bounds = PARAM_BOUNDS[kind]
    unknown = set(params) - set(bounds)
    if unknown:
        raise DistortionError(f"{kind.value}: unknown parameters {sorted(unknown)}")
    for name, value in params.items():
        lo, hi = bounds[name]
        values = value if isinstance(value, (list, tuple)) else [value]
        for v in values:
            if not isinstance(v, (int, float)) or not lo <= v <= hi:
                raise DistortionError(f"{kind.value}: {name}={v!r} outside [{lo}, {hi}]")
    for name in ('kernel_size',):
        if name in params and not isinstance(params[name], (list, tuple)) and params[name] % 2 == 0:
            raise DistortionError(f"{kind.value}: kernel_size must be odd, got {params[name]}")


@dataclass(frozen=True)
class DistortionSpec:
    kind: DistortionKind
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def name(self):
        if self.kind is DistortionKind.PLUGIN:
            return self.params.get('name', 'plugin')
        return self.kind.value

    @property
    def is_geometric(self):
        return self.kind in GEOMETRIC_KINDS

    def describe(self):
        args = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.params.items())
        return f"{self.name}({args})"


IDENTITY = DistortionSpec(DistortionKind.IDENTITY)


@dataclass
class DistortionTemplate:
    """One pool entry; a list-valued parameter [lo, hi] is sampled uniformly"""
    kind: DistortionKind
    params: dict = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self):
        self.kind = DistortionKind(self.kind)
        check_params(self.kind, self.params)
        if self.weight < 0:
            raise DistortionError(f"{self.kind.value}: negative weight")

    def sample(self, rng):
        params = {}
        for name, value in self.params.items():
            if isinstance(value, (list, tuple)):
                lo, hi = value
                if name in _INTEGER_PARAMS:
                    params[name] = int(rng.integers(lo, hi + 1))
                else:
                    params[name] = float(rng.uniform(lo, hi))
            else:
                params[name] = value
        return DistortionSpec(self.kind, params, int(rng.integers(0, 2 ** 31 - 1)))


@dataclass
class DistortionPool:
    specs: list = field(default_factory=list)
    geometric_enabled: bool = True

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("distortion pool must be an object")
        templates = [
            DistortionTemplate(entry['kind'], dict(entry.get('params', {})), float(entry.get('weight', 1.0)))
            for entry in data.get('specs', [])
        ]
        return cls(templates, bool(data.get('geometric_enabled', True)))

    @property
    def active(self):
        return [t for t in self.specs
                if t.weight > 0 and (self.geometric_enabled or t.kind not in GEOMETRIC_KINDS)]

    def __len__(self):
        return len(self.active)

    def sample(self, rng):
        active = self.active
        if not active:
            raise DistortionError("distortion pool is empty")
        weights = np.array([t.weight for t in active], dtype=np.float64)
        template = active[int(rng.choice(len(active), p=weights / weights.sum()))]
        return template.sample(rng)


def sample_distortion(pool, rng, distortions_on=True):
    """Identity while the curriculum keeps distortions off, otherwise one draw from the pool"""
    if not distortions_on:
        return IDENTITY
    return pool.sample(rng)


def straight_through(x, y):
    """Forward value y, gradient of identity w.r.t. x"""
    return x + (y - x).detach()


def _to_uint8(img):
    return ((img.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)


def _jpeg_roundtrip(img, quality):
    out = []
    for sample in _to_uint8(img).cpu():
        array = sample.permute(1, 2, 0).numpy()
        mode = "RGB" if array.shape[2] == 3 else "L"
        if mode == "L":
            array = array[:, :, 0]
        buffer = io.BytesIO()
        Image.fromarray(array, mode=mode).save(buffer, format="JPEG", quality=int(quality))
        buffer.seek(0)
        with Image.open(buffer) as decoded:
            restored = np.asarray(decoded.convert(mode), dtype=np.float32)
        if restored.ndim == 2:
            restored = restored[:, :, None]
        out.append(torch.from_numpy(restored).permute(2, 0, 1))
    return (torch.stack(out) / 127.5 - 1.0).to(device=img.device, dtype=img.dtype)


def differentiable_jpeg(img, quality):
    """Real JPEG round-trip forward, identity backward"""
    if not isinstance(quality, (int, float)) or not 1 <= quality <= 100:
        raise DistortionError(f"jpeg quality must be in [1, 100], got {quality!r}")
    squeeze = img.dim() == 3
    batch = img[None] if squeeze else img
    out = straight_through(batch, _jpeg_roundtrip(batch, quality))
    return out[0] if squeeze else out


def _generator(seed):
    return torch.Generator().manual_seed(int(seed))


def _color(img, fn, *args):
    return fn((img + 1.0) / 2.0, *args) * 2.0 - 1.0


def apply_valuemetric(img, spec):
    """Apply a valuemetric distortion to a B×C×H×W (or C×H×W) image in [-1, 1]"""
    kind = DistortionKind(spec.kind)
    if kind not in VALUEMETRIC_KINDS and kind is not DistortionKind.PLUGIN:
        raise DistortionError(f"{kind.value} is not a valuemetric distortion")
    p = spec.params
    check_params(kind, p)

    if kind is DistortionKind.IDENTITY:
        return img
    if kind is DistortionKind.PLUGIN:
        return _apply_plugin(img, p['name'])

    squeeze = img.dim() == 3
    x = img[None] if squeeze else img

    if kind is DistortionKind.JPEG:
        out = differentiable_jpeg(x, p.get('quality', 50))
    elif kind is DistortionKind.GAUSSIAN_FILTER:
        k = int(p.get('kernel_size', 1))
        sigma = float(p.get('sigma', 1.0))
        out = x if k == 1 else gaussian_blur2d(x, (k, k), (sigma, sigma), border_type='reflect')
    elif kind is DistortionKind.GAUSSIAN_NOISE:
        # std is given on the [0, 1] intensity scale
        noise = torch.randn(x.shape, generator=_generator(spec.seed)).to(x.device, x.dtype)
        out = (x + 2.0 * float(p.get('std', 0.1)) * noise).clamp(-1.0, 1.0)
    elif kind is DistortionKind.MEDIAN_FILTER:
        k = int(p.get('kernel_size', 3))
        out = x if k == 1 else straight_through(x, median_blur(x, (k, k)))
    elif kind is DistortionKind.SALT_PEPPER:
        ratio = float(p.get('ratio', 0.05))
        u = torch.rand((x.shape[0], 1, *x.shape[2:]), generator=_generator(spec.seed)).to(x.device)
        noisy = torch.where(u < ratio / 2, torch.ones_like(x), x)
        noisy = torch.where((u >= ratio / 2) & (u < ratio), -torch.ones_like(x), noisy)
        out = straight_through(x, noisy)
    elif kind is DistortionKind.RESIZE:
        scale = float(p.get('scale', 0.5))
        h, w = x.shape[-2:]
        small = F.interpolate(x, size=(max(1, round(h * scale)), max(1, round(w * scale))),
                              mode='bilinear', align_corners=False)
        out = F.interpolate(small, size=(h, w), mode='bilinear', align_corners=False)
    elif kind is DistortionKind.BRIGHTNESS:
        factor = float(p.get('factor', 1.0))
        out = x if factor == 1.0 else _color(x, TF.adjust_brightness, factor)
    elif kind is DistortionKind.CONTRAST:
        factor = float(p.get('factor', 1.0))
        out = x if factor == 1.0 else _color(x, TF.adjust_contrast, factor)
    elif kind is DistortionKind.SATURATION:
        factor = float(p.get('factor', 1.0))
        out = x if factor == 1.0 else _color(x, TF.adjust_saturation, factor)
    elif kind is DistortionKind.HUE:
        shift = float(p.get('shift', 0.0))
        out = x if shift == 0.0 else straight_through(x, _color(x, TF.adjust_hue, shift))
    else:
        raise DistortionError(f"unknown distortion kind {kind!r}")

    return out[0] if squeeze else out


def _perspective_points(h, w, scale, seed):
    rng = np.random.default_rng(seed)
    dw, dh = int(scale * (w // 2)), int(scale * (h // 2))
    top_left = [int(rng.integers(0, dw + 1)), int(rng.integers(0, dh + 1))]
    top_right = [int(rng.integers(w - dw - 1, w)), int(rng.integers(0, dh + 1))]
    bottom_right = [int(rng.integers(w - dw - 1, w)), int(rng.integers(h - dh - 1, h))]
    bottom_left = [int(rng.integers(0, dw + 1)), int(rng.integers(h - dh - 1, h))]
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return start, [top_left, top_right, bottom_right, bottom_left]


def apply_geometric(img, mask, spec):
    """Same spatial transform on image (bilinear) and mask (nearest); fill 0 in both"""
    kind = DistortionKind(spec.kind)
    if kind not in GEOMETRIC_KINDS:
        raise DistortionError(f"{kind.value} is not a geometric distortion")
    check_params(kind, spec.params)

    squeeze_img = img.dim() == 3
    x = img[None] if squeeze_img else img
    mask_dim = mask.dim()
    m = mask.reshape(1, 1, *mask.shape) if mask_dim == 2 else (mask[None] if mask_dim == 3 else mask)
    h, w = x.shape[-2:]
    if m.shape[-2:] != (h, w):
        raise ValueError(f"mask {tuple(m.shape[-2:])} does not match image {(h, w)}")

    if kind is DistortionKind.HFLIP:
        x, m = torch.flip(x, dims=[-1]), torch.flip(m, dims=[-1])
    elif kind is DistortionKind.ROTATION:
        angle = float(spec.params.get('angle', 0.0))
        if angle % 90 == 0 and h == w:
            k = int(angle // 90) % 4
            x, m = torch.rot90(x, k, dims=(-2, -1)), torch.rot90(m, k, dims=(-2, -1))
        else:
            x = TF.rotate(x, angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)
            m = TF.rotate(m, angle, interpolation=InterpolationMode.NEAREST, fill=0.0)
    elif kind is DistortionKind.PERSPECTIVE:
        start, end = _perspective_points(h, w, float(spec.params.get('scale', 0.3)), spec.seed)
        x = TF.perspective(x, start, end, interpolation=InterpolationMode.BILINEAR, fill=0.0)
        m = TF.perspective(m, start, end, interpolation=InterpolationMode.NEAREST, fill=0.0)

    x = x[0] if squeeze_img else x
    m = m.reshape(mask.shape) if mask_dim in (2, 3) else m
    return x, m


def _apply_plugin(img, name):
    fn = _PLUGINS.get(name)
    if fn is None:
        raise DistortionError("not registered", plugin=name)
    try:
        out = fn(img)
    except Exception as e:
        raise DistortionError(f"failed: {e}", plugin=name) from e
    if not isinstance(out, torch.Tensor) or out.shape != img.shape:
        raise DistortionError("must return a tensor shaped like its input", plugin=name)
    return out


def apply_distortion(img, mask, spec):
    """Dispatch on spec.kind; valuemetric distortions leave the mask untouched"""
    if DistortionKind(spec.kind) in GEOMETRIC_KINDS:
        return apply_geometric(img, mask, spec)
    return apply_valuemetric(img, spec), mask
