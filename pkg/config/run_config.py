# Run configuration: file loading, overrides, validation and digests
import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from config.settings import (
    CURRICULUM_CONFIG, DEFAULT_CONFIG_PATH, EVAL_CONFIG, FINETUNE_CONFIG,
    INFERENCE_CONFIG, MASK_CONFIG, MODEL_CONFIG, TRAIN_CONFIG, TRAIN_DISTORTIONS,
)
from src.utils.helpers import ConfigError, DistortionError, digest

logger = logging.getLogger(__name__)

DEFAULT_RUN_CONFIG = {
    'model': MODEL_CONFIG,
    'train': TRAIN_CONFIG,
    'curriculum': CURRICULUM_CONFIG,
    'masks': MASK_CONFIG,
    'distortions': TRAIN_DISTORTIONS,
    'finetune': FINETUNE_CONFIG,
    'inference': INFERENCE_CONFIG,
    'evaluation': EVAL_CONFIG,
}

# Sections whose content is free-form (no unknown-key check)
_OPEN_SECTIONS = {'distortions'}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = MODEL_CONFIG['variant']
    message_length: int = MODEL_CONFIG['message_length']
    feature_channels: int = MODEL_CONFIG['feature_channels']
    image_size: int = MODEL_CONFIG['image_size']
    codec_blocks: int = MODEL_CONFIG['codec_blocks']
    encoder_depth: int = MODEL_CONFIG['encoder_depth']
    encoder_channels: int = MODEL_CONFIG['encoder_channels']
    extractor_depth: int = MODEL_CONFIG['extractor_depth']
    extractor_channels: int = MODEL_CONFIG['extractor_channels']
    localizer_channels: int = MODEL_CONFIG['localizer_channels']
    localizer_mid_channels: int = MODEL_CONFIG['localizer_mid_channels']
    localizer_stages: int = MODEL_CONFIG['localizer_stages']
    localizer_height: int = MODEL_CONFIG['localizer_height']

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self):
        return asdict(self)

    @property
    def digest(self):
        return digest(self.to_dict())


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = TRAIN_CONFIG['batch_size']
    total_steps: int = TRAIN_CONFIG['total_steps']
    lr: float = TRAIN_CONFIG['lr']
    weight_decay: float = TRAIN_CONFIG['weight_decay']
    warmup_steps: int = TRAIN_CONFIG['warmup_steps']
    alpha: float = TRAIN_CONFIG['alpha']
    beta_enc: float = TRAIN_CONFIG['beta_enc']
    beta_dec_start: float = TRAIN_CONFIG['beta_dec_start']
    beta_dec_end: float = TRAIN_CONFIG['beta_dec_end']
    beta_dec_decay_steps: int = TRAIN_CONFIG['beta_dec_decay_steps']
    train_mu: float = TRAIN_CONFIG['train_mu']
    grad_clip: float = TRAIN_CONFIG['grad_clip']
    full_mask_until: int = CURRICULUM_CONFIG['full_mask_until']
    all_masks_until: int = CURRICULUM_CONFIG['all_masks_until']
    distortions_from: int = CURRICULUM_CONFIG['distortions_from']
    jnd_from: int = CURRICULUM_CONFIG['jnd_from']
    checkpoint_every: int = TRAIN_CONFIG['checkpoint_every']
    keep_checkpoints: int = TRAIN_CONFIG['keep_checkpoints']
    log_every: int = TRAIN_CONFIG['log_every']
    num_workers: int = TRAIN_CONFIG['num_workers']
    prefetch_factor: int = TRAIN_CONFIG['prefetch_factor']
    seed: int = TRAIN_CONFIG['seed']
    dataset: str = TRAIN_CONFIG['dataset']
    run_dir: str = TRAIN_CONFIG['run_dir']
    masks: dict = field(default_factory=lambda: copy.deepcopy(MASK_CONFIG))
    distortions: dict = field(default_factory=lambda: copy.deepcopy(TRAIN_DISTORTIONS))
    beta_dec_override: float = None

    @property
    def variant(self):
        return self.model.variant

    @property
    def message_length(self):
        return self.model.message_length

    @property
    def image_size(self):
        return self.model.image_size

    @classmethod
    def from_run_config(cls, cfg):
        train = cfg.get('train', {})
        curriculum = cfg.get('curriculum', {})
        known = {f.name for f in fields(cls)} - {'model', 'masks', 'distortions'}
        kwargs = {k: v for k, v in {**train, **curriculum}.items() if k in known}
        return cls(
            model=ModelConfig.from_dict(cfg.get('model', {})),
            masks=copy.deepcopy(cfg.get('masks', MASK_CONFIG)),
            distortions=copy.deepcopy(cfg.get('distortions', TRAIN_DISTORTIONS)),
            **kwargs,
        )

    def to_run_config(self):
        data = asdict(self)
        model = data.pop('model')
        masks = data.pop('masks')
        distortions = data.pop('distortions')
        curriculum = {k: data.pop(k) for k in CURRICULUM_CONFIG}
        return {'model': model, 'train': data, 'curriculum': curriculum,
                'masks': masks, 'distortions': distortions}


def _deep_merge(base, update):
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_config_file(path):
    """Parse a JSON run-config file, reporting line context on syntax errors"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        line = text.splitlines()[e.lineno - 1] if e.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}: {line.strip()!r}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def apply_overrides(cfg, overrides):
    """Apply dotted-key overrides ({'train.lr': 1e-3}); ``None`` values are skipped"""
    cfg = copy.deepcopy(cfg)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return cfg


def collect_config_errors(cfg):
    """Return every problem found in an effective run config (empty list when valid)"""
    errors = []

    for section, value in cfg.items():
        if section not in DEFAULT_RUN_CONFIG:
            errors.append(f"unknown section '{section}'")
            continue
        if section in _OPEN_SECTIONS or not isinstance(value, dict):
            continue
        for key in value:
            if key not in DEFAULT_RUN_CONFIG[section]:
                errors.append(f"unknown key '{section}.{key}'")

    model = cfg.get('model', {})
    train = cfg.get('train', {})
    curriculum = cfg.get('curriculum', {})

    if model.get('variant') not in ('D', 'ED'):
        errors.append(f"model.variant must be 'D' or 'ED', got {model.get('variant')!r}")
    for key in ('message_length', 'feature_channels', 'image_size', 'codec_blocks',
                'encoder_channels', 'extractor_channels', 'localizer_channels',
                'localizer_mid_channels', 'localizer_stages', 'localizer_height'):
        if not isinstance(model.get(key), int) or model.get(key) < 1:
            errors.append(f"model.{key} must be a positive integer")
    size = model.get('image_size')
    for key in ('encoder_depth', 'extractor_depth'):
        depth = model.get(key)
        if not isinstance(depth, int) or depth < 0:
            errors.append(f"model.{key} must be a non-negative integer")
        elif isinstance(size, int) and size % (2 ** depth):
            errors.append(f"model.image_size ({size}) must be divisible by 2**{key} ({2 ** depth})")

    total = train.get('total_steps')
    warmup = train.get('warmup_steps')
    if not isinstance(total, int) or total < 1:
        errors.append("train.total_steps must be a positive integer")
    if not isinstance(warmup, int) or warmup < 1:
        errors.append("train.warmup_steps must be > 0")
    elif isinstance(total, int) and warmup >= total:
        errors.append("warmup must be < total_steps")
    if not isinstance(train.get('batch_size'), int) or train.get('batch_size') < 1:
        errors.append("train.batch_size must be a positive integer")
    if not (isinstance(train.get('lr'), (int, float)) and train.get('lr') >= 0):
        errors.append("train.lr must be >= 0")
    for key in ('alpha', 'beta_enc', 'beta_dec_start', 'beta_dec_end', 'train_mu'):
        value = train.get(key)
        if not isinstance(value, (int, float)) or value < 0:
            errors.append(f"train.{key} must be a non-negative number")
    if not isinstance(train.get('beta_dec_decay_steps'), int) or train.get('beta_dec_decay_steps') < 1:
        errors.append("train.beta_dec_decay_steps must be a positive integer")

    order = ['full_mask_until', 'all_masks_until', 'distortions_from', 'jnd_from']
    for key in order:
        if not isinstance(curriculum.get(key), int) or curriculum.get(key) < 0:
            errors.append(f"curriculum.{key} must be a non-negative integer")
    for earlier, later in zip(order, order[1:]):
        a, b = curriculum.get(earlier), curriculum.get(later)
        if isinstance(a, int) and isinstance(b, int) and a > b:
            errors.append(f"curriculum thresholds out of order: {earlier} ({a}) > {later} ({b})")

    from src.data.masks import MaskGenConfig
    try:
        errors.extend(f"masks: {e}" for e in MaskGenConfig.from_dict(cfg.get('masks', {})).errors())
    except (TypeError, ValueError) as e:
        errors.append(f"masks: {e}")

    from src.models.distortions import DistortionPool
    try:
        DistortionPool.from_dict(cfg.get('distortions', {}))
    except (ConfigError, DistortionError, ValueError, KeyError, TypeError) as e:
        errors.append(f"distortions: {e}")

    finetune = cfg.get('finetune', {})
    p = finetune.get('plugin_probability', 0.5)
    if not isinstance(p, (int, float)) or not 0.0 <= p <= 1.0:
        errors.append("finetune.plugin_probability must be in [0, 1]")

    q = cfg.get('evaluation', {}).get('calibration_percentile', 99.0)
    if not isinstance(q, (int, float)) or not 0.0 <= q <= 100.0:
        errors.append("evaluation.calibration_percentile must be in [0, 100]")

    return errors


def validate_config(source, overrides=None):
    """Resolve defaults, apply overrides and check invariants.

    ``source`` is a path to a JSON run config, a dict, or None (defaults only).
    Returns the effective config; raises ConfigError listing every problem.
    """
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = source
    else:
        data = read_config_file(source)

    cfg = apply_overrides(_deep_merge(DEFAULT_RUN_CONFIG, data), overrides)
    errors = collect_config_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_run_config(path=None, overrides=None):
    """Effective run config from ``path`` (or MASKWM_CONFIG) plus flag overrides"""
    path = path or DEFAULT_CONFIG_PATH
    if path:
        logger.info("Loading run config from %s", path)
    return validate_config(path, overrides)


def config_digest(cfg):
    return digest(cfg)
