# Configuration settings for the MaskWM watermarking toolkit
import os
from pathlib import Path

from dotenv import load_dotenv

# Base directory
BASE_DIR = Path(__file__).parent.parent

load_dotenv(BASE_DIR / ".env")

# Run / artifact paths
RUNS_DIR = BASE_DIR / "runs"
CHECKPOINTS_DIR = RUNS_DIR / "checkpoints"
REPORTS_DIR = RUNS_DIR / "reports"
MASKS_DIR = RUNS_DIR / "masks"
PRESETS_DIR = Path(__file__).parent / "presets"

# Default run config (environment only supplies the path)
DEFAULT_CONFIG_PATH = os.getenv("MASKWM_CONFIG")

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = "MASKWM-CKPT"
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

# Model configuration
MODEL_CONFIG = {
    'variant': 'D',           # D: global embed, ED: mask-conditioned embed
    'message_length': 32,
    'feature_channels': 16,   # C_f
    'image_size': 256,
    'codec_blocks': 3,
    'encoder_depth': 4,
    'encoder_channels': 32,
    'extractor_depth': 4,
    'extractor_channels': 32,
    'localizer_channels': 16,
    'localizer_mid_channels': 8,
    'localizer_stages': 3,
    'localizer_height': 4,
}

# Training configuration (reference scale)
TRAIN_CONFIG = {
    'batch_size': 16,
    'total_steps': 100_000,
    'lr': 1e-4,
    'weight_decay': 0.01,
    'warmup_steps': 2_000,
    'alpha': 0.5,
    'beta_enc': 1.0,
    'beta_dec_start': 20.0,
    'beta_dec_end': 0.2,
    'beta_dec_decay_steps': 5_000,
    'train_mu': 1.0,
    'beta_dec_override': None,
    'grad_clip': None,
    'checkpoint_every': 1_000,
    'keep_checkpoints': 3,
    'log_every': 50,
    'num_workers': 2,
    'prefetch_factor': 2,
    'seed': 42,
    'dataset': None,
    'run_dir': str(RUNS_DIR / "default"),
}

CURRICULUM_CONFIG = {
    'full_mask_until': 500,
    'all_masks_until': 1_000,
    'distortions_from': 1_000,
    'jnd_from': 5_000,
}

FINETUNE_CONFIG = {
    'plugin_probability': 0.5,
    'beta_dec': 0.3,
    'lr': 1e-4,
    'steps': 1_000,
}

# Mask generation (LaMa-style stroke defaults)
MASK_CONFIG = {
    'rectangle_area_range': [0.01, 0.99],
    'rectangle_aspect_range': [0.5, 2.0],
    'irregular_stroke_count_range': [1, 5],
    'irregular_vertex_count_range': [3, 8],
    'irregular_brush_width_range': [0.05, 0.20],
    'segment_source': None,
    'type_weights': [0.25, 0.25, 0.25, 0.25],
}

# Distortion pools. Each entry: kind, weight, params (scalar = fixed, [lo, hi] = uniform range)
TRAIN_DISTORTIONS = {
    'geometric_enabled': True,
    'specs': [
        {'kind': 'jpeg', 'params': {'quality': 50}},
        {'kind': 'gaussian_filter', 'params': {'kernel_size': 1, 'sigma': 5.0}},
        {'kind': 'gaussian_noise', 'params': {'std': 0.1}},
        {'kind': 'median_filter', 'params': {'kernel_size': 5}},
        {'kind': 'salt_pepper', 'params': {'ratio': 0.1}},
        {'kind': 'resize', 'params': {'scale': 0.5}},
        {'kind': 'brightness', 'params': {'factor': [0.7, 1.3]}},
        {'kind': 'contrast', 'params': {'factor': [0.7, 1.3]}},
        {'kind': 'hue', 'params': {'shift': [-0.1, 0.1]}},
        {'kind': 'saturation', 'params': {'factor': [0.7, 1.3]}},
        {'kind': 'rotation', 'params': {'angle': [-90.0, 90.0]}},
        {'kind': 'perspective', 'params': {'scale': [0.1, 0.5]}},
        {'kind': 'hflip', 'params': {}},
    ],
}

EVAL_VALUEMETRIC = {
    'geometric_enabled': False,
    'specs': [
        {'kind': 'jpeg', 'params': {'quality': 60}},
        {'kind': 'gaussian_filter', 'params': {'kernel_size': 1, 'sigma': 3.0}},
        {'kind': 'gaussian_noise', 'params': {'std': 0.05}},
        {'kind': 'median_filter', 'params': {'kernel_size': 3}},
        {'kind': 'salt_pepper', 'params': {'ratio': 0.05}},
        {'kind': 'resize', 'params': {'scale': 0.5}},
        {'kind': 'brightness', 'params': {'factor': [0.7, 1.3]}},
        {'kind': 'contrast', 'params': {'factor': [0.7, 1.3]}},
        {'kind': 'hue', 'params': {'shift': [-0.1, 0.1]}},
        {'kind': 'saturation', 'params': {'factor': [0.7, 1.3]}},
    ],
}

EVAL_GEOMETRIC = {
    'geometric_enabled': True,
    'specs': [
        {'kind': 'rotation', 'params': {'angle': [-30.0, 30.0]}},
        {'kind': 'perspective', 'params': {'scale': [0.1, 0.3]}},
        {'kind': 'hflip', 'params': {}},
    ],
}

# Inference configuration
INFERENCE_CONFIG = {
    'mu_d': 1.3,
    'mu_ed': 1.75,
    'mask_threshold': 0.5,
    'bit_threshold': 0.5,
    'min_region_fraction': 0.001,
}

# Local-watermarking evaluation buckets (fractions of image area)
EVAL_BUCKETS = [
    (0.01, 0.05), (0.05, 0.10), (0.10, 0.20), (0.20, 0.30),
    (0.30, 0.40), (0.40, 0.50), (0.50, 0.60), (0.60, 0.70),
    (0.70, 0.80), (0.80, 0.90), (0.90, 0.95), (0.95, 0.99),
]

EVAL_CONFIG = {
    'per_bucket': 20,
    'multi_area_fraction': 0.05,
    'multi_n_range': [1, 5],
    'mask_source': 'rectangle',
    'max_mask_attempts': 200,
    'calibration_images': 200,
    'calibration_percentile': 99.0,
    'seed': 0,
}
