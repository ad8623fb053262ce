# Shared builders for the unit tests: tiny model configs and temporary image folders
import numpy as np
from PIL import Image

from config.run_config import ModelConfig, TrainConfig


def tiny_model_config(variant='D', message_length=4, image_size=16):
    """A model small enough to run a few CPU steps inside a unit test"""
    return ModelConfig(
        variant=variant,
        message_length=message_length,
        feature_channels=4,
        image_size=image_size,
        codec_blocks=1,
        encoder_depth=2,
        encoder_channels=4,
        extractor_depth=2,
        extractor_channels=4,
        localizer_channels=4,
        localizer_mid_channels=2,
        localizer_stages=2,
        localizer_height=3,
    )


def tiny_train_config(run_dir, variant='D', **overrides):
    values = dict(
        model=tiny_model_config(variant),
        batch_size=2,
        total_steps=6,
        lr=1e-3,
        warmup_steps=2,
        beta_dec_decay_steps=4,
        full_mask_until=2,
        all_masks_until=3,
        distortions_from=3,
        jnd_from=4,
        checkpoint_every=3,
        keep_checkpoints=2,
        log_every=1,
        num_workers=0,
        seed=7,
        run_dir=str(run_dir),
    )
    values.update(overrides)
    return TrainConfig(**values)


def write_images(directory, count=4, size=(20, 20), seed=0):
    """Random RGB PNGs; returns their paths"""
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        array = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
        path = directory / f"img_{i:03d}.png"
        Image.fromarray(array, mode="RGB").save(path)
        paths.append(path)
    return paths


def negate_plugin(img):
    return -img
