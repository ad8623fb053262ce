# Utility functions
import hashlib
import json
import logging
import random
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)


class MaskWMError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(MaskWMError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class MaskGenerationError(MaskWMError):
    pass


class DistortionError(MaskWMError):
    def __init__(self, message, plugin=None):
        self.plugin = plugin
        if plugin is not None:
            message = f"plugin '{plugin}': {message}"
        super().__init__(message)


class DatasetError(MaskWMError):
    pass


class CheckpointError(MaskWMError):
    pass


class MessageLengthError(MaskWMError):
    pass


class NoWatermarkDetected(MaskWMError):
    def __init__(self, message="no watermark region detected"):
        super().__init__(message)


class TrainingDivergedError(MaskWMError):
    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (state dumped to {dump_path})")


class MetricError(MaskWMError):
    pass


def set_seed(seed):
    """Seed python, numpy and torch global generators"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def get_device(prefer=None):
    if prefer:
        return torch.device(prefer)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def digest(payload):
    """SHA-256 hex digest of the canonical JSON form of ``payload``"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path, length=16):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:length]


def create_directory_structure(*directories):
    """Create required directory structure"""
    if not directories:
        from config.settings import RUNS_DIR, CHECKPOINTS_DIR, REPORTS_DIR, MASKS_DIR
        directories = (RUNS_DIR, CHECKPOINTS_DIR, REPORTS_DIR, MASKS_DIR)

    for directory in directories:
        Path(directory).mkdir(parents=True, exist_ok=True)

    logger.debug("Directory structure ready: %s", [str(d) for d in directories])
