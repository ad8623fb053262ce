"""Checkpoint container: one JSON metadata line followed by a torch-serialised payload"""
import io
import json
import logging
import os
import re
from pathlib import Path

import torch

from config.settings import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from src.utils.helpers import CheckpointError, file_digest

logger = logging.getLogger(__name__)

_STEP_FILE = re.compile(r"^ckpt_step(\d+)\.pt$")


def checkpoint_filename(step):
    return f"ckpt_step{step:07d}.pt"


def save_checkpoint(path, model, step, optimizer=None, scheduler=None, run_config=None, config_digest=None):
    """Write model (and optional optimizer/scheduler) state; returns the checkpoint id"""
    path = Path(path)
    model_cfg = model.config
    metadata = {
        'magic': CHECKPOINT_MAGIC,
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'variant': model_cfg.variant,
        'l': model_cfg.message_length,
        'c_f': model_cfg.feature_channels,
        'image_size': model_cfg.image_size,
        'step': int(step),
        'model_config': model_cfg.to_dict(),
        'model_digest': model_cfg.digest,
        'config_digest': config_digest,
        'run_config': run_config,
    }
    payload = {'model': model.state_dict()}
    if optimizer is not None:
        payload['optimizer'] = optimizer.state_dict()
    if scheduler is not None:
        payload['scheduler'] = scheduler.state_dict()
    buffer = io.BytesIO()
    torch.save(payload, buffer)

    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(metadata, sort_keys=True, default=str).encode("utf-8") + b"\n")
            fh.write(buffer.getvalue())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"checkpoint write failed for {path}: {e}") from e

    checkpoint_id = file_digest(path)
    logger.info(f"Saved checkpoint {path} (step {step}, id {checkpoint_id})")
    return checkpoint_id


def _read_metadata(fh, path):
    line = fh.readline()
    try:
        metadata = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} is not a checkpoint (unreadable metadata block)") from e
    if not isinstance(metadata, dict) or metadata.get('magic') != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version = metadata.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})")
    return metadata


def read_checkpoint_metadata(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return _read_metadata(fh, path)
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e


def load_checkpoint(path, model_cfg=None, map_location="cpu"):
    """Return (metadata, payload); rejects files whose architecture differs from ``model_cfg``"""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            metadata = _read_metadata(fh, path)
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e

    if model_cfg is not None and model_cfg.digest != metadata.get('model_digest'):
        raise CheckpointError(
            f"config digest mismatch: checkpoint has variant={metadata['variant']} l={metadata['l']} "
            f"c_f={metadata['c_f']} image_size={metadata['image_size']}, config has "
            f"variant={model_cfg.variant} l={model_cfg.message_length} "
            f"c_f={model_cfg.feature_channels} image_size={model_cfg.image_size}")

    payload = torch.load(io.BytesIO(blob), map_location=map_location, weights_only=True)
    metadata['checkpoint_id'] = file_digest(path)
    return metadata, payload


def get_checkpoint_info(path):
    """Checkpoint metadata plus id and size, without deserialising weights"""
    path = Path(path)
    metadata = read_checkpoint_metadata(path)
    info = {k: metadata.get(k) for k in ('variant', 'l', 'c_f', 'image_size', 'step',
                                         'format_version', 'config_digest', 'model_digest')}
    info['checkpoint_id'] = file_digest(path)
    info['size_mb'] = round(path.stat().st_size / (1024 * 1024), 2)
    info['path'] = str(path)
    return info


def list_checkpoints(directory):
    """(step, path) pairs for periodic checkpoints, oldest first"""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    found = []
    for path in directory.iterdir():
        match = _STEP_FILE.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return sorted(found)


def latest_checkpoint(directory):
    found = list_checkpoints(directory)
    return found[-1][1] if found else None


def prune_checkpoints(directory, keep):
    """Delete all but the ``keep`` most recent periodic checkpoints"""
    found = list_checkpoints(directory)
    removed = []
    for _, path in found[:max(0, len(found) - keep)]:
        path.unlink()
        removed.append(path)
    if removed:
        logger.debug(f"Pruned {len(removed)} old checkpoints from {directory}")
    return removed
