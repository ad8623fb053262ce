"""End-to-end training: fuse/isolate pipeline, losses, curriculum, checkpointing and fine-tuning"""
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import joblib
import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config.run_config import TrainConfig, apply_overrides, validate_config
from src.data.checkpoint import (
    checkpoint_filename, latest_checkpoint, load_checkpoint, prune_checkpoints, read_checkpoint_metadata,
    save_checkpoint,
)
from src.data.data_loader import load_dataset, make_loader
from src.data.masks import MaskGenConfig, gen_full_mask, sample_training_mask, stack_masks
from src.models.codec import bit_accuracy, bits_from_logits, sample_messages
from src.models.distortions import (
    DistortionKind, DistortionPool, DistortionSpec, apply_distortion, registered_plugins, sample_distortion,
)
from src.models.embedder import apply_jnd_modulation
from src.models.extractor import binarize_mask
from src.models.watermark_model import WatermarkModel
from src.utils.helpers import (
    DatasetError, DistortionError, TrainingDivergedError, digest, get_device, set_seed,
)
from src.utils.metrics import iou

logger = logging.getLogger(__name__)


def _check_shapes(a, b, what):
    if a.shape[-2:] != b.shape[-2:] or a.shape[0] != b.shape[0]:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def fuse(wm, orig, mask):
    """I_fuse = I_wm ⊙ M + I_orig ⊙ (1 − M)"""
    if wm.shape != orig.shape:
        raise ValueError(f"fuse: shape mismatch {tuple(wm.shape)} vs {tuple(orig.shape)}")
    _check_shapes(wm, mask, "fuse")
    return wm * mask + orig * (1 - mask)


def isolate(fused, mask):
    """I_mask = I'_fuse ⊙ M"""
    _check_shapes(fused, mask, "isolate")
    return fused * mask


@dataclass
class LossBundle:
    l_enc: torch.Tensor
    l_bits: torch.Tensor
    l_mask: torch.Tensor
    l_dec: torch.Tensor
    l_total: torch.Tensor

    def is_finite(self):
        return all(bool(torch.isfinite(v)) for v in self.as_tensors())

    def as_tensors(self):
        return [self.l_enc, self.l_bits, self.l_mask, self.l_dec, self.l_total]

    def as_floats(self):
        return {k: float(v.detach()) for k, v in zip(('l_enc', 'l_bits', 'l_mask', 'l_dec', 'l_total'),
                                                      self.as_tensors())}


def compute_losses(wm, orig, bit_logits, bits_gt, mask_pd, mask_gt, alpha, beta_enc, beta_dec):
    """MSE terms combined as l_dec = l_bits + α·l_mask and l_total = β_enc·l_enc + β_dec·l_dec"""
    if wm.shape != orig.shape:
        raise ValueError(f"image shape mismatch {tuple(wm.shape)} vs {tuple(orig.shape)}")
    if bit_logits.shape != bits_gt.shape:
        raise ValueError(f"bit shape mismatch {tuple(bit_logits.shape)} vs {tuple(bits_gt.shape)}")
    if mask_pd.shape != mask_gt.shape:
        raise ValueError(f"mask shape mismatch {tuple(mask_pd.shape)} vs {tuple(mask_gt.shape)}")
    l_enc = F.mse_loss(wm, orig)
    l_bits = F.mse_loss(bit_logits, bits_gt)
    l_mask = F.mse_loss(mask_pd, mask_gt.to(mask_pd.dtype))
    l_dec = l_bits + alpha * l_mask
    l_total = beta_enc * l_enc + beta_dec * l_dec
    return LossBundle(l_enc, l_bits, l_mask, l_dec, l_total)


class MaskMode(str, Enum):
    FULL_ONLY = "full_only"
    ALL_TYPES = "all_types"


@dataclass(frozen=True)
class PhaseConfig:
    mask_mode: MaskMode
    distortions_on: bool
    jnd_on: bool
    beta_dec: float

    @property
    def name(self):
        if self.mask_mode is MaskMode.FULL_ONLY:
            return "full_mask"
        if not self.distortions_on:
            return "all_masks"
        return "jnd" if self.jnd_on else "distorted"


def beta_dec_at(step, cfg):
    if cfg.beta_dec_override is not None:
        return float(cfg.beta_dec_override)
    if step >= cfg.beta_dec_decay_steps:
        return float(cfg.beta_dec_end)
    frac = step / cfg.beta_dec_decay_steps
    return cfg.beta_dec_start + (cfg.beta_dec_end - cfg.beta_dec_start) * frac


def curriculum_state(step, cfg):
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return PhaseConfig(
        mask_mode=MaskMode.FULL_ONLY if step < cfg.full_mask_until else MaskMode.ALL_TYPES,
        # no distortions while the all-mask phase is still running
        distortions_on=step >= max(cfg.all_masks_until, cfg.distortions_from),
        jnd_on=step >= cfg.jnd_from,
        beta_dec=beta_dec_at(step, cfg),
    )


def warmup_cosine(warmup_steps, total_steps):
    """Multiplier for LambdaLR: linear warm-up then cosine decay to zero"""
    def schedule(step):
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = min(1.0, (step - warmup_steps) / max(1, total_steps - warmup_steps))
        return 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule


def build_optimizer(model, lr, weight_decay):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def sample_batch_masks(batch_size, h, w, rng, phase, mask_cfg):
    if phase.mask_mode is MaskMode.FULL_ONLY:
        masks = [gen_full_mask(h, w) for _ in range(batch_size)]
    else:
        masks = [sample_training_mask(h, w, rng, mask_cfg) for _ in range(batch_size)]
    return stack_masks(masks)


def choose_distortion(pool, rng, phase, plugins=(), plugin_probability=0.0):
    """Curriculum-gated pool draw; during fine-tuning a plugin replaces it with probability p"""
    if phase.distortions_on and plugins and plugin_probability > 0:
        if rng.random() < plugin_probability:
            name = plugins[int(rng.integers(0, len(plugins)))]
            return DistortionSpec(DistortionKind.PLUGIN, {'name': name}, int(rng.integers(0, 2 ** 31 - 1)))
    return sample_distortion(pool, rng, phase.distortions_on)


def forward_losses(model, images, masks, bits, phase, spec, cfg):
    """Encode → JND → fuse → distort → isolate → decode; returns (LossBundle, outputs)"""
    encoded = model.encode(images, bits, masks)
    if phase.jnd_on:
        wm = apply_jnd_modulation(images, encoded, cfg.train_mu)
    else:
        wm = encoded.clamp(-1.0, 1.0)
    fused = fuse(wm, images, masks)
    distorted, effective_mask = apply_distortion(fused, masks, spec)
    masked = isolate(distorted, effective_mask)
    mask_pd = model.decoder.predict_mask(distorted)
    logits = model.decoder.extract_bits(masked)
    losses = compute_losses(wm, images, logits, bits, mask_pd, effective_mask,
                            cfg.alpha, cfg.beta_enc, phase.beta_dec)
    outputs = {'wm': wm, 'mask': effective_mask, 'mask_pd': mask_pd, 'logits': logits}
    return losses, outputs


def _dump_divergence(dump_dir, step, losses, spec, images, masks, bits, model):
    path = Path(dump_dir) / f"divergence_step{step:07d}.joblib"
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump({
        'step': step,
        'losses': losses.as_floats(),
        'distortion': spec.describe(),
        'images': images.detach().cpu().numpy(),
        'masks': masks.detach().cpu().numpy(),
        'bits': bits.detach().cpu().numpy(),
        'model_state': {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()},
    }, path)
    return path


def train_step(model, optimizer, images, phase, rng, cfg, pool, mask_cfg, step=0,
               scheduler=None, plugins=(), plugin_probability=0.0, dump_dir=None):
    """One optimizer update on a batch of clean images; returns (LossBundle, metrics)"""
    device = images.device
    batch_size, _, h, w = images.shape
    masks = sample_batch_masks(batch_size, h, w, rng, phase, mask_cfg).to(device, images.dtype)
    bits = sample_messages(batch_size, model.message_length, rng).to(device, images.dtype)
    spec = choose_distortion(pool, rng, phase, plugins, plugin_probability)

    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses, out = forward_losses(model, images, masks, bits, phase, spec, cfg)
    if not losses.is_finite():
        dump = _dump_divergence(dump_dir, step, losses, spec, images, masks, bits, model) if dump_dir else None
        raise TrainingDivergedError(f"non-finite loss at step {step} ({spec.describe()}): {losses.as_floats()}",
                                    dump_path=dump)
    losses.l_total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()

    with torch.no_grad():
        metrics = {
            'bit_acc': bit_accuracy(bits_from_logits(out['logits']), bits),
            'iou': iou(binarize_mask(out['mask_pd']), out['mask']),
            'distortion': spec.describe(),
            'beta_dec': phase.beta_dec,
        }
    return losses, metrics


class ModelTrainer:
    """Owns model, optimizer, schedule and run directory for one training run"""

    def __init__(self, cfg, run_config=None, device=None):
        self.cfg = cfg
        self.run_config = run_config or cfg.to_run_config()
        self.config_digest = digest(self.run_config)
        self.device = get_device(device)
        self.run_dir = Path(cfg.run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.metrics_path = self.run_dir / "metrics.jsonl"

        set_seed(cfg.seed)
        self.model = WatermarkModel(cfg.model).to(self.device)
        self.optimizer = build_optimizer(self.model, cfg.lr, cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, warmup_cosine(cfg.warmup_steps, cfg.total_steps))
        self.pool = DistortionPool.from_dict(cfg.distortions)
        self.mask_cfg = MaskGenConfig.from_dict(cfg.masks).validate()
        self.plugins = ()
        self.plugin_probability = 0.0
        self.step = 0
        self.last_checkpoint = None
        self.phase = None

    def resume(self, path, restore_optimizer=True):
        metadata, payload = load_checkpoint(path, self.cfg.model, map_location=self.device)
        self.model.load_state_dict(payload['model'])
        if restore_optimizer and 'optimizer' in payload:
            self.optimizer.load_state_dict(payload['optimizer'])
            if 'scheduler' in payload:
                self.scheduler.load_state_dict(payload['scheduler'])
        self.step = int(metadata['step'])
        self.last_checkpoint = Path(path)
        logger.info(f"Resumed from {path} at step {self.step}")
        return metadata

    def step_rng(self, step=None):
        return np.random.default_rng([self.cfg.seed, self.step if step is None else step])

    def train_step(self, images):
        phase = curriculum_state(self.step, self.cfg)
        if self.phase is None or phase.name != self.phase.name:
            logger.info(f"Curriculum phase '{phase.name}' from step {self.step}")
        self.phase = phase
        losses, metrics = train_step(
            self.model, self.optimizer, images.to(self.device), phase, self.step_rng(), self.cfg,
            self.pool, self.mask_cfg, step=self.step, scheduler=self.scheduler,
            plugins=self.plugins, plugin_probability=self.plugin_probability, dump_dir=self.run_dir)
        self.step += 1
        return losses, metrics

    def _log_metrics(self, losses, metrics):
        record = {'step': self.step, 'lr': self.optimizer.param_groups[0]['lr'], 'phase': self.phase.name,
                  **losses.as_floats(), **metrics}
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def save(self):
        path = self.checkpoint_dir / checkpoint_filename(self.step)
        save_checkpoint(path, self.model, self.step, self.optimizer, self.scheduler,
                        run_config=self.run_config, config_digest=self.config_digest)
        prune_checkpoints(self.checkpoint_dir, self.cfg.keep_checkpoints)
        self.last_checkpoint = path
        return path

    def train(self, dataset=None, until=None):
        """Run steps up to ``until`` (default total_steps) and return the last checkpoint path"""
        until = self.cfg.total_steps if until is None else until
        if dataset is None:
            if not self.cfg.dataset:
                raise DatasetError("no dataset configured (train.dataset)")
            dataset = load_dataset(self.cfg.dataset, self.cfg.image_size, self.cfg.seed)

        loader = make_loader(dataset, self.cfg.batch_size, start_step=self.step,
                             num_workers=self.cfg.num_workers, prefetch_factor=self.cfg.prefetch_factor)
        batches = iter(loader)
        logger.info(f"Training {self.cfg.variant} model from step {self.step} to {until} "
                    f"(config {self.config_digest[:12]})")

        progress = tqdm(total=until, initial=self.step, desc="Training", unit="step")
        while self.step < until:
            losses, metrics = self.train_step(next(batches))
            progress.update(1)
            if self.step % self.cfg.log_every == 0 or self.step == until:
                self._log_metrics(losses, metrics)
                progress.set_postfix(loss=f"{losses.as_floats()['l_total']:.4f}", acc=f"{metrics['bit_acc']:.3f}")
            if self.step % self.cfg.checkpoint_every == 0 and self.step != until:
                self.save()
        progress.close()
        return self.save()


def train(cfg, dataset=None, run_config=None, resume=None, device=None):
    """Train from scratch (or from ``resume``) and return the final checkpoint path"""
    trainer = ModelTrainer(cfg, run_config=run_config, device=device)
    if resume == "latest":
        resume = latest_checkpoint(trainer.checkpoint_dir)
    if resume:
        trainer.resume(resume)
    return trainer.train(dataset)


def finetune(checkpoint, extra_distortion_plugins=(), cfg_overrides=None, dataset=None, device=None):
    """Continue a trained model with plugin distortions mixed into the pool.

    Plugins replace the pool draw with probability ``finetune.plugin_probability``;
    β_dec is held at ``finetune.beta_dec`` and the learning rate is constant.
    """
    metadata = read_checkpoint_metadata(checkpoint)
    missing = [name for name in extra_distortion_plugins if name not in registered_plugins()]
    if missing:
        raise DistortionError("not registered", plugin=missing[0])

    run_config = metadata.get('run_config') or {}
    run_config = validate_config(apply_overrides(run_config, cfg_overrides))
    options = run_config['finetune']
    start = int(metadata['step'])
    run_config = apply_overrides(run_config, {
        'train.total_steps': start + options['steps'],
        'train.beta_dec_override': options['beta_dec'],
        'train.lr': options['lr'],
    })
    cfg = TrainConfig.from_run_config(run_config)

    trainer = ModelTrainer(cfg, run_config=run_config, device=device)
    trainer.resume(checkpoint, restore_optimizer=False)
    trainer.scheduler = torch.optim.lr_scheduler.LambdaLR(trainer.optimizer, lambda _: 1.0)
    trainer.plugins = tuple(extra_distortion_plugins)
    trainer.plugin_probability = float(options['plugin_probability'])
    logger.info(f"Fine-tuning from step {start} for {options['steps']} steps with plugins "
                f"{list(trainer.plugins)} (p={trainer.plugin_probability})")
    return trainer.train(dataset)
