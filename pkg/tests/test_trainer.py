# Tests for the training pipeline, curriculum and fine-tuning
import json
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from config.run_config import TrainConfig
from src.data.checkpoint import list_checkpoints, read_checkpoint_metadata
from src.data.data_loader import load_dataset
from src.data.masks import MaskGenConfig
from src.models.distortions import (
    IDENTITY, DistortionKind, DistortionPool, register_distortion_plugin, unregister_distortion_plugin,
)
from src.models.trainer import (
    MaskMode, ModelTrainer, PhaseConfig, beta_dec_at, build_optimizer, choose_distortion, compute_losses,
    curriculum_state, finetune, forward_losses, fuse, isolate, train_step, warmup_cosine,
)
from src.models.watermark_model import WatermarkModel
from src.utils.helpers import DistortionError, TrainingDivergedError
from tests.fixtures import tiny_model_config, tiny_train_config, write_images


class TestFuseIsolate(unittest.TestCase):

    def setUp(self):
        self.wm = torch.ones(1, 3, 4, 4)
        self.orig = torch.zeros(1, 3, 4, 4)

    def test_fuse_selects_by_mask(self):
        mask = torch.zeros(1, 1, 4, 4)
        mask[..., :2, :] = 1.0
        fused = fuse(self.wm, self.orig, mask)
        self.assertTrue(bool((fused[..., :2, :] == 1).all()))
        self.assertTrue(bool((fused[..., 2:, :] == 0).all()))

    def test_full_and_empty_mask(self):
        self.assertTrue(torch.equal(fuse(self.wm, self.orig, torch.ones(1, 1, 4, 4)), self.wm))
        self.assertTrue(torch.equal(fuse(self.wm, self.orig, torch.zeros(1, 1, 4, 4)), self.orig))

    def test_isolate_zeroes_outside(self):
        mask = torch.zeros(1, 1, 4, 4)
        mask[..., 0, 0] = 1.0
        out = isolate(self.wm, mask)
        self.assertEqual(float(out.sum()), 3.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            fuse(self.wm, torch.zeros(1, 3, 4, 5), torch.ones(1, 1, 4, 4))
        with self.assertRaises(ValueError):
            isolate(self.wm, torch.ones(1, 1, 2, 2))


class TestLosses(unittest.TestCase):

    def test_weighted_total(self):
        wm = torch.full((1, 3, 2, 2), 0.5)
        orig = torch.zeros(1, 3, 2, 2)
        logits = torch.tensor([[1.0, 0.0]])
        bits = torch.tensor([[0.0, 0.0]])
        mask_pd = torch.full((1, 1, 2, 2), 0.5)
        mask_gt = torch.ones(1, 1, 2, 2)
        losses = compute_losses(wm, orig, logits, bits, mask_pd, mask_gt, alpha=0.5, beta_enc=1.0, beta_dec=2.0)
        self.assertAlmostEqual(float(losses.l_enc), 0.25)
        self.assertAlmostEqual(float(losses.l_bits), 0.5)
        self.assertAlmostEqual(float(losses.l_mask), 0.25)
        self.assertAlmostEqual(float(losses.l_dec), 0.625)
        self.assertAlmostEqual(float(losses.l_total), 0.25 + 2.0 * 0.625)
        self.assertTrue(losses.is_finite())

    def test_shape_checks(self):
        with self.assertRaises(ValueError):
            compute_losses(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 2), torch.zeros(1, 2), torch.zeros(1, 3),
                           torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), 0.5, 1.0, 1.0)


class TestCurriculum(unittest.TestCase):

    def setUp(self):
        self.cfg = TrainConfig()

    def test_initial_phase(self):
        phase = curriculum_state(0, self.cfg)
        self.assertEqual(phase.mask_mode, MaskMode.FULL_ONLY)
        self.assertFalse(phase.distortions_on)
        self.assertFalse(phase.jnd_on)
        self.assertEqual(phase.beta_dec, 20.0)

    def test_linear_decay(self):
        self.assertAlmostEqual(curriculum_state(300, self.cfg).beta_dec, 18.812, places=6)
        self.assertAlmostEqual(beta_dec_at(5_000, self.cfg), 0.2)
        self.assertAlmostEqual(beta_dec_at(50_000, self.cfg), 0.2)

    def test_thresholds(self):
        self.assertEqual(curriculum_state(499, self.cfg).mask_mode, MaskMode.FULL_ONLY)
        self.assertEqual(curriculum_state(500, self.cfg).mask_mode, MaskMode.ALL_TYPES)
        self.assertFalse(curriculum_state(999, self.cfg).distortions_on)
        self.assertTrue(curriculum_state(1_000, self.cfg).distortions_on)
        self.assertFalse(curriculum_state(4_999, self.cfg).jnd_on)
        self.assertTrue(curriculum_state(5_000, self.cfg).jnd_on)

    def test_phase_names(self):
        names = [curriculum_state(step, self.cfg).name for step in (0, 499, 500, 999, 1_000, 4_999, 5_000)]
        self.assertEqual(names, ['full_mask', 'full_mask', 'all_masks', 'all_masks', 'distorted', 'distorted', 'jnd'])

    def test_all_mask_phase_holds_distortions_back(self):
        self.cfg.all_masks_until = 1_500
        self.assertFalse(curriculum_state(1_200, self.cfg).distortions_on)
        self.assertEqual(curriculum_state(1_200, self.cfg).mask_mode, MaskMode.ALL_TYPES)
        self.assertTrue(curriculum_state(1_500, self.cfg).distortions_on)

    def test_step_out_of_range(self):
        with self.assertRaises(ValueError):
            curriculum_state(-1, self.cfg)
        with self.assertRaises(ValueError):
            curriculum_state(self.cfg.total_steps + 1, self.cfg)

    def test_override_holds_constant(self):
        self.cfg.beta_dec_override = 0.3
        self.assertEqual(curriculum_state(0, self.cfg).beta_dec, 0.3)
        self.assertEqual(curriculum_state(300, self.cfg).beta_dec, 0.3)

    def test_warmup_cosine(self):
        schedule = warmup_cosine(10, 110)
        self.assertAlmostEqual(schedule(0), 0.1)
        self.assertAlmostEqual(schedule(10), 1.0)
        self.assertAlmostEqual(schedule(60), 0.5)
        self.assertAlmostEqual(schedule(110), 0.0)


class TestDistortionChoice(unittest.TestCase):

    def setUp(self):
        self.pool = DistortionPool.from_dict({'specs': [{'kind': 'jpeg', 'params': {'quality': 50}}]})
        self.on = PhaseConfig(MaskMode.ALL_TYPES, True, True, 1.0)
        self.off = PhaseConfig(MaskMode.ALL_TYPES, False, True, 1.0)

    def test_plugin_with_certainty(self):
        spec = choose_distortion(self.pool, np.random.default_rng(0), self.on, ('blur',), 1.0)
        self.assertEqual(spec.kind, DistortionKind.PLUGIN)
        self.assertEqual(spec.name, 'blur')

    def test_no_plugin_probability(self):
        spec = choose_distortion(self.pool, np.random.default_rng(0), self.on, ('blur',), 0.0)
        self.assertEqual(spec.kind, DistortionKind.JPEG)

    def test_distortions_off(self):
        self.assertIs(choose_distortion(self.pool, np.random.default_rng(0), self.off, ('blur',), 1.0), IDENTITY)


class TestGradients(unittest.TestCase):
    """Finite-difference check of the loss through the full embed/decode pipeline"""

    class _Pipeline(nn.Module):
        def __init__(self, model, cfg):
            super().__init__()
            self.model = model
            self.cfg = cfg

        def forward(self, images, masks, bits):
            phase = PhaseConfig(MaskMode.ALL_TYPES, False, False, 1.0)
            losses, _ = forward_losses(self.model, images, masks, bits, phase, IDENTITY, self.cfg)
            return losses.l_total

    def _batch(self):
        images = (torch.rand(1, 3, 16, 16, dtype=torch.float64) - 0.5)
        masks = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
        masks[..., :, :8] = 1.0
        bits = torch.tensor([[1.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        return images, masks, bits

    def test_central_differences_per_module(self):
        torch.manual_seed(0)
        model = WatermarkModel(tiny_model_config('ED')).double().eval()
        pipeline = self._Pipeline(model, TrainConfig())
        batch = self._batch()
        pipeline(*batch).backward()

        rng = np.random.default_rng(0)
        eps = 1e-6
        modules = ('model.encoder', 'model.message_encoder', 'model.decoder.message_decoder',
                   'model.decoder.localizer', 'model.decoder.extractor')
        for prefix in modules:
            weights = [(n, p) for n, p in pipeline.named_parameters() if n.startswith(prefix + '.') and p.dim() > 1]
            self.assertTrue(weights, prefix)
            for _ in range(5):
                name, param = weights[int(rng.integers(0, len(weights)))]
                idx = int(rng.integers(0, param.numel()))
                analytic = float(param.grad.reshape(-1)[idx])
                flat = param.data.view(-1)
                original = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = original + eps
                    up = float(pipeline(*batch))
                    flat[idx] = original - eps
                    down = float(pipeline(*batch))
                    flat[idx] = original
                numeric = (up - down) / (2 * eps)
                with self.subTest(parameter=name, index=idx):
                    self.assertLessEqual(abs(numeric - analytic), 1e-3 * max(abs(numeric), abs(analytic)) + 1e-8)

    def test_gradcheck_on_biases(self):
        torch.manual_seed(0)
        model = WatermarkModel(tiny_model_config()).double().eval()
        pipeline = self._Pipeline(model, TrainConfig())
        images, masks, bits = self._batch()
        names = ('model.encoder.unet.head.bias', 'model.decoder.message_decoder.head.2.bias',
                 'model.decoder.localizer.fuse.bias')
        state = dict(pipeline.named_parameters())
        inputs = tuple(state[n].detach().clone().requires_grad_(True) for n in names)

        def loss(*biases):
            return functional_call(pipeline, dict(zip(names, biases)), (images, masks, bits))

        self.assertTrue(torch.autograd.gradcheck(loss, inputs, eps=1e-6, atol=1e-5))


class TestTrainStep(unittest.TestCase):

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.cfg = tiny_train_config(self.temp_dir / "run")
        self.mask_cfg = MaskGenConfig.from_dict(self.cfg.masks)
        self.pool = DistortionPool.from_dict(self.cfg.distortions)
        torch.manual_seed(0)
        self.images = torch.rand(2, 3, 16, 16) * 2 - 1

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_zero_learning_rate_is_a_no_op(self):
        torch.manual_seed(1)
        model = WatermarkModel(self.cfg.model)
        before = {k: v.detach().clone() for k, v in model.named_parameters()}
        optimizer = build_optimizer(model, lr=0.0, weight_decay=0.01)
        phase = curriculum_state(4, self.cfg)
        train_step(model, optimizer, self.images, phase, np.random.default_rng(0), self.cfg,
                   self.pool, self.mask_cfg, step=4)
        for name, param in model.named_parameters():
            self.assertTrue(torch.equal(param, before[name]), name)

    def test_step_reports_metrics(self):
        model = WatermarkModel(self.cfg.model)
        optimizer = build_optimizer(model, lr=1e-3, weight_decay=0.0)
        phase = curriculum_state(4, self.cfg)
        losses, metrics = train_step(model, optimizer, self.images, phase, np.random.default_rng(0), self.cfg,
                                     self.pool, self.mask_cfg, step=4)
        self.assertTrue(losses.is_finite())
        self.assertGreaterEqual(metrics['bit_acc'], 0.0)
        self.assertLessEqual(metrics['bit_acc'], 1.0)
        self.assertEqual(metrics['beta_dec'], phase.beta_dec)
        self.assertIn('distortion', metrics)

    def test_same_seed_same_step(self):
        a = ModelTrainer(self.cfg, device="cpu")
        b = ModelTrainer(self.cfg, device="cpu")
        loss_a, _ = a.train_step(self.images)
        loss_b, _ = b.train_step(self.images)
        self.assertEqual(loss_a.as_floats(), loss_b.as_floats())

    def test_head_only_training_does_not_increase_bit_loss(self):
        torch.manual_seed(2)
        model = WatermarkModel(self.cfg.model)
        head = model.decoder.message_decoder.head
        for param in model.parameters():
            param.requires_grad_(False)
        for param in head.parameters():
            param.requires_grad_(True)
        optimizer = torch.optim.SGD(head.parameters(), lr=1e-3)
        phase = PhaseConfig(MaskMode.FULL_ONLY, False, False, 1.0)
        history = []
        for step in range(30):
            losses, _ = train_step(model, optimizer, self.images, phase, np.random.default_rng(0), self.cfg,
                                   self.pool, self.mask_cfg, step=step)
            history.append(float(losses.l_bits))
        for before, after in zip(history, history[1:]):
            self.assertLessEqual(after, before + 1e-7)
        self.assertLess(history[-1], history[0])

    def test_divergence_is_reported(self):
        model = WatermarkModel(self.cfg.model)
        optimizer = build_optimizer(model, lr=1e-3, weight_decay=0.0)
        phase = curriculum_state(0, self.cfg)
        images = torch.full((2, 3, 16, 16), float('nan'))
        with self.assertRaises(TrainingDivergedError) as ctx:
            train_step(model, optimizer, images, phase, np.random.default_rng(0), self.cfg,
                       self.pool, self.mask_cfg, step=0, dump_dir=self.temp_dir)
        self.assertTrue(Path(ctx.exception.dump_path).exists())


class TestTrainingRun(unittest.TestCase):
    """Short end-to-end runs on a folder of random images"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        image_dir = self.temp_dir / "images"
        image_dir.mkdir()
        write_images(image_dir, count=5)
        self.dataset = load_dataset(image_dir, 16, seed=7)

    def tearDown(self):
        unregister_distortion_plugin('negate')
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_checkpoints_and_metrics(self):
        cfg = tiny_train_config(self.temp_dir / "run")
        final = ModelTrainer(cfg, device="cpu").train(self.dataset)
        self.assertEqual(read_checkpoint_metadata(final)['step'], 6)
        steps = [step for step, _ in list_checkpoints(self.temp_dir / "run" / "checkpoints")]
        self.assertEqual(steps, [3, 6])
        lines = (self.temp_dir / "run" / "metrics.jsonl").read_text().splitlines()
        self.assertEqual(len(lines), 6)
        self.assertEqual(json.loads(lines[-1])['step'], 6)
        phases = [json.loads(line)['phase'] for line in lines]
        self.assertEqual(phases, ['full_mask', 'full_mask', 'all_masks', 'distorted', 'jnd', 'jnd'])

    def test_hundred_steps_are_reproducible(self):
        runs = []
        for name in ("a", "b"):
            cfg = tiny_train_config(self.temp_dir / name, total_steps=100, warmup_steps=10, checkpoint_every=50,
                                    log_every=10)
            trainer = ModelTrainer(cfg, device="cpu")
            trainer.train(self.dataset)
            lines = (self.temp_dir / name / "metrics.jsonl").read_text().splitlines()
            runs.append(([json.loads(line) for line in lines], trainer.model.state_dict()))
        (records_a, state_a), (records_b, state_b) = runs
        self.assertEqual(len(records_a), 10)
        self.assertEqual(records_a, records_b)
        for key in state_a:
            self.assertTrue(torch.equal(state_a[key], state_b[key]), key)

    def test_resume_matches_uninterrupted_run(self):
        straight = ModelTrainer(tiny_train_config(self.temp_dir / "a"), device="cpu")
        straight.train(self.dataset)

        first = ModelTrainer(tiny_train_config(self.temp_dir / "b"), device="cpu")
        halfway = first.train(self.dataset, until=3)
        resumed = ModelTrainer(tiny_train_config(self.temp_dir / "b"), device="cpu")
        resumed.resume(halfway)
        resumed.train(self.dataset)

        for (name, a), (_, b) in zip(straight.model.state_dict().items(), resumed.model.state_dict().items()):
            self.assertTrue(torch.allclose(a.float(), b.float(), atol=1e-6), name)

    def test_finetune_with_plugin(self):
        cfg = tiny_train_config(self.temp_dir / "run")
        base = ModelTrainer(cfg, device="cpu").train(self.dataset)

        with self.assertRaises(DistortionError):
            finetune(base, ['negate'], dataset=self.dataset, device="cpu")

        register_distortion_plugin('negate', lambda img: -img)
        final = finetune(base, ['negate'], {'finetune.steps': 2, 'finetune.lr': 5e-4},
                         dataset=self.dataset, device="cpu")
        metadata = read_checkpoint_metadata(final)
        self.assertEqual(metadata['step'], 8)
        self.assertEqual(metadata['run_config']['train']['beta_dec_override'], 0.3)


if __name__ == '__main__':
    unittest.main()
