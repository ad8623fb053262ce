#!/usr/bin/env python3
"""
Main entry point for the MaskWM watermarking toolkit
"""

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.run_config import TrainConfig, config_digest, load_run_config
from config.settings import EVAL_BUCKETS, MASKS_DIR, REPORTS_DIR
from src.utils.helpers import ConfigError, MaskWMError, MessageLengthError, create_directory_structure

logger = logging.getLogger("maskwm")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def parse_overrides(pairs):
    """``key=value`` strings → dotted overrides; values parsed as JSON when possible"""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def load_plugin(reference):
    """Register ``module:callable`` (optionally ``name=module:callable``) as a distortion plugin"""
    from src.models.distortions import register_distortion_plugin

    name, _, target = reference.rpartition("=")
    module_name, sep, attr = target.partition(":")
    if not sep or not module_name or not attr:
        raise UsageError(f"plugin must be given as module:callable, got {reference!r}")
    try:
        fn = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise UsageError(f"cannot load plugin {reference!r}: {e}") from e
    name = name or attr
    register_distortion_plugin(name, fn)
    return name


def _effective_config(args, overrides):
    try:
        return load_run_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(e.errors)) from e


def _predictor(args):
    from src.models.predictor import WatermarkPredictor
    return WatermarkPredictor.from_checkpoint(args.checkpoint, device=args.device)


def cmd_train(args):
    from src.models.trainer import train

    overrides = parse_overrides(args.set)
    overrides.update({
        'train.dataset': args.dataset,
        'train.run_dir': args.run_dir,
        'train.total_steps': args.steps,
        'train.seed': args.seed,
        'model.variant': args.variant,
    })
    cfg = _effective_config(args, overrides)
    print(f"\n🔄 Training MaskWM-{cfg['model']['variant']} (config {config_digest(cfg)[:12]})")
    path = train(TrainConfig.from_run_config(cfg), run_config=cfg, resume=args.resume, device=args.device)
    print(f"✅ Final checkpoint: {path}")
    return EXIT_OK


def cmd_finetune(args):
    from src.models.trainer import finetune

    plugins = [load_plugin(ref) for ref in args.plugin or []]
    overrides = parse_overrides(args.set)
    overrides.update({
        'finetune.plugin_probability': args.probability,
        'finetune.steps': args.steps,
        'train.dataset': args.dataset,
        'train.run_dir': args.run_dir,
    })
    print(f"\n🔄 Fine-tuning {args.checkpoint} with plugins {plugins}")
    path = finetune(args.checkpoint, plugins, overrides, device=args.device)
    print(f"✅ Fine-tuned checkpoint: {path}")
    return EXIT_OK


def cmd_embed(args):
    from src.data.data_loader import load_image, save_image
    from src.data.masks import load_mask
    from src.models.codec import message_to_hex, parse_message
    from src.models.trainer import fuse

    predictor = _predictor(args)
    if args.variant and args.variant != predictor.variant:
        raise UsageError(f"--variant {args.variant} does not match the checkpoint's {predictor.variant} model")
    bits = parse_message(args.bits, predictor.model.message_length)
    image = load_image(args.input)

    if args.mask:
        mask = load_mask(args.mask, image.shape[-2], image.shape[-1])
        if predictor.variant == 'ED':
            wm = predictor.embed_local(image, bits, mask, args.mu)
        else:
            full = predictor.embed_global(image, bits, args.mu)
            wm = fuse(full[None], image.to(full.device)[None], mask.as_batch().to(full.device))[0]
    else:
        wm = predictor.embed_global(image, bits, args.mu)

    provenance = {**predictor.provenance, 'message_bits': predictor.model.message_length}
    out = save_image(wm, args.output, provenance)
    print(f"✅ Embedded {message_to_hex(bits)} into {out}")
    return EXIT_OK


def cmd_extract(args):
    from src.data.data_loader import load_image

    predictor = _predictor(args)
    image = load_image(args.input)
    if args.multi:
        result = predictor.extract_multi(image, args.threshold)
    else:
        result = predictor.locate_and_extract(image, args.threshold)

    mask_path = Path(args.mask_out) if args.mask_out else Path(args.input).with_name(Path(args.input).stem + "_mask.png")
    result.mask.to_png(mask_path, provenance=predictor.provenance)
    record = {**result.to_record(mask_path), **predictor.provenance}
    print(f"message: {result.message_hex}")
    print(f"confidence: {result.mean_mask_confidence:.4f}")
    if result.per_region is not None:
        for i, region in enumerate(result.per_region):
            print(f"region {i}: {region.message_hex} (confidence {region.confidence:.4f})")
    print(f"mask: {mask_path}")
    if args.record:
        Path(args.record).write_text(json.dumps(record, indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args):
    from src.data.data_loader import load_dataset
    from src.models.evaluator import ModelEvaluator, cached_local_eval_set

    cfg = _effective_config(args, parse_overrides(args.set))
    evaluation = cfg['evaluation']
    predictor = _predictor(args)
    for ref in args.plugin or []:
        load_plugin(ref)
    seed = evaluation['seed'] if args.seed is None else args.seed
    dataset = load_dataset(args.dataset, predictor.model.image_size, seed)
    image_ids = list(range(len(dataset)))[:args.limit] if args.limit else list(range(len(dataset)))
    evaluator = ModelEvaluator(predictor, dataset, seed=seed, config_digest=config_digest(cfg))
    suites = args.suite or ['none']
    out_dir = Path(args.out or REPORTS_DIR)

    if args.protocol in ("local", "calibrate"):
        clean_ids = image_ids[:evaluation['calibration_images']]
        calibration = evaluator.calibrate(clean_ids, evaluation['calibration_percentile'])
        print(f"🎯 Calibration threshold {evaluator.calibration['confidence_threshold']:.4f} "
              f"(p{evaluator.calibration['percentile']:g} over {len(clean_ids)} clean images)")

    if args.protocol == "calibrate":
        report = calibration
    elif args.protocol == "multi":
        report = evaluator.evaluate_multi_watermark(
            image_ids, tuple(evaluation['multi_n_range']), evaluation['multi_area_fraction'], suites)
    elif args.protocol == "global":
        report = evaluator.evaluate_global(image_ids, suites)
    else:
        eval_set = cached_local_eval_set(
            image_ids, args.mask_source or evaluation['mask_source'], EVAL_BUCKETS,
            args.per_bucket or evaluation['per_bucket'], seed, predictor.model.image_size,
            cache_dir=out_dir / "cache", max_attempts=evaluation['max_mask_attempts'])
        if args.protocol == "strategies":
            report = evaluator.evaluate_masking_strategies(eval_set)
        else:
            report = evaluator.evaluate_robustness(eval_set, suites)

    paths = report.save(out_dir, prefix=args.protocol)
    print(f"\n📊 {args.protocol} evaluation ({len(report.rows)} rows, {len(report.failures)} failures)")
    print(report.summary().to_string(index=False))
    for key, value in report.global_quality().items():
        print(f"  {key}: {value:.4f}")
    print(f"✅ Report: {paths['json']}")
    return EXIT_OK


def cmd_make_masks(args):
    import numpy as np

    from src.data.masks import (
        MaskGenConfig, gen_full_mask, gen_irregular_mask, gen_rectangle_mask, gen_segment_mask,
        multi_region_layout, sample_training_mask, union_masks,
    )

    cfg = _effective_config(args, parse_overrides(args.set))
    mask_cfg = MaskGenConfig.from_dict(cfg['masks'])
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out or MASKS_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {'config_digest': config_digest(cfg), 'seed': args.seed}
    size = args.size

    if args.layout:
        regions = multi_region_layout(args.layout, size, size, args.area)
        for i, region in enumerate(regions):
            region.to_png(out_dir / f"layout{args.layout}_region{i}.png", provenance=provenance)
        union_masks(regions).to_png(out_dir / f"layout{args.layout}_union.png", provenance=provenance)
        print(f"✅ Wrote {len(regions)} layout regions to {out_dir}")
        return EXIT_OK

    generators = {
        'full': lambda: gen_full_mask(size, size),
        'rectangle': lambda: gen_rectangle_mask(size, size, rng, mask_cfg),
        'irregular': lambda: gen_irregular_mask(size, size, rng, mask_cfg),
        'segment': lambda: gen_segment_mask(size, size, rng, mask_cfg),
        'training': lambda: sample_training_mask(size, size, rng, mask_cfg),
    }
    for i in range(args.count):
        mask = generators[args.kind]()
        mask.to_png(out_dir / f"{args.kind}_{i:04d}_{mask.kind.value}.png", provenance=provenance)
    print(f"✅ Wrote {args.count} {args.kind} masks to {out_dir}")
    return EXIT_OK


def cmd_validate_config(args):
    from config.run_config import validate_config

    source = args.config_file or args.config
    try:
        cfg = validate_config(source, parse_overrides(args.set))
    except ConfigError as e:
        print(f"❌ {len(e.errors)} problem(s) in {source}:")
        for error in e.errors:
            print(f"  - {error}")
        return EXIT_FAILURE
    print(json.dumps(cfg, indent=2, sort_keys=True))
    print(f"✅ Valid (digest {config_digest(cfg)})", file=sys.stderr)
    return EXIT_OK


def cmd_info(args):
    from src.data.checkpoint import get_checkpoint_info

    print("\n📋 Checkpoint Information:")
    for key, value in get_checkpoint_info(args.checkpoint).items():
        print(f"  {key}: {value}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="maskwm", description="Mask-guided image watermarking toolkit")
    parser.add_argument("--config", help="run config JSON (default: $MASKWM_CONFIG)")
    parser.add_argument("--device", help="torch device, e.g. cpu or cuda:0")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_overrides(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (dotted key)")
        return p

    p = with_overrides(sub.add_parser("train", help="train a model"))
    p.add_argument("--dataset", help="directory of training images")
    p.add_argument("--run-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=["D", "ED"])
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint path or 'latest'")
    p.set_defaults(func=cmd_train)

    p = with_overrides(sub.add_parser("finetune", help="fine-tune with plugin distortions"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plugin", action="append", help="[name=]module:callable")
    p.add_argument("--probability", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--dataset")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="embed a message into an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--bits", required=True, help="message as hex (MSB first) or 0b-prefixed binary")
    p.add_argument("--mask", help="PNG mask; white marks the region to watermark")
    p.add_argument("--mu", type=float, help="JND strength (default 1.3 for D, 1.75 for ED)")
    p.add_argument("--variant", choices=["D", "ED"], help="expected model variant")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="locate the watermark and decode its message")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask-out")
    p.add_argument("--threshold", type=float)
    p.add_argument("--multi", action="store_true", help="decode every connected region separately")
    p.add_argument("--record", help="write a JSON result record here")
    p.set_defaults(func=cmd_extract)

    p = with_overrides(sub.add_parser("evaluate", help="run an evaluation protocol"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocol", choices=["local", "global", "multi", "strategies", "calibrate"], default="local")
    p.add_argument("--suite", action="append", choices=["none", "valuemetric", "geometric", "per-distortion"])
    p.add_argument("--mask-source", choices=["rectangle", "irregular", "segment"])
    p.add_argument("--per-bucket", type=int)
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--plugin", action="append", help="[name=]module:callable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = with_overrides(sub.add_parser("make-masks", help="render masks for inspection"))
    p.add_argument("--kind", choices=["full", "rectangle", "irregular", "segment", "training"], default="training")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", type=int, choices=range(1, 6), help="render an N-region layout instead")
    p.add_argument("--area", type=float, default=0.05, help="area fraction per layout region")
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_masks)

    p = with_overrides(sub.add_parser("validate-config", help="check a run config and print it resolved"))
    p.add_argument("config_file", nargs="?")
    p.set_defaults(func=cmd_validate_config)

    p = sub.add_parser("info", help="show checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def dispatch(argv=None):
    """Run one command; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    try:
        create_directory_structure()
        return args.func(args)
    except (UsageError, MessageLengthError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MaskWMError, OSError, ValueError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main():
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
