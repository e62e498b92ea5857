"""Command-line entry point.

Subcommands: train, evaluate, ablate, rollout, synth-data. All accept
--config pointing at a YAML profile; flags override config fields.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import ablation as ablation_mod
from . import evaluate as evaluate_mod
from .config import TrainConfig, load_config, save_config, toy_config
from .data import export_synthetic_dataset, split_dataset
from .pipeline import load_checkpoint
from .rollout import blur_predictor, frame_strip, persistence_predictor, rollout
from .trainer import build_dataset, train

logger = logging.getLogger(__name__)


def _load_profile(args) -> TrainConfig:
    if args.config:
        config = load_config(args.config)
    elif getattr(args, "toy", False):
        config = toy_config()
    else:
        config = TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _cmd_train(args) -> int:
    config = _load_profile(args)
    if args.out:
        config = dataclasses.replace(config, out_dir=args.out)
    result = train(config, resume=args.checkpoint)
    save_config(config, Path(config.out_dir) / "config.yaml")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log:        {result.log_path}")
    print(f"codec roundtrip mse: {result.codec_roundtrip_mse:.5f}")
    frozen = result.base_digest_before == result.base_digest_after
    print(f"frozen base digest unchanged: {frozen}")
    return 0 if frozen else 1


def _cmd_evaluate(args) -> int:
    config = _load_profile(args)
    model = None
    if args.baseline != "persistence":
        model, _ = load_checkpoint(args.checkpoint, config)
    dataset = build_dataset(config)
    _, val = split_dataset(dataset, config.data.train_fraction, config.data.split_seed)
    samples = val or dataset
    if args.baseline == "persistence":
        report = evaluate_mod.evaluate(
            None, samples, sampler_seed=config.seed,
            predict_fn=evaluate_mod.persistence_predict, feature_fn=None,
        )
        label = "persistence"
    else:
        report = evaluate_mod.evaluate(model, samples, sampler_seed=config.seed)
        label = "checkpoint"
    print(evaluate_mod.REPORT_HEADER)
    print(evaluate_mod.format_report_row(label, report))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def _cmd_ablate(args) -> int:
    config = _load_profile(args)
    variants = args.variants.split(",")
    results = ablation_mod.run_ablation(variants, args.epochs, config)
    out_dir = Path(args.out or Path(config.out_dir) / "ablation")
    ablation_mod.write_ablation_outputs(results, out_dir)
    print(f"{'variant':<8} {'final cos':>10} {'final spatial std':>18}")
    for vid, curves in results.items():
        print(f"{vid:<8} {curves.cosine_similarity[-1]:>10.4f} {curves.final_spatial_std:>18.5f}")
    print(f"curves written to {out_dir}")
    return 0


def _cmd_rollout(args) -> int:
    config = _load_profile(args)
    model, _ = load_checkpoint(args.checkpoint, config)
    dataset = build_dataset(config)
    sample = dataset[args.index]
    seed_frame = sample.frame_t

    def model_step(frame: torch.Tensor, step_seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(step_seed)
        return model.predict_next(frame, generator=gen, steps=args.steps, strength=args.strength)

    traces = {
        "model": rollout(model_step, seed_frame, args.horizon, config.seed),
        "blur-stub": rollout(lambda f, s: blur_predictor(f), seed_frame, args.horizon, config.seed),
        "persistence": rollout(lambda f, s: persistence_predictor(f), seed_frame, args.horizon, config.seed),
    }

    out_dir = Path(args.out or Path(config.out_dir) / "rollout")
    out_dir.mkdir(parents=True, exist_ok=True)
    strip = frame_strip({label: trace.frames for label, trace in traces.items()})
    try:
        from PIL import Image

        Image.fromarray((strip * 255).astype(np.uint8)).save(out_dir / "rollout_strip.png")
    except OSError as exc:
        logger.warning("could not write rollout strip: %s", exc)

    table = {
        label: {"hf_energy_ratio": trace.hf_ratios, "global_std": trace.global_std}
        for label, trace in traces.items()
    }
    (out_dir / "rollout_diagnostics.json").write_text(json.dumps(table, indent=2))
    print(f"{'step':>4}  " + "  ".join(f"{label:>12}" for label in traces))
    for k in range(args.horizon):
        print(f"{k:>4}  " + "  ".join(f"{traces[label].hf_ratios[k]:>12.4f}" for label in traces))
    print(f"outputs written to {out_dir}")
    return 0


def _cmd_synth_data(args) -> int:
    manifest = export_synthetic_dataset(
        args.out, args.sequences, args.steps_per_sequence, args.size, seed=args.seed or 0
    )
    print(f"manifest: {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satforecast")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full training pipeline")
    p_train.add_argument("--config", type=str, default=None)
    p_train.add_argument("--toy", action="store_true", help="use the desk-scale profile")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--checkpoint", type=str, default=None, help="resume from an archive")
    p_train.add_argument("--out", type=str, default=None)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="metric suite over the validation split")
    p_eval.add_argument("--config", type=str, default=None)
    p_eval.add_argument("--toy", action="store_true")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--checkpoint", type=str, default=None)
    p_eval.add_argument("--baseline", choices=["none", "persistence"], default="none")
    p_eval.add_argument("--out", type=str, default=None)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="loss-component ablation harness")
    p_abl.add_argument("--config", type=str, default=None)
    p_abl.add_argument("--toy", action="store_true")
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--variants", type=str, default="C,E")
    p_abl.add_argument("--epochs", type=int, default=20)
    p_abl.add_argument("--out", type=str, default=None)
    p_abl.set_defaults(func=_cmd_ablate)

    p_roll = sub.add_parser("rollout", help="autoregressive multi-step inference")
    p_roll.add_argument("--config", type=str, default=None)
    p_roll.add_argument("--toy", action="store_true")
    p_roll.add_argument("--seed", type=int, default=None)
    p_roll.add_argument("--checkpoint", type=str, required=True)
    p_roll.add_argument("--horizon", type=int, default=6)
    p_roll.add_argument("--steps", type=int, default=None)
    p_roll.add_argument("--strength", type=float, default=None)
    p_roll.add_argument("--index", type=int, default=0, help="dataset sample for the seed frame")
    p_roll.add_argument("--out", type=str, default=None)
    p_roll.set_defaults(func=_cmd_rollout)

    p_synth = sub.add_parser("synth-data", help="write a synthetic tile store to disk")
    p_synth.add_argument("--out", type=str, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--sequences", type=int, default=8)
    p_synth.add_argument("--steps-per-sequence", type=int, default=5)
    p_synth.add_argument("--size", type=int, default=128)
    p_synth.set_defaults(func=_cmd_synth_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
