"""End-to-end training: codec pretrain, base pretrain + freeze, joint loop.

Per joint step: sample a batch and a patch mask, run the context-masked
encoder and the predictor, score the token prediction, build the
conditioning bundle from the predicted tokens, draw a flow sample from the
target frame's latent, score the velocity prediction (plus the decoded
single-step structural term), and take one combined optimizer step followed
by an EMA update of the target encoder. Every stochastic stream is owned by
the trainer and serialized into checkpoints, so a resumed full-precision run
reproduces the interrupted one bit for bit.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adapter import downsample_reference
from .config import TrainConfig
from .data import SequenceSample, build_synthetic_dataset, load_tile_dataset, split_dataset
from .flow import diffusion_loss, make_flow_sample, one_step_estimate
from .jepa_loss import jepa_loss
from .masking import sample_mask
from .pipeline import ForecastModel, save_checkpoint
from .schedules import ema_tau_at, lr_at, weight_decay_at

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    history: list[dict]
    base_digest_before: str
    base_digest_after: str
    codec_roundtrip_mse: float


def build_dataset(config: TrainConfig) -> list[SequenceSample]:
    data = config.data
    if data.source == "synthetic":
        return build_synthetic_dataset(
            data.num_sequences,
            data.steps_per_sequence,
            data.image_size,
            seed=config.seed,
            patch_size=config.jepa.patch_size,
            drift=data.drift,
        )
    if data.source == "tiles":
        return load_tile_dataset(data.root, data.manifest)
    raise ValueError(f"unknown data source {data.source!r}")


def _stack_frames(samples: list[SequenceSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    frames_t = torch.stack([s.frame_t for s in samples])
    frames_t1 = torch.stack([s.frame_t1 for s in samples])
    if all(s.target_embedding is not None for s in samples):
        foundation = torch.stack([s.target_embedding for s in samples])
    else:
        foundation = None
    return frames_t, frames_t1, foundation


def _autocast(config: TrainConfig):
    if config.precision == "reduced":
        return torch.autocast(device_type=config.device, dtype=torch.bfloat16)
    return contextlib.nullcontext()


def pretrain_codec(model: ForecastModel, frames: torch.Tensor, config: TrainConfig,
                   rng: np.random.Generator) -> float:
    """Reconstruction pretraining; freezes the codec and returns final MSE."""
    optimizer = torch.optim.Adam(model.codec.parameters(), lr=config.codec_pretrain_lr)
    batch = min(config.batch_size, len(frames))
    mse = float("inf")
    for _ in range(config.codec_pretrain_steps):
        idx = rng.choice(len(frames), size=batch, replace=False)
        x = frames[idx]
        recon = model.codec(x)
        loss = ((recon - x) ** 2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        mse = float(((model.codec(frames) - frames) ** 2).mean())
    model.codec.calibrate_latent_scale(frames)
    model.codec.freeze()
    logger.info("codec frozen after pretraining, roundtrip mse %.5f", mse)
    return mse


def pretrain_base(model: ForecastModel, frames: torch.Tensor, config: TrainConfig,
                  rng: np.random.Generator, gen: torch.Generator) -> None:
    """Brief unconditional velocity pretraining, then the base freezes."""
    optimizer = torch.optim.Adam(model.backbone.parameters(), lr=config.base_pretrain_lr)
    batch = min(config.batch_size, len(frames))
    for _ in range(config.base_pretrain_steps):
        idx = rng.choice(len(frames), size=batch, replace=False)
        with torch.no_grad():
            x0 = model.codec.encode(frames[idx])
        sample = make_flow_sample(x0, gen, distribution=config.diffusion.sigma_distribution)
        v_pred = model.backbone(sample.x_sigma, sample.sigma, cond=None)
        loss = ((v_pred - sample.v_star) ** 2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.backbone.freeze_base()
    logger.info("backbone base frozen after %d unconditional steps", config.base_pretrain_steps)


def _rng_state(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {
        "numpy": np_rng.bit_generator.state,
        "torch": torch_gen.get_state(),
    }


def _restore_rng(state: dict, np_rng: np.random.Generator, torch_gen: torch.Generator) -> None:
    np_rng.bit_generator.state = state["numpy"]
    torch_gen.set_state(state["torch"])


def joint_step(
    model: ForecastModel,
    batch: list[SequenceSample],
    config: TrainConfig,
    np_rng: np.random.Generator,
    torch_gen: torch.Generator,
) -> tuple[torch.Tensor, dict]:
    """One combined forward pass; returns (loss, log record)."""
    frames_t, frames_t1, foundation = _stack_frames(batch)
    mask = sample_mask(np_rng, model.jepa.num_patches, config.mask)
    target_idx = torch.as_tensor(mask.target_indices, dtype=torch.long)

    with _autocast(config):
        context_tokens = model.jepa.encode(frames_t, mask)
        predicted = model.jepa.predict_future(context_tokens, mask)
        with torch.no_grad():
            target_tokens = model.jepa.encode_target(frames_t1)
        projected = model.jepa.projection(predicted)
        jepa_total, jepa_terms = jepa_loss(
            predicted, target_tokens, projected, foundation,
            config.loss, target_indices=target_idx,
        )

        ref = downsample_reference(frames_t, config.adapter.coarse_size)
        bundle = model.adapter(predicted, ref, dropout_active=True, rng=np_rng)

        with torch.no_grad():
            x0 = model.codec.encode(frames_t1)
        flow = make_flow_sample(x0, torch_gen, distribution=config.diffusion.sigma_distribution)
        v_pred = model.backbone(flow.x_sigma, flow.sigma, bundle)
        preview = model.codec.decode(one_step_estimate(flow.x_sigma, flow.sigma, v_pred))
        diff_total, diff_terms = diffusion_loss(
            v_pred, flow.v_star, preview, frames_t1, config.diffusion.ssim_weight
        )
        loss = jepa_total + config.sd_loss_weight * diff_total

    record = {
        "jepa": jepa_terms,
        "diffusion": diff_terms,
        "loss": float(loss.detach()),
        "alpha": float(bundle.alpha.detach()),
        "reference_dropped": bundle.coarse_dropped,
        "pred_spatial_std": float(model.jepa.spatial_std(predicted.detach())),
    }
    return loss, record


def train(config: TrainConfig, *, resume: str | Path | None = None) -> TrainResult:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"

    torch.manual_seed(config.seed)
    model = ForecastModel(config)
    np_rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed + 1)

    dataset = build_dataset(config)
    train_set, _ = split_dataset(dataset, config.data.train_fraction, config.data.split_seed)
    if not train_set:
        raise ValueError("training split is empty")
    all_frames = torch.stack(
        [s.frame_t for s in train_set] + [s.frame_t1 for s in train_set]
    )

    steps_per_epoch = max(1, math.ceil(len(train_set) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch

    trainable = [
        {"params": [p for p in model.jepa.parameters() if p.requires_grad]},
        {"params": list(model.adapter.parameters())},
        {"params": model.backbone.lora_parameters() + model.backbone.conditioning_parameters()},
    ]

    start_step = 0
    history: list[dict] = []
    codec_mse = float("nan")

    if resume is not None:
        from .pipeline import load_checkpoint

        model, payload = load_checkpoint(resume, config)
        trainable = [
            {"params": [p for p in model.jepa.parameters() if p.requires_grad]},
            {"params": list(model.adapter.parameters())},
            {"params": model.backbone.lora_parameters() + model.backbone.conditioning_parameters()},
        ]
        model.codec.freeze()
        model.backbone.freeze_base()
        optimizer = torch.optim.AdamW(trainable, lr=config.base_lr)
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        if payload["rng_state"] is not None:
            _restore_rng(payload["rng_state"], np_rng, torch_gen)
        start_step = payload["step"]
        codec_mse = payload["extra"].get("codec_roundtrip_mse", float("nan"))
        digest_before = payload["extra"]["base_digest"]
    else:
        codec_mse = pretrain_codec(model, all_frames, config, np_rng)
        pretrain_base(model, all_frames, config, np_rng, torch_gen)
        optimizer = torch.optim.AdamW(trainable, lr=config.base_lr)
        digest_before = model.backbone.base_digest()

    log_mode = "a" if resume is not None else "w"
    checkpoint_path = out_dir / "checkpoint.pt"

    with open(log_path, log_mode) as log_file:
        for step in range(start_step, total_steps):
            lr = lr_at(step, config, steps_per_epoch=steps_per_epoch)
            wd = weight_decay_at(step, config, total_steps=total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
                group["weight_decay"] = wd

            idx = np_rng.choice(len(train_set), size=min(config.batch_size, len(train_set)), replace=False)
            batch = [train_set[i] for i in idx]
            loss, record = joint_step(model, batch, config, np_rng, torch_gen)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            tau = ema_tau_at(step, total_steps, config.ema_tau_base, config.ema_tau_final)
            model.jepa.ema_step(tau)

            record.update({"step": step, "lr": lr, "weight_decay": wd, "ema_tau": tau})
            history.append(record)
            log_file.write(json.dumps(record) + "\n")

            if (step + 1) % config.checkpoint_interval == 0 or step + 1 == total_steps:
                target = checkpoint_path
                if step + 1 != total_steps:
                    target = out_dir / f"checkpoint_step{step + 1}.pt"
                save_checkpoint(
                    target, model,
                    step=step + 1, optimizer=optimizer,
                    rng_state=_rng_state(np_rng, torch_gen),
                    extra={"base_digest": digest_before, "codec_roundtrip_mse": codec_mse},
                )

    digest_after = model.backbone.base_digest()
    if digest_after != digest_before:
        logger.error("frozen base weights changed during training")
    if start_step >= total_steps:
        save_checkpoint(
            checkpoint_path, model, step=start_step, optimizer=optimizer,
            rng_state=_rng_state(np_rng, torch_gen),
            extra={"base_digest": digest_before, "codec_roundtrip_mse": codec_mse},
        )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        history=history,
        base_digest_before=digest_before,
        base_digest_after=digest_after,
        codec_roundtrip_mse=codec_mse,
    )
