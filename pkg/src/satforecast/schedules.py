"""Per-step training schedules: learning rate, weight decay, EMA momentum."""

from __future__ import annotations

import math

from .config import TrainConfig


def lr_at(step: int, config: TrainConfig, *, steps_per_epoch: int) -> float:
    """Linear warmup start_lr -> base_lr, then cosine decay to final_lr.

    Exact at the three anchors: step 0, warmup end, final step.
    """
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step <= warmup:
        if step == 0:
            return config.start_lr if warmup > 0 else config.base_lr
        if step == warmup:
            return config.base_lr
        frac = step / warmup
        return config.start_lr + frac * (config.base_lr - config.start_lr)
    progress = (step - warmup) / max(total - warmup, 1)
    if progress >= 1.0:
        return config.final_lr
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.final_lr + cos * (config.base_lr - config.final_lr)


def weight_decay_at(step: int, config: TrainConfig, *, total_steps: int) -> float:
    """Cosine ramp from weight_decay_start to weight_decay_end, endpoint-exact."""
    progress = min(step / max(total_steps, 1), 1.0)
    if progress <= 0.0:
        return config.weight_decay_start
    if progress >= 1.0:
        return config.weight_decay_end
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.weight_decay_end + cos * (config.weight_decay_start - config.weight_decay_end)


def ema_tau_at(step: int, total_steps: int, tau_base: float = 0.999, tau_final: float = 1.0) -> float:
    """Linear momentum ramp: tau_t = tau_base + t * (tau_final - tau_base) / T."""
    step = min(step, total_steps)
    return tau_base + step * (tau_final - tau_base) / max(total_steps, 1)
