"""Loss-component ablation harness.

Trains the token-prediction module (encoder, predictor, projection, EMA
target) under several loss-term configurations with identical seeds and
data, and records validation cosine similarity to the targets plus the
embedding spatial standard deviation per epoch. Variant E is the full
objective; the A-D variants progressively disable terms, with C the
collapse-prone control (no spatial-variance and no contrastive term).
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import SequenceSample
from .jepa import TemporalJepa
from .jepa_loss import jepa_loss
from .masking import full_mask, sample_mask
from .schedules import ema_tau_at
from .trainer import _stack_frames, build_dataset
from .data import split_dataset


@dataclass(frozen=True)
class AblationVariant:
    variant_id: str
    use_l1: bool = True
    use_cosine: bool = True
    use_spatial: bool = True
    use_contrastive: bool = True
    use_feature_regression: bool = True


VARIANTS = {
    "A": AblationVariant("A", use_cosine=False, use_spatial=False,
                         use_contrastive=False, use_feature_regression=False),
    "B": AblationVariant("B", use_spatial=False, use_contrastive=False,
                         use_feature_regression=False),
    "C": AblationVariant("C", use_spatial=False, use_contrastive=False),
    "D": AblationVariant("D", use_contrastive=False),
    "E": AblationVariant("E"),
}


@dataclass
class VariantCurves:
    variant_id: str
    cosine_similarity: list[float]
    spatial_std: list[float]
    step0_terms: dict[str, float]

    @property
    def final_spatial_std(self) -> float:
        return self.spatial_std[-1]


def _variant_weights(variant: AblationVariant, config: TrainConfig):
    w = config.loss
    return replace(
        w,
        l1=w.l1 if variant.use_l1 else 0.0,
        cosine=w.cosine if variant.use_cosine else 0.0,
        spatial_variance=w.spatial_variance if variant.use_spatial else 0.0,
        contrastive=w.contrastive if variant.use_contrastive else 0.0,
        feature_regression=w.feature_regression if variant.use_feature_regression else 0.0,
    )


@torch.no_grad()
def _validation_stats(model: TemporalJepa, val: list[SequenceSample]) -> tuple[float, float]:
    frames_t, frames_t1, _ = _stack_frames(val)
    mask = full_mask(model.num_patches)
    predicted = model.predict_future(model.encode(frames_t), mask)
    target = model.encode_target(frames_t1)
    cos = float(F.cosine_similarity(predicted, target, dim=-1).mean())
    std = float(model.spatial_std(predicted))
    return cos, std


def run_ablation(
    variants: list[str | AblationVariant],
    epochs: int,
    config: TrainConfig,
) -> dict[str, VariantCurves]:
    """Identical seed/data training of each variant; per-epoch curves."""
    resolved = [VARIANTS[v] if isinstance(v, str) else v for v in variants]
    if len(resolved) < 2 or not any(v.variant_id == "E" for v in resolved):
        raise ValueError("ablation needs at least two variants including E")

    dataset = build_dataset(config)
    train_set, val_set = split_dataset(dataset, config.data.train_fraction, config.data.split_seed)
    if not val_set:
        val_set = train_set

    steps_per_epoch = max(1, math.ceil(len(train_set) / config.batch_size))
    total_steps = epochs * steps_per_epoch

    torch.manual_seed(config.seed)
    reference_model = TemporalJepa(config.jepa, config.data.image_size)

    results: dict[str, VariantCurves] = {}
    for variant in resolved:
        model = copy.deepcopy(reference_model)
        weights = _variant_weights(variant, config)
        np_rng = np.random.default_rng(config.seed)
        optimizer = torch.optim.AdamW(
            [p for p in model.parameters() if p.requires_grad], lr=config.base_lr
        )
        cos_curve, std_curve = [], []
        step0_terms: dict[str, float] = {}
        step = 0
        for _ in range(epochs):
            for _ in range(steps_per_epoch):
                idx = np_rng.choice(len(train_set), size=min(config.batch_size, len(train_set)), replace=False)
                frames_t, frames_t1, foundation = _stack_frames([train_set[i] for i in idx])
                mask = sample_mask(np_rng, model.num_patches, config.mask)
                predicted = model.predict_future(model.encode(frames_t, mask), mask)
                target = model.encode_target(frames_t1)
                projected = model.projection(predicted)
                loss, terms = jepa_loss(
                    predicted, target, projected, foundation, weights,
                    target_indices=torch.as_tensor(mask.target_indices, dtype=torch.long),
                )
                if step == 0:
                    step0_terms = terms
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                model.ema_step(ema_tau_at(step, total_steps, config.ema_tau_base, config.ema_tau_final))
                step += 1
            cos, std = _validation_stats(model, val_set)
            cos_curve.append(cos)
            std_curve.append(std)
        results[variant.variant_id] = VariantCurves(
            variant.variant_id, cos_curve, std_curve, step0_terms
        )
    return results


def write_ablation_outputs(results: dict[str, VariantCurves], out_dir: str | Path) -> Path:
    """CSV curves, JSON summary, and a comparison plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "ablation_curves.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "epoch", "val_cosine_similarity", "embedding_spatial_std"])
        for curves in results.values():
            for epoch, (cos, std) in enumerate(zip(curves.cosine_similarity, curves.spatial_std)):
                writer.writerow([curves.variant_id, epoch, cos, std])

    summary = {
        vid: {
            "final_cosine_similarity": c.cosine_similarity[-1],
            "final_spatial_std": c.final_spatial_std,
        }
        for vid, c in results.items()
    }
    (out_dir / "ablation_summary.json").write_text(json.dumps(summary, indent=2))

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
        for vid, c in results.items():
            epochs = range(len(c.cosine_similarity))
            ax1.plot(epochs, c.cosine_similarity, label=vid)
            ax2.plot(epochs, c.spatial_std, label=vid)
        ax1.set_xlabel("epoch"), ax1.set_ylabel("val cosine similarity")
        ax2.set_xlabel("epoch"), ax2.set_ylabel("embedding spatial std")
        ax1.legend(), ax2.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "ablation_curves.png", dpi=120)
        plt.close(fig)
    except Exception:  # noqa: BLE001 - plotting is best-effort
        pass
    return csv_path
