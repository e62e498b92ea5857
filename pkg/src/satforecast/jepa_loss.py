"""Hybrid token-prediction loss.

Five weighted terms: masked L1 reconstruction, masked cosine distance,
spatial-variance matching (collapse guard), symmetric InfoNCE over pooled
per-image embeddings (global discriminability), and L1 feature regression
against the 64-channel foundation embedding field when one is available.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import JepaLossWeights


class LossNaNError(FloatingPointError):
    """A loss term became non-finite; carries the term name."""

    def __init__(self, term: str, value: float) -> None:
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


def _check(term: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value):
        raise LossNaNError(term, float(value.detach()))
    return value


def spatial_variance_term(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared difference between per-channel spatial standard deviations."""
    std_pred = pred.std(dim=1)
    std_target = target.std(dim=1)
    return ((std_pred - std_target) ** 2).mean()


def info_nce(pooled_pred: torch.Tensor, pooled_target: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives over pooled embeddings."""
    p = F.normalize(pooled_pred, dim=-1)
    t = F.normalize(pooled_target, dim=-1)
    logits = (p @ t.T) / temperature
    labels = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def jepa_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    projected: torch.Tensor | None = None,
    foundation_target: torch.Tensor | None = None,
    weights: JepaLossWeights | None = None,
    *,
    target_indices: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted total plus a per-term breakdown (unweighted term values).

    ``pred`` and ``target`` are (B, N, D) token grids; ``target`` never
    receives gradients. When ``weights.masked_only`` and ``target_indices``
    are given, the L1 / cosine / feature-regression terms are restricted to
    the target-masked positions; the spatial-variance term always uses every
    position.
    """
    if weights is None:
        weights = JepaLossWeights()
    if pred.shape != target.shape:
        raise ValueError(f"pred/target shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")

    target = target.detach()
    if weights.masked_only and target_indices is not None:
        idx = torch.as_tensor(target_indices, dtype=torch.long, device=pred.device)
        sel_pred = pred[:, idx]
        sel_target = target[:, idx]
    else:
        idx = None
        sel_pred = pred
        sel_target = target

    l1 = _check("l1", (sel_pred - sel_target).abs().mean())
    cosine = _check("cosine", 1.0 - F.cosine_similarity(sel_pred, sel_target, dim=-1).mean())
    spatial = _check("spatial_variance", spatial_variance_term(pred, target))
    contrastive = _check(
        "contrastive",
        info_nce(pred.mean(dim=1), target.mean(dim=1), weights.contrastive_temperature),
    )

    if projected is not None and foundation_target is not None:
        foundation_target = foundation_target.detach()
        if idx is not None:
            projected_sel = projected[:, idx]
            foundation_sel = foundation_target[:, idx]
        else:
            projected_sel = projected
            foundation_sel = foundation_target
        feature_regression = _check(
            "feature_regression", (projected_sel - foundation_sel).abs().mean()
        )
    else:
        feature_regression = pred.new_zeros(())

    total = (
        weights.l1 * l1
        + weights.cosine * cosine
        + weights.spatial_variance * spatial
        + weights.contrastive * contrastive
        + weights.feature_regression * feature_regression
    )
    breakdown = {
        "l1": float(l1.detach()),
        "cosine": float(cosine.detach()),
        "spatial_variance": float(spatial.detach()),
        "contrastive": float(contrastive.detach()),
        "feature_regression": float(feature_regression.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
