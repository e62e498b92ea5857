"""Conditioning adapter: semantic tokens + coarse reference -> (h, p).

Token-level conditioning ``h`` is a gated blend of a semantic stream
(predicted tokens through a three-layer MLP) and a structural stream (the
32x32 reference patchified to 64 tokens through its own MLP); ``p`` is a
pooled global vector. A learned sigmoid gate balances the two streams, and
training-time reference dropout removes the coarse stream entirely with
probability 0.15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AdapterConfig, ConfigurationError


@dataclass
class ConditioningBundle:
    h: torch.Tensor          # (B, M, cross_dim) cross-attention tokens
    p: torch.Tensor          # (B, pooled_dim) global conditioning
    alpha: torch.Tensor      # learned gate value, strictly inside (0, 1)
    coarse_dropped: bool     # whether the reference stream was removed


def downsample_reference(image: torch.Tensor, size: int = 32) -> torch.Tensor:
    """Area-downsampled copy of the input frame, (B, 3, size, size)."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    ref = F.adaptive_avg_pool2d(image, size)
    return ref.squeeze(0) if squeeze else ref


def patchify_coarse(ref: torch.Tensor, patch: int = 4) -> torch.Tensor:
    """Row-major patch tokens of the reference: (B, (S/patch)^2, patch*patch*3).

    Each token is the flattened (patch, patch, RGB) pixel block.
    """
    squeeze = ref.dim() == 3
    if squeeze:
        ref = ref.unsqueeze(0)
    b, c, s, _ = ref.shape
    g = s // patch
    tokens = ref.reshape(b, c, g, patch, g, patch)
    tokens = tokens.permute(0, 2, 4, 3, 5, 1).reshape(b, g * g, patch * patch * c)
    return tokens.squeeze(0) if squeeze else tokens


def _projection_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.LayerNorm(in_dim),
        nn.Linear(in_dim, hidden),
        nn.GELU(),
        nn.Linear(hidden, hidden),
        nn.GELU(),
        nn.Linear(hidden, out_dim),
    )


class ConditioningAdapter(nn.Module):
    def __init__(self, config: AdapterConfig) -> None:
        super().__init__()
        self.config = config
        coarse_tokens = (config.coarse_size // config.coarse_patch) ** 2
        coarse_dim = config.coarse_patch ** 2 * 3
        self.num_coarse_tokens = coarse_tokens

        # Positional embeddings are added before projection, at input width.
        self.semantic_pos = nn.Parameter(torch.zeros(1, config.max_semantic_tokens, config.token_dim))
        self.coarse_pos = nn.Parameter(torch.zeros(1, coarse_tokens, coarse_dim))
        nn.init.trunc_normal_(self.semantic_pos, std=0.02)
        nn.init.trunc_normal_(self.coarse_pos, std=0.02)

        self.semantic_mlp = _projection_mlp(config.token_dim, config.hidden_dim, config.cross_dim)
        self.coarse_mlp = _projection_mlp(coarse_dim, config.hidden_dim, config.cross_dim)
        self.pooled_mlp = nn.Sequential(
            nn.Linear(config.token_dim, config.hidden_dim),
            nn.GELU(),
            nn.Linear(config.hidden_dim, config.pooled_dim),
        )
        # sigmoid(0) = 0.5: both streams start equally weighted
        self.gate_logit = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logit)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _fuse(self, h_semantic: torch.Tensor, h_coarse: torch.Tensor) -> torch.Tensor:
        alpha = self.alpha
        if self.config.fusion == "concat":
            return torch.cat([alpha * h_semantic, (1.0 - alpha) * h_coarse], dim=1)
        # Broadcast-align the coarse grid to the semantic grid by nearest
        # neighbor before gating, so the fusion operands are shape-compatible.
        b, n_sem, d = h_semantic.shape
        g_sem = math.isqrt(n_sem)
        g_coarse = math.isqrt(h_coarse.shape[1])
        if g_sem * g_sem != n_sem or g_coarse * g_coarse != h_coarse.shape[1]:
            raise ConfigurationError("upsample fusion requires square token grids")
        grid = h_coarse.reshape(b, g_coarse, g_coarse, d).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(g_sem, g_sem), mode="nearest")
        h_coarse_up = grid.permute(0, 2, 3, 1).reshape(b, n_sem, d)
        return alpha * h_semantic + (1.0 - alpha) * h_coarse_up

    def forward(
        self,
        semantic_tokens: torch.Tensor,
        ref: torch.Tensor | None = None,
        *,
        dropout_active: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ConditioningBundle:
        squeeze = semantic_tokens.dim() == 2
        if squeeze:
            semantic_tokens = semantic_tokens.unsqueeze(0)
            if ref is not None and ref.dim() == 3:
                ref = ref.unsqueeze(0)
        n_sem = semantic_tokens.shape[1]
        if n_sem > self.config.max_semantic_tokens:
            raise ConfigurationError(
                f"semantic token count {n_sem} exceeds positional capacity "
                f"{self.config.max_semantic_tokens}"
            )

        dropped = False
        if ref is not None and dropout_active:
            if rng is None:
                raise ValueError("dropout_active requires an rng")
            dropped = bool(rng.random() < self.config.reference_dropout)
            if dropped:
                ref = None

        h_semantic = self.semantic_mlp(semantic_tokens + self.semantic_pos[:, :n_sem])
        p = self.pooled_mlp(semantic_tokens.mean(dim=1))

        if ref is None:
            # Coarse branch zeroed, gate forced to 1: h is the semantic stream.
            h = h_semantic
        else:
            if ref.shape[-1] != self.config.coarse_size or ref.shape[-2] != self.config.coarse_size:
                raise ConfigurationError(
                    f"reference must be {self.config.coarse_size}x{self.config.coarse_size}"
                )
            coarse = patchify_coarse(ref, self.config.coarse_patch)
            if coarse.shape[1] > self.num_coarse_tokens:
                raise ConfigurationError("coarse token count exceeds positional capacity")
            h_coarse = self.coarse_mlp(coarse + self.coarse_pos)
            h = self._fuse(h_semantic, h_coarse)

        return ConditioningBundle(h=h, p=p, alpha=self.alpha, coarse_dropped=dropped)
