"""Patch-token encoder, future-state predictor, and EMA target encoder.

The online encoder turns a frame into an N x D token grid; the predictor
fills non-context positions with a learned mask token and runs a lightweight
transformer to forecast the next frame's tokens; the target encoder is an
EMA copy of the online encoder and never receives gradients. A linear head
projects predictor output into the 64-channel foundation-embedding space.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import JepaConfig
from .masking import MaskSpec


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Non-overlapping patchification: (B, 3, H, W) -> (B, N, D), row-major."""

    def __init__(self, patch_size: int, dim: int) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ValueError(
                f"image dims {tuple(x.shape[-2:])} not divisible by patch size {self.patch_size}"
            )
        return self.proj(x).flatten(2).transpose(1, 2)


class VisionEncoder(nn.Module):
    """ViT over the full patch grid, with optional context-restricted encoding."""

    def __init__(self, config: JepaConfig, image_size: int) -> None:
        super().__init__()
        self.num_patches = (image_size // config.patch_size) ** 2
        self.patch_embed = PatchEmbed(config.patch_size, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches, config.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.encoder_heads, config.mlp_ratio)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, x: torch.Tensor, keep_indices: torch.Tensor | None = None) -> torch.Tensor:
        """Returns (B, N, D). With ``keep_indices`` only those patches are
        attended; the remaining rows of the output are zero.
        """
        tokens = self.patch_embed(x) + self.pos_embed
        if keep_indices is None:
            for block in self.blocks:
                tokens = block(tokens)
            return self.norm(tokens)

        keep = torch.as_tensor(keep_indices, dtype=torch.long, device=tokens.device)
        subset = tokens[:, keep]
        for block in self.blocks:
            subset = block(subset)
        subset = self.norm(subset)
        out = tokens.new_zeros(tokens.shape)
        out[:, keep] = subset
        return out


class Predictor(nn.Module):
    """Forecasts the full next-frame token grid from context tokens.

    Non-context positions of the input are replaced by a learned mask token;
    the predictor's own positional embedding is added everywhere.
    """

    def __init__(self, config: JepaConfig, num_patches: int) -> None:
        super().__init__()
        dim = config.embed_dim
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches, dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(dim, config.predictor_heads, config.mlp_ratio)
            for _ in range(config.predictor_depth)
        )
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, context_tokens: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
        b, n, d = context_tokens.shape
        is_context = torch.zeros(n, dtype=torch.bool, device=context_tokens.device)
        is_context[torch.as_tensor(mask.context_indices, dtype=torch.long)] = True
        filler = self.mask_token.expand(b, n, d)
        x = torch.where(is_context[None, :, None], context_tokens, filler)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.out_proj(self.norm(x))


class ProjectionHead(nn.Linear):
    """Affine map from predictor space to the 64-channel embedding space."""

    def __init__(self, config: JepaConfig) -> None:
        super().__init__(config.embed_dim, config.target_dim)


@torch.no_grad()
def ema_update(online: nn.Module, target: nn.Module, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, parameter by parameter."""
    online_params = dict(online.named_parameters())
    for name, p_target in target.named_parameters():
        p_online = online_params.get(name)
        if p_online is None or p_online.shape != p_target.shape:
            raise ValueError(f"parameter mismatch during EMA update: {name}")
        p_target.mul_(tau).add_(p_online, alpha=1.0 - tau)


class TemporalJepa(nn.Module):
    """Online encoder + predictor + projection head + EMA target encoder."""

    def __init__(self, config: JepaConfig, image_size: int) -> None:
        super().__init__()
        self.config = config
        self.encoder = VisionEncoder(config, image_size)
        self.predictor = Predictor(config, self.encoder.num_patches)
        self.projection = ProjectionHead(config)
        self.target_encoder = copy.deepcopy(self.encoder)
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)

    @property
    def num_patches(self) -> int:
        return self.encoder.num_patches

    def encode(self, image: torch.Tensor, mask: MaskSpec | None = None) -> torch.Tensor:
        keep = None
        if mask is not None:
            keep = torch.as_tensor(mask.context_indices, dtype=torch.long)
        return self.encoder(image, keep_indices=keep)

    @torch.no_grad()
    def encode_target(self, image: torch.Tensor) -> torch.Tensor:
        return self.target_encoder(image)

    def predict_future(self, context_tokens: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
        return self.predictor(context_tokens, mask)

    def ema_step(self, tau: float) -> None:
        ema_update(self.encoder, self.target_encoder, tau)

    def spatial_std(self, tokens: torch.Tensor) -> torch.Tensor:
        """Collapse diagnostic: mean over channels of the per-channel std
        across token positions."""
        return tokens.std(dim=1).mean()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
