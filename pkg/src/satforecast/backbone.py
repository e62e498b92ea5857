"""Conditional velocity-field transformer: frozen base + LoRA deltas.

Stand-in for a large pretrained latent-diffusion transformer behind the same
contract: the base weights are frozen after a brief unconditional
pretraining phase and only low-rank adapters on the attention projections
(plus the external conditioning adapter) train afterwards. Token-level
conditioning enters through cross-attention; the pooled vector modulates the
network through the noise-level embedding.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import ConditioningBundle
from .config import BackboneConfig


class LoRALinear(nn.Module):
    """Linear layer with a frozen base and a rank-r additive delta.

    The delta starts at exactly zero (B initialized to zeros), so a freshly
    adapted layer reproduces the base output bit for bit.
    """

    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, in_features))
        self.lora_b = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def delta(self) -> torch.Tensor:
        """Effective additive update, in float64 so rank diagnostics are not
        polluted by float32 rounding."""
        return self.scaling * (self.lora_b.double() @ self.lora_a.double())


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(dim, dim, rank, alpha)
        self.k = LoRALinear(dim, dim, rank, alpha)
        self.v = LoRALinear(dim, dim, rank, alpha)
        self.out = LoRALinear(dim, dim, rank, alpha)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.k(x).reshape(b, n, h, d // h).transpose(1, 2)
        v = self.v(x).reshape(b, n, h, d // h).transpose(1, 2)
        o = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, d)
        return self.out(o)


class _CrossAttention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(dim, dim, rank, alpha)
        self.k = LoRALinear(context_dim, dim, rank, alpha)
        self.v = LoRALinear(context_dim, dim, rank, alpha)
        self.out = LoRALinear(dim, dim, rank, alpha)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        m = context.shape[1]
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.k(context).reshape(b, m, h, d // h).transpose(1, 2)
        v = self.v(context).reshape(b, m, h, d // h).transpose(1, 2)
        o = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, d)
        return self.out(o)


class _Block(nn.Module):
    """Self-attention, cross-attention on h, and an MLP, each pre-norm with
    a shift/scale modulation driven by the conditioning vector."""

    def __init__(self, dim: int, context_dim: int, heads: int, rank: int, alpha: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = _SelfAttention(dim, heads, rank, alpha)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.cross = _CrossAttention(dim, context_dim, heads, rank, alpha)
        self.norm3 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.modulation = nn.Linear(dim, 2 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond_vec: torch.Tensor, context: torch.Tensor | None) -> torch.Tensor:
        shift, scale = self.modulation(cond_vec).unsqueeze(1).chunk(2, dim=-1)
        x = x + self.attn(self.norm1(x) * (1 + scale) + shift)
        if context is not None:
            x = x + self.cross(self.norm2(x), context)
        x = x + self.mlp(self.norm3(x) * (1 + scale) + shift)
        return x


def _sigma_embedding(sigma: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, device=sigma.device) / half)
    angles = sigma.reshape(-1, 1) * freqs[None] * 1000.0
    return torch.cat([angles.sin(), angles.cos()], dim=-1)


class ConditionalBackbone(nn.Module):
    def __init__(self, config: BackboneConfig, latent_channels: int, latent_size: int) -> None:
        super().__init__()
        self.config = config
        w = config.width
        self.latent_size = latent_size
        self.patch_in = nn.Conv2d(latent_channels, w, kernel_size=1)
        self.pos_embed = nn.Parameter(torch.zeros(1, latent_size * latent_size, w))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.sigma_mlp = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, w))
        self.pooled_proj = nn.Linear(config.pooled_dim, w)
        self.blocks = nn.ModuleList(
            _Block(w, config.cross_dim, config.heads, config.lora_rank, config.lora_alpha)
            for _ in range(config.depth)
        )
        self.norm_out = nn.LayerNorm(w)
        self.patch_out = nn.Conv2d(w, latent_channels, kernel_size=1)
        self._frozen = False

    def forward(
        self,
        x_sigma: torch.Tensor,
        sigma: torch.Tensor | float,
        cond: ConditioningBundle | None = None,
    ) -> torch.Tensor:
        squeeze = x_sigma.dim() == 3
        if squeeze:
            x_sigma = x_sigma.unsqueeze(0)
        b, c, s, _ = x_sigma.shape
        if not torch.is_tensor(sigma):
            sigma = torch.full((b,), float(sigma), dtype=x_sigma.dtype, device=x_sigma.device)
        sigma = sigma.reshape(b)

        cond_vec = self.sigma_mlp(_sigma_embedding(sigma, self.config.width))
        context = None
        if cond is not None:
            if cond.h.shape[-1] != self.config.cross_dim:
                raise ValueError(
                    f"conditioning width {cond.h.shape[-1]} does not match "
                    f"cross-attention width {self.config.cross_dim}"
                )
            # pooled signal modulates through the noise-level embedding
            cond_vec = cond_vec + self.pooled_proj(cond.p)
            context = cond.h

        tokens = self.patch_in(x_sigma).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens, cond_vec, context)
        tokens = self.norm_out(tokens)
        out = self.patch_out(tokens.transpose(1, 2).reshape(b, -1, s, s))
        return out.squeeze(0) if squeeze else out

    # -- frozen-base plumbing --------------------------------------------
    #
    # The conditioning entry point (pooled projection) receives no gradient
    # during unconditional pretraining, so it belongs to the adapter side of
    # the contract and keeps training after the core transformer freezes.

    def _is_lora(self, name: str) -> bool:
        return name.endswith("lora_a") or name.endswith("lora_b")

    def _is_conditioning_entry(self, name: str) -> bool:
        return name.startswith("pooled_proj")

    def lora_parameters(self):
        return [p for n, p in self.named_parameters() if self._is_lora(n)]

    def conditioning_parameters(self):
        return [p for n, p in self.named_parameters() if self._is_conditioning_entry(n)]

    def base_parameters(self):
        return [
            p for n, p in self.named_parameters()
            if not self._is_lora(n) and not self._is_conditioning_entry(n)
        ]

    def freeze_base(self) -> None:
        for n, p in self.named_parameters():
            if not self._is_lora(n) and not self._is_conditioning_entry(n):
                p.requires_grad_(False)
        self._frozen = True

    def base_digest(self) -> str:
        """SHA-256 over the frozen base weights in name order."""
        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            if self._is_lora(name) or self._is_conditioning_entry(name):
                continue
            digest.update(name.encode())
            digest.update(param.detach().cpu().to(torch.float32).numpy().tobytes())
        return digest.hexdigest()

    def lora_modules(self) -> list[tuple[str, LoRALinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, LoRALinear)]
