"""Convolutional latent codec with fixed 8x spatial compression.

Pretrained on the dataset before generator training, then frozen. Runs in
float32 regardless of the surrounding precision mode: autocast is disabled
inside encode/decode so reduced-precision training never touches it.
"""

from __future__ import annotations

import contextlib

import torch
import torch.nn as nn

from .config import CodecConfig


def _no_autocast(device_type: str):
    if device_type in ("cpu", "cuda"):
        return torch.autocast(device_type=device_type, enabled=False)
    return contextlib.nullcontext()


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig) -> None:
        super().__init__()
        if config.downsample != 8:
            raise ValueError("codec compression factor is fixed at 8")
        c = config.base_channels
        z = config.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(4 * c, z, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(z, 4 * c, 3, padding=1), nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1), nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1), nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, 3, 3, padding=1),
            nn.Sigmoid(),
        )
        # Calibrated after pretraining so encode() emits unit-variance
        # latents; the generator's noise scale is then codec-independent.
        self.register_buffer("latent_scale", torch.ones(()))

    def calibrate_latent_scale(self, images: torch.Tensor) -> float:
        with torch.no_grad():
            raw = self.encoder(images.float())
            scale = raw.std().clamp_min(1e-6)
        self.latent_scale.fill_(scale)
        return float(scale)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] % 8 or image.shape[-2] % 8:
            raise ValueError(f"image dims {tuple(image.shape[-2:])} not divisible by 8")
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        with _no_autocast(image.device.type):
            latent = self.encoder(image.float()) / self.latent_scale
        return latent.squeeze(0) if squeeze else latent

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        with _no_autocast(latent.device.type):
            image = self.decoder(latent.float() * self.latent_scale)
        return image.squeeze(0) if squeeze else image

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
