"""Full forecasting pipeline and the unified checkpoint archive.

Single-step inference runs encode -> predict -> adapt -> sample: the online
encoder reads the current frame, the predictor forecasts next-frame tokens
over the full grid, the adapter builds the conditioning bundle from those
tokens plus a coarse downsampled reference, and the Euler sampler integrates
the learned velocity field starting from the current frame's noised latent.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .adapter import ConditioningAdapter, downsample_reference
from .backbone import ConditionalBackbone
from .codec import LatentCodec
from .config import TrainConfig
from .flow import euler_integrate, noise_to_strength
from .jepa import TemporalJepa
from .masking import full_mask

CHECKPOINT_VERSION = 1


class ForecastModel(nn.Module):
    def __init__(self, config: TrainConfig) -> None:
        super().__init__()
        self.config = config
        image_size = config.data.image_size
        self.jepa = TemporalJepa(config.jepa, image_size)
        self.adapter = ConditioningAdapter(config.adapter)
        self.codec = LatentCodec(config.codec)
        self.backbone = ConditionalBackbone(
            config.backbone,
            latent_channels=config.codec.latent_channels,
            latent_size=image_size // config.codec.downsample,
        )

    @torch.no_grad()
    def predict_tokens(self, frame: torch.Tensor) -> torch.Tensor:
        """Forecast next-frame semantic tokens from a (3, H, W) or batched frame."""
        squeeze = frame.dim() == 3
        batch = frame.unsqueeze(0) if squeeze else frame
        mask = full_mask(self.jepa.num_patches)
        tokens = self.jepa.encode(batch)
        predicted = self.jepa.predict_future(tokens, mask)
        return predicted.squeeze(0) if squeeze else predicted

    @torch.no_grad()
    def sample(
        self,
        cond,
        init_latent: torch.Tensor,
        steps: int | None = None,
        strength: float | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Euler flow-matching sampling from the noised init latent, decoded
        and clamped to [0, 1]."""
        steps = self.config.diffusion.sample_steps if steps is None else steps
        strength = self.config.diffusion.sample_strength if strength is None else strength
        x = noise_to_strength(init_latent, strength, generator)
        x = euler_integrate(lambda z, s: self.backbone(z, s, cond), x, strength, steps)
        return self.codec.decode(x).clamp(0.0, 1.0)

    @torch.no_grad()
    def predict_next(
        self,
        frame: torch.Tensor,
        generator: torch.Generator | None = None,
        steps: int | None = None,
        strength: float | None = None,
    ) -> torch.Tensor:
        squeeze = frame.dim() == 3
        batch = frame.unsqueeze(0) if squeeze else frame
        predicted = self.predict_tokens(batch)
        ref = downsample_reference(batch, self.config.adapter.coarse_size)
        bundle = self.adapter(predicted, ref, dropout_active=False)
        init_latent = self.codec.encode(batch)
        out = self.sample(bundle, init_latent, steps, strength, generator)
        return out.squeeze(0) if squeeze else out

    @torch.no_grad()
    def pooled_features(self, frame: torch.Tensor) -> torch.Tensor:
        """Frozen-encoder features for distribution metrics."""
        squeeze = frame.dim() == 3
        batch = frame.unsqueeze(0) if squeeze else frame
        tokens = self.jepa.encode_target(batch)
        pooled = tokens.mean(dim=1)
        return pooled.squeeze(0) if squeeze else pooled


def save_checkpoint(
    path: str | Path,
    model: ForecastModel,
    *,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    from .config import _to_plain  # local import to avoid a cycle at import time

    payload = {
        "version": CHECKPOINT_VERSION,
        "config": _to_plain(model.config),
        "step": step,
        "encoder": model.jepa.encoder.state_dict(),
        "target_encoder": model.jepa.target_encoder.state_dict(),
        "predictor": model.jepa.predictor.state_dict(),
        "projection": model.jepa.projection.state_dict(),
        "adapter": model.adapter.state_dict(),
        "codec": model.codec.state_dict(),
        "backbone": model.backbone.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> tuple[ForecastModel, dict]:
    """Rebuild a ForecastModel from an archive; returns (model, payload)."""
    from .config import ConfigurationError, TrainConfig as _TC, _from_plain

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {payload.get('version')}")
    if config is None:
        config = _from_plain(_TC, payload["config"])
    model = ForecastModel(config)
    try:
        model.jepa.encoder.load_state_dict(payload["encoder"])
        model.jepa.target_encoder.load_state_dict(payload["target_encoder"])
        model.jepa.predictor.load_state_dict(payload["predictor"])
        model.jepa.projection.load_state_dict(payload["projection"])
        model.adapter.load_state_dict(payload["adapter"])
        model.codec.load_state_dict(payload["codec"])
        model.backbone.load_state_dict(payload["backbone"])
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint does not match the model configuration: {exc}") from exc
    return model, payload
