"""Configuration dataclasses and YAML round-trip.

The dataclass defaults are the full-scale settings; :func:`toy_config`
returns the scaled-down profile used for desk-scale training and the test
suite (64 px frames, widths divided by 4, 20 epochs).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigurationError(ValueError):
    """Raised when a configuration value or combination is invalid."""


@dataclass
class DataConfig:
    image_size: int = 128
    source: str = "synthetic"          # "synthetic" | "tiles"
    root: str | None = None            # tile store root (source == "tiles")
    manifest: str | None = None        # manifest path relative to root
    num_sequences: int = 8             # synthetic RoIs
    steps_per_sequence: int = 5        # frames per synthetic RoI
    drift: float = 3.0                 # synthetic scene drift, px per step
    train_fraction: float = 0.8
    split_seed: int = 0


@dataclass
class MaskConfig:
    context_scale: tuple[float, float] = (0.7, 1.0)
    target_scale: tuple[float, float] = (0.2, 0.5)
    aspect_ratio: tuple[float, float] = (0.75, 1.5)
    num_context_masks: int = 1
    num_target_masks: int = 1
    min_keep: int = 6


@dataclass
class JepaConfig:
    patch_size: int = 8
    embed_dim: int = 768
    encoder_depth: int = 12
    encoder_heads: int = 12
    predictor_depth: int = 6
    predictor_heads: int = 12
    mlp_ratio: float = 4.0
    target_dim: int = 64               # foundation embedding channels


@dataclass
class JepaLossWeights:
    l1: float = 20.0
    cosine: float = 2.0
    spatial_variance: float = 2.0
    contrastive: float = 0.5
    feature_regression: float = 5.0
    contrastive_temperature: float = 0.1
    masked_only: bool = True           # L1/cosine/feature terms on target positions only

    def __post_init__(self) -> None:
        for name in ("l1", "cosine", "spatial_variance", "contrastive", "feature_regression"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.contrastive_temperature <= 0:
            raise ConfigurationError("contrastive temperature must be > 0")


@dataclass
class AdapterConfig:
    token_dim: int = 768
    coarse_size: int = 32
    coarse_patch: int = 4
    hidden_dim: int = 1024
    cross_dim: int = 4096
    pooled_dim: int = 2048
    max_semantic_tokens: int = 1024
    fusion: str = "upsample"           # "upsample" | "concat"
    reference_dropout: float = 0.15


@dataclass
class CodecConfig:
    latent_channels: int = 4
    base_channels: int = 64
    downsample: int = 8                # fixed 8x spatial compression
    roundtrip_mse_threshold: float = 0.02


@dataclass
class BackboneConfig:
    width: int = 512
    depth: int = 6
    heads: int = 8
    cross_dim: int = 4096
    pooled_dim: int = 2048
    lora_rank: int = 8
    lora_alpha: float = 16.0


@dataclass
class DiffusionConfig:
    ssim_weight: float = 0.1
    sample_steps: int = 20
    sample_strength: float = 0.35
    sigma_distribution: str = "uniform"    # "uniform" | "logit-normal"


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    start_lr: float = 2e-5
    final_lr: float = 1e-6
    warmup_epochs: int = 1
    epochs: int = 100
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    batch_size: int = 8
    sd_loss_weight: float = 1.0
    ema_tau_base: float = 0.999
    ema_tau_final: float = 1.0
    seed: int = 0
    precision: str = "full"            # "full" | "reduced"
    codec_pretrain_steps: int = 400
    codec_pretrain_lr: float = 2e-3
    base_pretrain_steps: int = 100
    base_pretrain_lr: float = 1e-3
    checkpoint_interval: int = 500
    out_dir: str = "runs/default"
    device: str = "cpu"

    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    jepa: JepaConfig = field(default_factory=JepaConfig)
    loss: JepaLossWeights = field(default_factory=JepaLossWeights)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self) -> None:
        if self.start_lr > self.base_lr:
            raise ConfigurationError("start_lr must be <= base_lr")
        if self.final_lr > self.base_lr:
            raise ConfigurationError("final_lr must be <= base_lr")
        if self.epochs < self.warmup_epochs:
            raise ConfigurationError("epochs must be >= warmup_epochs")
        if self.precision not in ("full", "reduced"):
            raise ConfigurationError(f"unknown precision mode {self.precision!r}")
        if self.adapter.cross_dim != self.backbone.cross_dim:
            raise ConfigurationError(
                "adapter cross_dim must match backbone cross_dim "
                f"({self.adapter.cross_dim} != {self.backbone.cross_dim})"
            )
        if self.data.image_size % self.jepa.patch_size != 0:
            raise ConfigurationError("image_size must be divisible by the patch size")
        if self.data.image_size % self.codec.downsample != 0:
            raise ConfigurationError("image_size must be divisible by the codec downsample factor")


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale profile: 64 px frames, widths / 4, 20 epochs."""
    cfg = TrainConfig(
        epochs=20,
        base_lr=1e-3,
        start_lr=2e-4,
        final_lr=1e-5,
        codec_pretrain_steps=900,
        base_pretrain_steps=800,
        out_dir="runs/toy",
        data=DataConfig(image_size=64, num_sequences=8, steps_per_sequence=5),
        jepa=JepaConfig(
            embed_dim=192,
            encoder_depth=4,
            encoder_heads=6,
            predictor_depth=3,
            predictor_heads=6,
        ),
        adapter=AdapterConfig(
            token_dim=192,
            hidden_dim=256,
            cross_dim=1024,
            pooled_dim=512,
        ),
        codec=CodecConfig(base_channels=48),
        backbone=BackboneConfig(width=128, depth=6, heads=4, cross_dim=1024, pooled_dim=512),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _from_plain(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SUBCONFIGS):
            sub = _SUBCONFIGS[f.type if isinstance(f.type, str) else f.type.__name__]
            kwargs[f.name] = _from_plain(sub, value)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


_SUBCONFIGS = {
    cls.__name__: cls
    for cls in (
        DataConfig, MaskConfig, JepaConfig, JepaLossWeights, AdapterConfig,
        CodecConfig, BackboneConfig, DiffusionConfig,
    )
}


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(_to_plain(config), sort_keys=False))


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping")
    return _from_plain(TrainConfig, data)
