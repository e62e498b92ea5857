"""Multi-block masking over the patch grid.

One context block (0.7-1.0 of the patches) and one target block (0.2-0.5),
both contiguous rectangles with aspect ratio in [0.75, 1.5]. Overlap between
context and target is allowed. Count bounds follow the floor/ceil rounding
rule: lower bound floored, upper bound ceiled and capped at N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import MaskConfig


class MaskingError(ValueError):
    """Raised when mask constraints are unsatisfiable for the given grid."""


@dataclass(frozen=True)
class MaskSpec:
    context_indices: np.ndarray        # sorted flat patch indices
    target_indices: np.ndarray
    context_shape: tuple[int, int]     # (h, w) of the context block, in patches
    target_shape: tuple[int, int]

    @property
    def num_context(self) -> int:
        return len(self.context_indices)

    @property
    def num_target(self) -> int:
        return len(self.target_indices)


def full_mask(num_patches: int) -> MaskSpec:
    """Inference-time mask: every patch is context and every patch is target."""
    grid = math.isqrt(num_patches)
    idx = np.arange(num_patches, dtype=np.int64)
    return MaskSpec(idx, idx.copy(), (grid, grid), (grid, grid))


def scale_bounds(num_patches: int, scale: tuple[float, float]) -> tuple[int, int]:
    lo = math.floor(scale[0] * num_patches)
    hi = min(math.ceil(scale[1] * num_patches), num_patches)
    return lo, hi


def _sample_block(
    rng: np.random.Generator,
    grid: int,
    area_lo: int,
    area_hi: int,
    aspect: tuple[float, float],
    max_tries: int = 1000,
) -> tuple[np.ndarray, tuple[int, int]]:
    for _ in range(max_tries):
        area = rng.uniform(area_lo, area_hi)
        ratio = rng.uniform(*aspect)
        h = int(round(math.sqrt(area * ratio)))
        w = int(round(math.sqrt(area / ratio)))
        h = min(max(h, 1), grid)
        w = min(max(w, 1), grid)
        if not (area_lo <= h * w <= area_hi):
            continue
        if not (aspect[0] <= h / w <= aspect[1]):
            continue
        top = rng.integers(0, grid - h + 1)
        left = rng.integers(0, grid - w + 1)
        rows = np.arange(top, top + h)
        cols = np.arange(left, left + w)
        idx = (rows[:, None] * grid + cols[None, :]).ravel()
        return np.sort(idx).astype(np.int64), (h, w)
    raise MaskingError(
        f"no block with area in [{area_lo}, {area_hi}] and aspect in {aspect} "
        f"fits a {grid}x{grid} grid"
    )


def sample_mask(rng: np.random.Generator, num_patches: int, config: MaskConfig) -> MaskSpec:
    """One context block and one target block over an NxN patch grid."""
    grid = math.isqrt(num_patches)
    if grid * grid != num_patches or num_patches < 16:
        raise MaskingError(f"patch count {num_patches} must be a perfect square >= 16")

    ctx_lo, ctx_hi = scale_bounds(num_patches, config.context_scale)
    ctx_lo = max(ctx_lo, config.min_keep)
    tgt_lo, tgt_hi = scale_bounds(num_patches, config.target_scale)

    context, ctx_shape = _sample_block(rng, grid, ctx_lo, ctx_hi, config.aspect_ratio)
    target, tgt_shape = _sample_block(rng, grid, tgt_lo, tgt_hi, config.aspect_ratio)
    return MaskSpec(context, target, ctx_shape, tgt_shape)


def validate_mask(spec: MaskSpec, num_patches: int, config: MaskConfig) -> None:
    """Raise if a MaskSpec violates any invariant for the given grid."""
    ctx_lo, ctx_hi = scale_bounds(num_patches, config.context_scale)
    tgt_lo, tgt_hi = scale_bounds(num_patches, config.target_scale)
    if not (max(ctx_lo, config.min_keep) <= spec.num_context <= ctx_hi):
        raise MaskingError(f"context count {spec.num_context} outside [{ctx_lo}, {ctx_hi}]")
    if not (tgt_lo <= spec.num_target <= tgt_hi):
        raise MaskingError(f"target count {spec.num_target} outside [{tgt_lo}, {tgt_hi}]")
    for h, w in (spec.context_shape, spec.target_shape):
        if not (config.aspect_ratio[0] <= h / w <= config.aspect_ratio[1]):
            raise MaskingError(f"block aspect {h}/{w} outside {config.aspect_ratio}")
    if spec.num_context < config.min_keep:
        raise MaskingError(f"context keeps {spec.num_context} < {config.min_keep} patches")
