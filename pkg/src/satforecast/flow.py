"""Rectified-flow training objective and Euler sampler.

Training draws a noise level sigma, interpolates x_sigma = (1-sigma) x0 +
sigma eps along the straight path between data and noise, and regresses the
constant velocity v* = eps - x0. Sampling integrates dx/dsigma = v down a
linear sigma grid with explicit Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .jepa_loss import LossNaNError


@dataclass
class FlowSample:
    x_sigma: torch.Tensor
    sigma: torch.Tensor      # (B,) noise levels in [0, 1]
    v_star: torch.Tensor
    epsilon: torch.Tensor
    x0: torch.Tensor


def _broadcast_sigma(sigma: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return sigma.reshape(-1, *([1] * (like.dim() - 1)))


def draw_sigma(
    batch: int,
    generator: torch.Generator | None = None,
    distribution: str = "uniform",
) -> torch.Tensor:
    if distribution == "uniform":
        return torch.rand(batch, generator=generator)
    if distribution == "logit-normal":
        return torch.sigmoid(torch.randn(batch, generator=generator))
    raise ValueError(f"unknown sigma distribution {distribution!r}")


def make_flow_sample(
    x0: torch.Tensor,
    generator: torch.Generator | None = None,
    *,
    distribution: str = "uniform",
    sigma: torch.Tensor | None = None,
) -> FlowSample:
    """Interpolated sample and its target velocity for a batch of latents."""
    squeeze = x0.dim() == 3
    if squeeze:
        x0 = x0.unsqueeze(0)
    if sigma is None:
        sigma = draw_sigma(x0.shape[0], generator, distribution).to(x0.dtype)
    epsilon = torch.empty_like(x0).normal_(generator=generator)
    s = _broadcast_sigma(sigma, x0)
    x_sigma = (1.0 - s) * x0 + s * epsilon
    v_star = epsilon - x0
    if squeeze:
        return FlowSample(x_sigma[0], sigma, v_star[0], epsilon[0], x0[0])
    return FlowSample(x_sigma, sigma, v_star, epsilon, x0)


def one_step_estimate(x_sigma: torch.Tensor, sigma: torch.Tensor, v_pred: torch.Tensor) -> torch.Tensor:
    """Single-step data estimate x0_hat = x_sigma - sigma * v_pred."""
    if torch.is_tensor(sigma) and sigma.dim() > 0:
        sigma = _broadcast_sigma(sigma, x_sigma)
    return x_sigma - sigma * v_pred


def sigma_schedule(strength: float, steps: int) -> np.ndarray:
    """Sigma values reached after each Euler update: linear from the start
    level down to 0, length ``steps``, last entry exactly 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linspace(strength, 0.0, steps + 1)[1:]


def euler_integrate(
    velocity: Callable[[torch.Tensor, float], torch.Tensor],
    x_init: torch.Tensor,
    strength: float,
    steps: int,
) -> torch.Tensor:
    """Explicit Euler along a decreasing linear sigma grid from strength to 0."""
    grid = np.linspace(strength, 0.0, steps + 1)
    x = x_init
    for i in range(steps):
        sigma = float(grid[i])
        d_sigma = float(grid[i + 1] - grid[i])
        x = x + d_sigma * velocity(x, sigma)
    return x


def noise_to_strength(
    init_latent: torch.Tensor,
    strength: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Latent initialization x = (1 - s) init + s eps at the start level."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if strength == 0.0:
        return init_latent.clone()
    epsilon = torch.empty_like(init_latent).normal_(generator=generator)
    return (1.0 - strength) * init_latent + strength * epsilon


# ---------------------------------------------------------------------------
# Differentiable structural similarity (for the training loss)
# ---------------------------------------------------------------------------


def _gaussian_kernel(window: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    half = window // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_torch(
    pred: torch.Tensor,
    target: torch.Tensor,
    window: int = 11,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Mean local SSIM over Gaussian windows, differentiable.

    Inputs are (B, C, H, W) or (C, H, W) in [0, 1]; channels are collapsed
    to grayscale by their mean. Border windows are cropped.
    """
    if pred.shape != target.shape:
        raise ValueError("ssim inputs must share a shape")
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if pred.shape[-1] < window or pred.shape[-2] < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    gray_p = pred.mean(dim=1, keepdim=True)
    gray_t = target.mean(dim=1, keepdim=True)
    kernel = _gaussian_kernel(window, sigma, pred.dtype).to(pred.device)[None, None]

    def filt(x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.conv2d(x, kernel)

    c1, c2 = 0.01**2, 0.03**2
    mu_p, mu_t = filt(gray_p), filt(gray_t)
    var_p = filt(gray_p * gray_p) - mu_p * mu_p
    var_t = filt(gray_t * gray_t) - mu_t * mu_t
    cov = filt(gray_p * gray_t) - mu_p * mu_t
    score = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    )
    return score.mean()


def diffusion_loss(
    v_pred: torch.Tensor,
    v_star: torch.Tensor,
    preview: torch.Tensor | None = None,
    target_image: torch.Tensor | None = None,
    ssim_weight: float = 0.1,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Velocity MSE plus weighted structural-similarity regularization on the
    decoded single-step estimate."""
    if v_pred.shape != v_star.shape:
        raise ValueError("velocity shapes must match")
    mse = ((v_pred - v_star) ** 2).mean()
    if not torch.isfinite(mse):
        raise LossNaNError("velocity_mse", float(mse))
    if preview is not None and target_image is not None:
        ssim_term = 1.0 - ssim_torch(preview, target_image)
        if not torch.isfinite(ssim_term):
            raise LossNaNError("ssim", float(ssim_term))
    else:
        ssim_term = v_pred.new_zeros(())
    total = mse + ssim_weight * ssim_term
    return total, {
        "velocity_mse": float(mse.detach()),
        "ssim": float(ssim_term.detach()),
        "total": float(total.detach()),
    }
