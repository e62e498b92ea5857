"""Evaluation metrics: L1 / MSE / PSNR, SSIM, gradient-domain SSIM, FID, and
a perceptual distance with pluggable feature extractors.

Notes on definitions adopted here:

* PSNR is capped at 120 dB (MSE floored at 1e-12) so identical images never
  produce infinities in reports.
* GSSIM is SSIM computed between Sobel gradient-magnitude maps (3x3 kernels,
  reflect padding) of the grayscale inputs. Published GSSIM numbers from
  other codebases are not directly comparable.
* FID features at desk scale come from this package's own frozen encoder (or
  any registered extractor); absolute values are not comparable across
  feature networks.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

PSNR_CAP_DB = 120.0
MSE_FLOOR = 1e-12


class MetricUnavailableError(RuntimeError):
    """A metric's required feature extractor is not registered."""


@dataclass
class MetricReport:
    l1: float
    mse: float
    psnr: float
    ssim: float
    gssim: float
    lpips: float | None
    fid: float | None
    sample_count: int
    lpips_comparable: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def _as_array(image) -> np.ndarray:
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy()
    return np.asarray(image, dtype=np.float64)


def _grayscale(image: np.ndarray) -> np.ndarray:
    """Channel-mean grayscale; accepts (C, H, W) or (H, W)."""
    if image.ndim == 3:
        return image.mean(axis=0)
    return image


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------


def pixel_metrics(pred, target) -> tuple[float, float, float]:
    """(l1, mse, psnr) for [0, 1]-range images of identical shape."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    l1 = float(np.abs(diff).mean())
    mse = float((diff**2).mean())
    psnr = min(10.0 * np.log10(1.0 / max(mse, MSE_FLOOR)), PSNR_CAP_DB)
    return l1, mse, float(psnr)


# ---------------------------------------------------------------------------
# Structural similarity
# ---------------------------------------------------------------------------


def _gaussian_window(window: int, sigma: float) -> np.ndarray:
    half = window // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_gray(a: np.ndarray, b: np.ndarray, window: int, sigma: float, data_range: float = 1.0) -> float:
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    kernel = _gaussian_window(window, sigma)

    def filt(x: np.ndarray) -> np.ndarray:
        return ndimage.correlate(x, kernel, mode="constant")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    pad = window // 2
    return float(score[pad:-pad, pad:-pad].mean())


def ssim(pred, target, window: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over Gaussian windows on channel-mean grayscale."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return _ssim_gray(_grayscale(pred), _grayscale(target), window, sigma)


def _sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def gssim(pred, target, window: int = 11, sigma: float = 1.5) -> float:
    """SSIM between Sobel gradient-magnitude maps of the grayscale inputs."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    g_pred = _sobel_magnitude(_grayscale(pred))
    g_target = _sobel_magnitude(_grayscale(target))
    return _ssim_gray(g_pred, g_target, window, sigma)


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


def _psd_sqrt(matrix: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below tolerance clip to 0."""
    eigvals, eigvecs = np.linalg.eigh(matrix)
    eigvals = np.clip(eigvals, 0.0, None)
    eigvals[eigvals < tol] = 0.0
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), computed
    entirely through symmetric eigendecompositions. Covariances of
    undersampled sets (n <= d) get a small diagonal shrinkage.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with a common dimension")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("feature sets contain non-finite values")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each feature set needs at least 2 samples")

    d = a.shape[1]

    def stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu = x.mean(axis=0)
        cov = np.cov(x, rowvar=False).reshape(d, d)
        if x.shape[0] <= d:
            gamma = 0.1
            cov = (1 - gamma) * cov + gamma * (np.trace(cov) / d) * np.eye(d)
        return mu, cov

    mu_a, cov_a = stats(a)
    mu_b, cov_b = stats(b)
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Perceptual distance
# ---------------------------------------------------------------------------


class RandomConvFeatures:
    """Fixed random-weight convolutional stack.

    A stand-in feature extractor for environments without pretrained
    perceptual networks. Deterministic (seeded) and frozen, but the scores
    are NOT comparable to published perceptual distances.
    """

    name = "random-conv"
    comparable = False

    def __init__(self, seed: int = 1234) -> None:
        gen = torch.Generator().manual_seed(seed)
        self._convs = []
        channels = [3, 16, 32, 64]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            std = (2.0 / (c_in * 9)) ** 0.5
            weight = torch.empty(c_out, c_in, 3, 3).normal_(0.0, std, generator=gen)
            self._convs.append(weight)

    def layers(self, image: torch.Tensor) -> list[torch.Tensor]:
        x = image.unsqueeze(0) if image.dim() == 3 else image
        outs = []
        with torch.no_grad():
            for weight in self._convs:
                x = torch.nn.functional.conv2d(x, weight, stride=2, padding=1)
                x = torch.nn.functional.relu(x)
                outs.append(x)
        return outs


_EXTRACTORS: dict[str, object] = {}


def register_feature_extractor(name: str, extractor) -> None:
    _EXTRACTORS[name] = extractor


def get_feature_extractor(name: str):
    if name not in _EXTRACTORS:
        raise MetricUnavailableError(
            f"feature extractor {name!r} is not registered "
            f"(available: {sorted(_EXTRACTORS)})"
        )
    return _EXTRACTORS[name]


register_feature_extractor("random-conv", RandomConvFeatures())


def lpips(pred, target, extractor=None) -> float:
    """Perceptual distance: mean squared difference of unit-normalized
    feature maps, averaged spatially, summed over layers (unit layer
    weights)."""
    if extractor is None:
        raise MetricUnavailableError("lpips requires a feature extractor; none was given")
    if isinstance(extractor, str):
        extractor = get_feature_extractor(extractor)
    pred_t = torch.as_tensor(np.ascontiguousarray(_as_array(pred)), dtype=torch.float32)
    target_t = torch.as_tensor(np.ascontiguousarray(_as_array(target)), dtype=torch.float32)
    total = 0.0
    for feat_p, feat_t in zip(extractor.layers(pred_t), extractor.layers(target_t)):
        norm_p = feat_p / feat_p.norm(dim=1, keepdim=True).clamp_min(1e-10)
        norm_t = feat_t / feat_t.norm(dim=1, keepdim=True).clamp_min(1e-10)
        total += float(((norm_p - norm_t) ** 2).sum(dim=1).mean())
    return total
