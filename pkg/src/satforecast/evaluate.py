"""Single-step evaluation over a dataset split.

Runs the full pipeline (or any injected predictor, e.g. the persistence
baseline) over every pair, aggregates the metric suite into a MetricReport,
and can print it as a one-row comparison table.
"""

from __future__ import annotations

from typing import Callable

import torch

from . import metrics
from .data import SequenceSample
from .pipeline import ForecastModel


def persistence_predict(sample: SequenceSample, seed: int) -> torch.Tensor:
    return sample.frame_t.clone()


def evaluate(
    model: ForecastModel | None,
    samples: list[SequenceSample],
    *,
    sampler_seed: int = 0,
    predict_fn: Callable[[SequenceSample, int], torch.Tensor] | None = None,
    lpips_extractor: str | None = "random-conv",
    feature_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> metrics.MetricReport:
    """Aggregate metrics of single-step predictions against targets.

    ``predict_fn(sample, seed)`` overrides the model pipeline when given.
    Distribution features for the Frechet metric default to the model's
    frozen target encoder (pooled tokens).
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    if predict_fn is None:
        if model is None:
            raise ValueError("either a model or a predict_fn is required")

        def predict_fn(sample: SequenceSample, seed: int) -> torch.Tensor:
            gen = torch.Generator().manual_seed(seed)
            return model.predict_next(sample.frame_t, generator=gen)

    if feature_fn is None and model is not None:
        feature_fn = model.pooled_features

    l1_sum = mse_sum = psnr_sum = ssim_sum = gssim_sum = 0.0
    lpips_sum: float | None = 0.0 if lpips_extractor is not None else None
    pred_features, target_features = [], []

    for i, sample in enumerate(samples):
        pred = predict_fn(sample, sampler_seed + i)
        target = sample.frame_t1
        l1, mse, psnr = metrics.pixel_metrics(pred, target)
        l1_sum += l1
        mse_sum += mse
        psnr_sum += psnr
        ssim_sum += metrics.ssim(pred, target)
        gssim_sum += metrics.gssim(pred, target)
        if lpips_sum is not None:
            lpips_sum += metrics.lpips(pred, target, lpips_extractor)
        if feature_fn is not None:
            pred_features.append(feature_fn(pred).reshape(-1).numpy())
            target_features.append(feature_fn(target).reshape(-1).numpy())

    n = len(samples)
    fid_value = None
    if feature_fn is not None and n >= 2:
        fid_value = metrics.fid(pred_features, target_features)
    return metrics.MetricReport(
        l1=l1_sum / n,
        mse=mse_sum / n,
        psnr=psnr_sum / n,
        ssim=ssim_sum / n,
        gssim=gssim_sum / n,
        lpips=(lpips_sum / n) if lpips_sum is not None else None,
        fid=fid_value,
        sample_count=n,
        lpips_comparable=False,
    )


def format_report_row(label: str, report: metrics.MetricReport) -> str:
    def fmt(value: float | None) -> str:
        return f"{value:.4f}" if value is not None else "  n/a "

    return (
        f"{label:<16} {report.l1:.4f}  {report.mse:.4f}  {report.psnr:7.2f}  "
        f"{report.ssim:.4f}  {report.gssim:.4f}  {fmt(report.lpips)}  {fmt(report.fid)}  "
        f"(n={report.sample_count})"
    )


REPORT_HEADER = (
    f"{'model':<16} {'L1':>6}  {'MSE':>6}  {'PSNR':>7}  {'SSIM':>6}  {'GSSIM':>6}  "
    f"{'LPIPS':>6}  {'FID':>6}"
)
