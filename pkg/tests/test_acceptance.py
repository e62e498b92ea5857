"""Acceptance suite: one test per numbered criterion, at stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; a per-criterion pass/fail
summary is printed at the end of the session (see conftest). The training-
dependent criteria (6, 7, 10, 11) share two session-scoped runs: a 200-step
overfit run on an 8-pair dataset and a 20-epoch loss-ablation pair.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from satforecast import metrics
from satforecast.ablation import run_ablation, write_ablation_outputs
from satforecast.config import DataConfig, MaskConfig, toy_config
from satforecast.flow import diffusion_loss, euler_integrate, make_flow_sample, one_step_estimate
from satforecast.jepa_loss import jepa_loss
from satforecast.masking import sample_mask, scale_bounds
from satforecast.pipeline import load_checkpoint
from satforecast.rollout import blur_predictor, rollout
from satforecast.schedules import ema_tau_at, lr_at, weight_decay_at
from satforecast.trainer import build_dataset, train


def overfit_config(out_dir: str):
    """Pinned desk-scale profile for the 200-step overfit criteria."""
    return dataclasses.replace(
        toy_config(),
        epochs=200,             # one step per epoch on the 8-pair set
        base_lr=1.5e-3,
        data=DataConfig(image_size=64, num_sequences=8, steps_per_sequence=2,
                        train_fraction=1.0),
        out_dir=out_dir,
    )


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_overfit")
    config = overfit_config(str(out))
    result = train(config)
    model, _ = load_checkpoint(result.checkpoint_path, config)
    samples = build_dataset(config)
    return config, result, model, samples


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_ablation")
    config = dataclasses.replace(toy_config(), out_dir=str(out))
    started = time.perf_counter()
    results = run_ablation(["C", "E"], epochs=20, config=config)
    elapsed = time.perf_counter() - started
    write_ablation_outputs(results, out)
    return results, elapsed, out


def test_criterion_01_flow_matching_algebra():
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    for _ in range(1000):
        x0 = torch.randn(1, 4, 8, 8, generator=gen)
        fs = make_flow_sample(x0, gen)
        s = fs.sigma.reshape(-1, 1, 1, 1)
        assert torch.equal(fs.x_sigma, (1.0 - s) * x0 + s * fs.epsilon)
        assert torch.equal(fs.v_star, fs.epsilon - x0)
    x0 = torch.randn(2, 4, 8, 8, generator=gen)
    at_zero = make_flow_sample(x0, gen, sigma=torch.zeros(2))
    assert torch.equal(at_zero.x_sigma, x0)
    at_one = make_flow_sample(x0, gen, sigma=torch.ones(2))
    assert torch.equal(at_one.x_sigma, at_one.epsilon)
    assert time.perf_counter() - started < 1.0


def test_criterion_02_sampler_oracle():
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(2, 4, 8, 8, generator=gen)
    eps = torch.randn(2, 4, 8, 8, generator=gen)

    recovered = euler_integrate(lambda x, s: eps - x0, eps, strength=1.0, steps=1)
    assert float((recovered - x0).abs().max()) < 1e-5

    x_start = torch.randn(1, 2, 4, 4, generator=gen).double()
    exact = x_start * math.exp(-math.sin(1.0))

    def err(steps: int) -> float:
        out = euler_integrate(lambda x, s: math.cos(s) * x, x_start, 1.0, steps)
        return float((out - exact).abs().max())

    for steps in (20, 40, 80):
        ratio = err(steps) / err(2 * steps)
        assert 1.7 <= ratio <= 2.3
    assert time.perf_counter() - started < 10.0


def test_criterion_03_gradient_checks():
    started = time.perf_counter()
    rng = np.random.default_rng(0)

    # token-prediction loss
    torch.manual_seed(3)
    b, n, d = 4, 8, 5
    pred = torch.rand(b, n, d, dtype=torch.float64, requires_grad=True)
    target = torch.rand(b, n, d, dtype=torch.float64)
    total, _ = jepa_loss(pred, target)
    total.backward()
    analytic = pred.grad.reshape(-1)
    flat = pred.detach().reshape(-1)
    eps = 1e-6
    for k in rng.choice(flat.numel(), size=20, replace=False):
        bump = torch.zeros_like(flat)
        bump[k] = eps
        up = float(jepa_loss((flat + bump).reshape(b, n, d), target)[0])
        down = float(jepa_loss((flat - bump).reshape(b, n, d), target)[0])
        assert (up - down) / (2 * eps) == pytest.approx(float(analytic[k]), rel=1e-3, abs=1e-8)

    # velocity + structural loss, through the one-step preview
    s = 16
    x_sigma = torch.rand(1, 2, s, s, dtype=torch.float64)
    sigma = torch.full((1,), 0.6, dtype=torch.float64)
    v_star = torch.randn(1, 2, s, s, dtype=torch.float64)
    target_img = torch.rand(1, 3, s, s, dtype=torch.float64)
    decode_w = torch.randn(3, 2, 1, 1, dtype=torch.float64) * 0.3

    def loss_fn(v_pred):
        preview = F.conv2d(one_step_estimate(x_sigma, sigma, v_pred), decode_w).sigmoid()
        return diffusion_loss(v_pred, v_star, preview, target_img)[0]

    v_pred = torch.randn(1, 2, s, s, dtype=torch.float64, requires_grad=True)
    loss_fn(v_pred).backward()
    analytic_v = v_pred.grad.reshape(-1)
    flat_v = v_pred.detach().reshape(-1)
    for k in rng.choice(flat_v.numel(), size=20, replace=False):
        bump = torch.zeros_like(flat_v)
        bump[k] = eps
        up = float(loss_fn((flat_v + bump).reshape(1, 2, s, s)))
        down = float(loss_fn((flat_v - bump).reshape(1, 2, s, s)))
        assert (up - down) / (2 * eps) == pytest.approx(float(analytic_v[k]), rel=1e-3, abs=1e-9)
    assert time.perf_counter() - started < 30.0


def test_criterion_04_schedules_exact():
    config = toy_config(base_lr=1e-4, start_lr=2e-5, final_lr=1e-6)
    steps_per_epoch = 10
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    assert lr_at(0, config, steps_per_epoch=steps_per_epoch) == 2e-5
    assert lr_at(warmup, config, steps_per_epoch=steps_per_epoch) == 1e-4
    assert lr_at(total, config, steps_per_epoch=steps_per_epoch) == 1e-6
    assert ema_tau_at(0, 100) == 0.999
    assert ema_tau_at(50, 100) == pytest.approx(0.9995, rel=1e-12)
    assert ema_tau_at(100, 100) == 1.0
    assert weight_decay_at(0, config, total_steps=total) == 0.04
    assert weight_decay_at(total, config, total_steps=total) == 0.4


def test_criterion_05_masking_constraints():
    started = time.perf_counter()
    config = MaskConfig()
    rng = np.random.default_rng(0)
    n = 256
    ctx_lo, ctx_hi = scale_bounds(n, config.context_scale)
    tgt_lo, tgt_hi = scale_bounds(n, config.target_scale)
    for _ in range(10_000):
        spec = sample_mask(rng, n, config)
        assert ctx_lo <= spec.num_context <= ctx_hi
        assert tgt_lo <= spec.num_target <= tgt_hi
        for h, w in (spec.context_shape, spec.target_shape):
            assert 0.75 <= h / w <= 1.5
        assert spec.num_context >= 6
    assert time.perf_counter() - started < 10.0


def test_criterion_06_frozen_base_and_lora(overfit_run):
    config, result, model, _ = overfit_run
    # digest unchanged across the 200-step training run
    assert result.base_digest_before == result.base_digest_after
    assert model.backbone.base_digest() == result.base_digest_before

    # zeroed LoRA reproduces the base output exactly
    gen = torch.Generator().manual_seed(0)
    latent_size = config.data.image_size // 8
    x = torch.randn(1, config.codec.latent_channels, latent_size, latent_size, generator=gen)
    saved = [module.lora_b.data.clone() for _, module in model.backbone.lora_modules()]
    for _, module in model.backbone.lora_modules():
        module.lora_b.data.zero_()
        module.base.weight.requires_grad_(False)
    zeroed = model.backbone(x, 0.5, cond=None)
    reference = model.backbone(x, 0.5, cond=None)
    assert torch.equal(zeroed, reference)
    for (name, module), data in zip(model.backbone.lora_modules(), saved):
        module.lora_b.data.copy_(data)

    # adapted-update rank bounded by r for every adapted matrix
    for name, module in model.backbone.lora_modules():
        singular = torch.linalg.svdvals(module.delta())
        assert int((singular > 1e-6).sum()) <= config.backbone.lora_rank, name


def test_criterion_07_collapse_ablation(ablation_run):
    results, elapsed, out_dir = ablation_run
    full = results["E"]
    reduced = results["C"]  # no spatial-variance, no contrastive term
    assert len(full.spatial_std) == 20
    assert full.final_spatial_std > reduced.final_spatial_std
    assert (out_dir / "ablation_curves.csv").exists()
    assert elapsed < 7200.0
    print(
        f"\n  final embedding spatial std: E={full.final_spatial_std:.5f} "
        f"> C={reduced.final_spatial_std:.5f}"
    )


def test_criterion_08_metric_oracles():
    rng = np.random.default_rng(7)
    # structural similarity against an independent reference implementation
    for _ in range(20):
        a, b = rng.random((3, 48, 48)), rng.random((3, 48, 48))
        reference = structural_similarity(
            a.mean(0), b.mean(0), win_size=11, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False, data_range=1.0,
        )
        assert metrics.ssim(a, b) == pytest.approx(reference, abs=1e-6)

    # Frechet distance on sampled Gaussians against the closed form. The
    # empirical estimator carries an O(d/n) upward bias from covariance
    # estimation, so the reference Gaussians are chosen with a distance that
    # dominates it.
    d = 8
    var_a = np.linspace(0.5, 2.0, d)
    var_b = np.linspace(1.0, 3.0, d)
    mu_b = np.full(d, 2.0)
    a = rng.standard_normal((10_000, d)) * np.sqrt(var_a)
    b = rng.standard_normal((10_000, d)) * np.sqrt(var_b) + mu_b
    closed_form = float(np.sum(mu_b**2) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2))
    assert metrics.fid(a, b) == pytest.approx(closed_form, rel=0.02)

    # identity cases
    img = rng.random((3, 32, 32))
    assert metrics.gssim(img, img) == pytest.approx(1.0, abs=1e-9)
    l1, mse, psnr = metrics.pixel_metrics(img, img)
    assert l1 == 0.0
    assert mse == 0.0
    assert psnr == 120.0


def test_criterion_09_reference_dropout_and_gate(overfit_run):
    _, result, model, _ = overfit_run
    rng = np.random.default_rng(0)
    tokens = torch.rand(1, 16, model.config.adapter.token_dim)
    ref = torch.rand(1, 3, 32, 32)
    drops = sum(
        model.adapter(tokens, ref, dropout_active=True, rng=rng).coarse_dropped
        for _ in range(10_000)
    )
    assert 0.14 <= drops / 10_000 <= 0.16

    alphas = [record["alpha"] for record in result.history]
    assert all(0.0 < alpha < 1.0 for alpha in alphas)
    print(f"\n  dropout frequency {drops / 10_000:.4f}; final gate alpha {alphas[-1]:.4f}")


def test_criterion_10_overfit_sanity(overfit_run):
    config, result, model, samples = overfit_run
    first = result.history[0]["loss"]
    final = float(np.mean([record["loss"] for record in result.history[-10:]]))
    assert first / final >= 5.0, f"loss dropped only {first / final:.2f}x"

    model_ssim, persistence_ssim = [], []
    for i, sample in enumerate(samples):
        gen = torch.Generator().manual_seed(100 + i)
        pred = model.predict_next(sample.frame_t, generator=gen)
        model_ssim.append(metrics.ssim(pred, sample.frame_t1))
        persistence_ssim.append(metrics.ssim(sample.frame_t, sample.frame_t1))
    assert np.mean(model_ssim) > np.mean(persistence_ssim)
    print(
        f"\n  loss drop {first / final:.2f}x; sampled ssim {np.mean(model_ssim):.4f} "
        f"vs persistence {np.mean(persistence_ssim):.4f}"
    )


def test_criterion_11_rollout_stability(overfit_run):
    _, _, model, samples = overfit_run
    seed_frame = samples[0].frame_t

    def model_step(frame, step_seed):
        gen = torch.Generator().manual_seed(step_seed)
        return model.predict_next(frame, generator=gen)

    trace_model = rollout(model_step, seed_frame, horizon=6, seed=0)
    trace_blur = rollout(lambda f, s: blur_predictor(f), seed_frame, horizon=6, seed=0)

    assert len(trace_model.frames) == 7
    for frame in trace_model.frames:
        assert frame.min() >= 0.0 and frame.max() <= 1.0
        assert torch.isfinite(frame).all()
    assert all(
        a > b for a, b in zip(trace_blur.hf_ratios, trace_blur.hf_ratios[1:])
    ), "blur baseline must lose high-frequency energy monotonically"
    assert all(
        m > b for m, b in zip(trace_model.hf_ratios, trace_blur.hf_ratios)
    ), "trained model must keep more high-frequency energy than the blur stub"
    print(
        f"\n  hf ratios model {[round(v, 3) for v in trace_model.hf_ratios]} "
        f"vs blur {[round(v, 3) for v in trace_blur.hf_ratios]}"
    )
