import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from satforecast.flow import (
    diffusion_loss,
    euler_integrate,
    make_flow_sample,
    noise_to_strength,
    one_step_estimate,
    sigma_schedule,
    ssim_torch,
)
from satforecast.jepa_loss import LossNaNError


def _latent(seed=0, shape=(2, 4, 8, 8)):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen)


class TestFlowSample:
    def test_invariants_bit_exact(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(100):
            x0 = torch.randn(2, 4, 8, 8, generator=gen)
            fs = make_flow_sample(x0, gen)
            s = fs.sigma.reshape(-1, 1, 1, 1)
            assert torch.equal(fs.x_sigma, (1.0 - s) * x0 + s * fs.epsilon)
            assert torch.equal(fs.v_star, fs.epsilon - x0)

    def test_sigma_zero_endpoint(self):
        x0 = _latent()
        fs = make_flow_sample(x0, torch.Generator().manual_seed(0), sigma=torch.zeros(2))
        assert torch.equal(fs.x_sigma, x0)

    def test_sigma_one_endpoint(self):
        x0 = _latent()
        fs = make_flow_sample(x0, torch.Generator().manual_seed(0), sigma=torch.ones(2))
        assert torch.equal(fs.x_sigma, fs.epsilon)

    def test_velocity_closes_the_path(self):
        fs = make_flow_sample(_latent(), torch.Generator().manual_seed(1))
        torch.testing.assert_close(fs.x0 + fs.v_star, fs.epsilon, rtol=0, atol=1e-6)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_sigma_in_unit_interval(self, seed):
        fs = make_flow_sample(_latent(), torch.Generator().manual_seed(seed))
        assert torch.all(fs.sigma >= 0) and torch.all(fs.sigma <= 1)

    def test_logit_normal_distribution_supported(self):
        fs = make_flow_sample(_latent(), torch.Generator().manual_seed(0),
                              distribution="logit-normal")
        assert torch.all(fs.sigma > 0) and torch.all(fs.sigma < 1)


class TestSigmaSchedule:
    def test_twenty_steps_ends_at_zero(self):
        grid = sigma_schedule(0.35, 20)
        assert len(grid) == 20
        assert grid[-1] == 0.0
        assert np.all(np.diff(grid) < 0)

    def test_single_step(self):
        grid = sigma_schedule(1.0, 1)
        assert list(grid) == [0.0]

    def test_steps_below_one_rejected(self):
        with pytest.raises(ValueError):
            sigma_schedule(0.35, 0)


class TestEulerIntegrator:
    def test_constant_field_one_step_recovery(self):
        # dx/dsigma = eps - x0 is constant: one Euler step from sigma=1 lands on x0
        x0 = _latent(0)
        eps = _latent(1)
        out = euler_integrate(lambda x, s: eps - x0, eps, strength=1.0, steps=1)
        assert float((out - x0).abs().max()) < 1e-5

    def test_straight_line_field_exact_for_any_steps(self):
        # v(x, sigma) = (x - x0) / sigma has straight-line solutions, so the
        # sampler is exact no matter how coarse the grid
        x0 = _latent(0)
        eps = _latent(1)
        for steps in (1, 3, 7):
            out = euler_integrate(lambda x, s: (x - x0) / max(s, 1e-12), eps, 1.0, steps)
            assert float((out - x0).abs().max()) < 1e-5

    def test_first_order_convergence_on_nonlinear_field(self):
        # dx/dsigma = cos(sigma) x  =>  x(0) = x(1) exp(-sin 1)
        x_start = _latent(2, shape=(1, 2, 4, 4)).double()
        exact = x_start * math.exp(-math.sin(1.0))

        def err(steps):
            out = euler_integrate(lambda x, s: math.cos(s) * x, x_start, 1.0, steps)
            return float((out - exact).abs().max())

        for steps in (20, 40, 80):
            ratio = err(steps) / err(2 * steps)
            assert 1.7 <= ratio <= 2.3


class TestNoiseToStrength:
    def test_zero_strength_returns_input(self):
        init = _latent()
        out = noise_to_strength(init, 0.0, torch.Generator().manual_seed(0))
        assert torch.equal(out, init)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            noise_to_strength(_latent(), 1.5)


class TestOneStepEstimate:
    def test_recovers_x0_for_true_velocity(self):
        fs = make_flow_sample(_latent(), torch.Generator().manual_seed(0))
        est = one_step_estimate(fs.x_sigma, fs.sigma, fs.v_star)
        torch.testing.assert_close(est, fs.x0, rtol=0, atol=1e-5)


class TestDiffusionLoss:
    def test_perfect_prediction_is_zero(self):
        v = _latent()
        img = torch.rand(2, 3, 32, 32)
        total, terms = diffusion_loss(v, v.clone(), img, img.clone())
        assert terms["velocity_mse"] == 0.0
        assert terms["ssim"] == pytest.approx(0.0, abs=1e-6)
        assert float(total) == pytest.approx(0.0, abs=1e-7)

    def test_constant_offset_mse(self):
        v = _latent()
        total, terms = diffusion_loss(v, v + 0.3)
        assert terms["velocity_mse"] == pytest.approx(0.09, rel=1e-5)

    def test_ssim_weight_contribution(self):
        v = _latent()
        gen = torch.Generator().manual_seed(0)
        pred_img = torch.rand(1, 3, 32, 32, generator=gen)
        target_img = torch.rand(1, 3, 32, 32, generator=gen)
        total, terms = diffusion_loss(v, v.clone(), pred_img, target_img, ssim_weight=0.1)
        expected = 0.1 * (1.0 - float(ssim_torch(pred_img, target_img)))
        assert float(total) == pytest.approx(expected, rel=1e-5)

    def test_nan_velocity_raises(self):
        v = _latent()
        bad = v.clone()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(LossNaNError):
            diffusion_loss(bad, v)

    def test_gradient_matches_central_differences_through_both_terms(self):
        torch.manual_seed(5)
        b, c, s = 1, 2, 16
        x_sigma = torch.rand(b, c, s, s, dtype=torch.float64)
        sigma = torch.full((b,), 0.6, dtype=torch.float64)
        v_star = torch.randn(b, c, s, s, dtype=torch.float64)
        target = torch.rand(b, 3, s, s, dtype=torch.float64)
        decode_w = torch.randn(3, c, 1, 1, dtype=torch.float64) * 0.3

        def loss_fn(v_pred):
            preview = torch.nn.functional.conv2d(
                one_step_estimate(x_sigma, sigma, v_pred), decode_w
            ).sigmoid()
            return diffusion_loss(v_pred, v_star, preview, target)[0]

        v_pred = torch.randn(b, c, s, s, dtype=torch.float64, requires_grad=True)
        loss_fn(v_pred).backward()
        analytic = v_pred.grad.reshape(-1)

        eps = 1e-6
        flat = v_pred.detach().reshape(-1)
        rng = np.random.default_rng(1)
        for k in rng.choice(flat.numel(), size=20, replace=False):
            bump = torch.zeros_like(flat)
            bump[k] = eps
            up = float(loss_fn((flat + bump).reshape(b, c, s, s)))
            down = float(loss_fn((flat - bump).reshape(b, c, s, s)))
            numeric = (up - down) / (2 * eps)
            assert numeric == pytest.approx(float(analytic[k]), rel=1e-3, abs=1e-9)


class TestSsimTorch:
    def test_identity(self):
        img = torch.rand(1, 3, 32, 32)
        assert float(ssim_torch(img, img)) == pytest.approx(1.0, abs=1e-6)

    def test_rejects_small_images(self):
        with pytest.raises(ValueError):
            ssim_torch(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
