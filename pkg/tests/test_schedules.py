import pytest

from satforecast.config import ConfigurationError, TrainConfig
from satforecast.schedules import ema_tau_at, lr_at, weight_decay_at


@pytest.fixture
def config():
    return TrainConfig()


STEPS_PER_EPOCH = 10


class TestLearningRate:
    def test_start_value(self, config):
        assert lr_at(0, config, steps_per_epoch=STEPS_PER_EPOCH) == 2e-5

    def test_warmup_end(self, config):
        warmup = config.warmup_epochs * STEPS_PER_EPOCH
        assert lr_at(warmup, config, steps_per_epoch=STEPS_PER_EPOCH) == 1e-4

    def test_final_value(self, config):
        total = config.epochs * STEPS_PER_EPOCH
        assert lr_at(total, config, steps_per_epoch=STEPS_PER_EPOCH) == 1e-6

    def test_continuous_at_junction(self, config):
        warmup = config.warmup_epochs * STEPS_PER_EPOCH
        left = lr_at(warmup, config, steps_per_epoch=STEPS_PER_EPOCH)
        right = lr_at(warmup + 1, config, steps_per_epoch=STEPS_PER_EPOCH)
        assert left == pytest.approx(config.base_lr)
        assert abs(right - left) < config.base_lr * 0.01

    def test_monotone_decay_after_warmup(self, config):
        warmup = config.warmup_epochs * STEPS_PER_EPOCH
        total = config.epochs * STEPS_PER_EPOCH
        values = [lr_at(s, config, steps_per_epoch=STEPS_PER_EPOCH) for s in range(warmup, total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestWeightDecay:
    def test_endpoints(self, config):
        assert weight_decay_at(0, config, total_steps=1000) == 0.04
        assert weight_decay_at(1000, config, total_steps=1000) == 0.4

    def test_monotone_increase(self, config):
        values = [weight_decay_at(s, config, total_steps=100) for s in range(101)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestEmaSchedule:
    def test_endpoints_and_midpoint(self):
        assert ema_tau_at(0, 100) == 0.999
        assert ema_tau_at(50, 100) == pytest.approx(0.9995, rel=1e-12)
        assert ema_tau_at(100, 100) == 1.0

    def test_monotone_non_decreasing(self):
        values = [ema_tau_at(t, 200) for t in range(201)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_clamped_past_total(self):
        assert ema_tau_at(150, 100) == 1.0


class TestConfigValidation:
    def test_start_lr_above_base_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(start_lr=2e-4)

    def test_epochs_below_warmup_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0, warmup_epochs=1)

    def test_mismatched_cross_dim_rejected(self):
        from satforecast.config import AdapterConfig

        with pytest.raises(ConfigurationError):
            TrainConfig(adapter=AdapterConfig(cross_dim=512))
