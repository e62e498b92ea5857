import pytest
import torch

from satforecast.data import generate_synthetic_sequence
from satforecast.evaluate import evaluate, format_report_row, persistence_predict


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic_sequence(seed=0, num_steps=6, size=32)


class TestEvaluate:
    def test_identity_injection_wiring(self, samples):
        report = evaluate(
            None, samples,
            predict_fn=lambda s, seed: s.frame_t1.clone(),
            lpips_extractor="random-conv",
            feature_fn=lambda frame: frame.reshape(-1)[:16],
        )
        assert report.l1 == 0.0
        assert report.psnr == 120.0
        assert report.ssim == pytest.approx(1.0, abs=1e-9)
        assert report.gssim == pytest.approx(1.0, abs=1e-9)
        assert report.lpips == pytest.approx(0.0, abs=1e-9)
        assert report.fid == pytest.approx(0.0, abs=1e-6)

    def test_sample_count_bookkeeping(self, samples):
        report = evaluate(None, samples, predict_fn=persistence_predict, feature_fn=None)
        assert report.sample_count == len(samples)

    def test_deterministic_given_seed(self, samples):
        kwargs = dict(predict_fn=persistence_predict, feature_fn=None, sampler_seed=3)
        a = evaluate(None, samples, **kwargs)
        b = evaluate(None, samples, **kwargs)
        assert a == b

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            evaluate(None, [], predict_fn=persistence_predict)

    def test_persistence_is_imperfect_on_drifting_scenes(self, samples):
        report = evaluate(None, samples, predict_fn=persistence_predict, feature_fn=None)
        assert report.l1 > 0.0
        assert report.ssim < 1.0

    def test_report_row_formatting(self, samples):
        report = evaluate(None, samples, predict_fn=persistence_predict, feature_fn=None)
        row = format_report_row("persistence", report)
        assert "persistence" in row
        assert f"n={len(samples)}" in row
