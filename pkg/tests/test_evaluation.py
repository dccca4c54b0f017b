import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from singface.decoders import sample_blinks
from singface.errors import DegenerateInput, LengthMismatch, ShapeMismatch, TooShort
from singface.evaluation import (
    MetricReport,
    aggregate,
    blink_stats,
    cca_metric,
    evaluate,
    roughness,
    speed_cca,
    write_reports,
)


def cca_eigen_oracle(x, y):
    """Largest root of the CCA generalised eigenproblem [0 Sxy; Syx 0] w = rho [Sxx 0; 0 Syy] w."""
    x = x - x.mean(0)
    y = y - y.mean(0)
    dx = x.shape[1]
    sxx, syy, sxy = x.T @ x, y.T @ y, x.T @ y
    A = np.block([[np.zeros((dx, dx)), sxy], [sxy.T, np.zeros((y.shape[1],) * 2)]])
    B = scipy.linalg.block_diag(sxx, syy)
    return float(scipy.linalg.eigh(A, B, eigvals_only=True)[-1])


def test_cca_self_and_sign():
    x = np.random.default_rng(0).standard_normal((50, 3))
    assert cca_metric(x, x) == pytest.approx(1.0, abs=1e-12)
    g = np.random.default_rng(1).standard_normal(40)
    assert cca_metric(-g, g) == pytest.approx(1.0, abs=1e-12)


def test_cca_d1_is_abs_pearson():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(60), rng.standard_normal(60)
    assert cca_metric(a, b) == pytest.approx(abs(np.corrcoef(a, b)[0, 1]), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cca_matches_eigen_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((30, 2))
    y = 0.5 * x @ rng.standard_normal((2, 2)) + rng.standard_normal((30, 2))
    assert cca_metric(x, y) == pytest.approx(cca_eigen_oracle(x, y), abs=1e-8)


def test_cca_errors():
    with pytest.raises(DegenerateInput):
        cca_metric(np.ones((10, 1)), np.arange(10.0))
    with pytest.raises(DegenerateInput):
        cca_metric(np.random.rand(3, 3), np.random.rand(3, 3))
    with pytest.raises(ShapeMismatch):
        cca_metric(np.random.rand(10, 2), np.random.rand(10, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_cca_symmetric_and_affine_invariant(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((40, d))
    y = x @ rng.standard_normal((d, d)) * 0.3 + rng.standard_normal((40, d))
    A = rng.standard_normal((d, d)) + 3 * np.eye(d)
    rho = cca_metric(x, y)
    assert 0.0 <= rho <= 1.0
    assert cca_metric(y, x) == pytest.approx(rho, abs=1e-9)
    assert cca_metric(x @ A + rng.standard_normal(d), y) == pytest.approx(rho, abs=1e-6)


def test_speed_cca_examples():
    rng = np.random.default_rng(0)
    gt = np.cumsum(rng.standard_normal((100, 6)), axis=0)
    assert speed_cca(gt, gt) == pytest.approx(1.0, abs=1e-12)
    assert speed_cca(-gt, gt) == pytest.approx(1.0, abs=1e-12)
    assert speed_cca(gt + 5.0, gt) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(TooShort):
        speed_cca(gt[:2], gt[:2])


def test_roughness_examples():
    assert roughness(np.full((10, 3), 0.7)) == 0.0
    t = np.arange(10.0)
    assert roughness(np.stack([2 * t, -t, 0.5 * t], 1)) == 0.0
    assert roughness(np.array([0.0, 1, 4, 9, 16])) == pytest.approx(2.4, abs=1e-12)
    with pytest.raises(TooShort):
        roughness(np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_roughness_invariances(seed, c):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((30, 3))
    t = np.arange(30.0)[:, None]
    base = roughness(r)
    assert roughness(r + rng.standard_normal(3) * t + rng.standard_normal(3)) == pytest.approx(base, rel=1e-9, abs=1e-9)
    assert roughness(c * r) == pytest.approx(c * c * base, rel=1e-9, abs=1e-12)


def test_blink_stats_examples():
    assert blink_stats(np.zeros(300)) == (0.0, 0.0)
    eye = np.zeros(300)
    eye[100:106] = 1.0
    rate, dur = blink_stats(eye)
    assert rate == pytest.approx(0.1) and dur == pytest.approx(0.2)


def test_blink_stats_excludes_long_closures():
    eye = np.zeros(300)
    eye[10:25] = 1.0  # exactly 0.5 s: long
    eye[50:56] = 1.0
    assert blink_stats(eye) == (pytest.approx(0.1), pytest.approx(0.2))


def test_blink_stats_recovers_sampler():
    s = sample_blinks(100.0, seed=11)
    rate, dur = blink_stats(s.track)
    assert round(rate * 100.0) == len(s.starts)
    assert abs(dur - s.durations.mean()) < 0.02


def test_evaluate_and_reports(tmp_path):
    rng = np.random.default_rng(0)
    pose = np.cumsum(rng.standard_normal((200, 6)), 0)
    eye = np.zeros(200)
    eye[40:46] = 1.0
    eye[120:126] = 0.8
    rep = evaluate({"pose": pose, "eye": eye}, {"pose": pose, "eye": eye})
    assert rep.cca_pose_speed == pytest.approx(1.0) and rep.cca_eye == pytest.approx(1.0)
    assert rep.rough == pytest.approx(roughness(pose[:, :3]))
    with pytest.raises(LengthMismatch):
        evaluate({"pose": pose[:-1], "eye": eye}, {"pose": pose, "eye": eye})
    flat = evaluate({"pose": pose, "eye": np.zeros(200)}, {"pose": pose, "eye": eye})
    assert flat.cca_eye == 0.0 and flat.blinks_per_s == 0.0
    doc = write_reports({"a": rep, "b": flat}, tmp_path)
    assert doc["mean"]["cca_eye"] == pytest.approx(0.5)
    assert json.loads((tmp_path / "metrics.json").read_text()) == doc
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("sequence,cca_pose_speed") and lines[-1].startswith("mean,")


def test_shuffled_pred_low_speed_cca():
    rng = np.random.default_rng(5)
    t = np.arange(1000)
    env = 0.5 + 0.5 * np.sin(2 * np.pi * t / 90)
    steps = env[:, None] * (0.5 + rng.random((1000, 6))) * np.sign(rng.standard_normal((1000, 6)))
    gt = np.cumsum(steps, 0)
    shuffled = gt[rng.permutation(1000)]
    assert speed_cca(gt, gt) == pytest.approx(1.0)
    assert speed_cca(shuffled, gt) < 0.2


def test_metric_report_invariants():
    with pytest.raises(ValueError):
        MetricReport(1.2, 0.5, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricReport(0.5, 0.5, -1.0, 0.0, 0.0)
    agg = aggregate([MetricReport(0.2, 0.4, 1.0, 0.5, 0.2), MetricReport(0.4, 0.6, 3.0, 0.3, 0.1)])
    assert agg.cca_pose_speed == pytest.approx(0.3) and agg.rough == pytest.approx(2.0)
