from __future__ import annotations

import itertools
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from lvquant.data import TargetScaler
from lvquant.errors import TooFewPairs, UndefinedCorrelation
from lvquant.evaluate import (
    PredictionSet,
    corner_offsets,
    error_rate,
    ground_truth,
    mae,
    midranks,
    pcc,
    predict_2d,
    predict_3d,
    task_metrics,
    wilcoxon_signed_rank,
    window_starts_covering,
)


class ConstantStub(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = torch.as_tensor(c, dtype=torch.float32)

    def forward(self, x):
        b = x.shape[0]
        return {"regression": self.c.expand(b, -1), "phase_logits": None, "seg_logits": None}


class CornerStub(nn.Module):
    """Outputs the mean of the crop's top-left pixel, so each corner gives a distinct value."""

    def forward(self, x):
        v = x[:, 0, 0, 0].unsqueeze(1).expand(-1, 11)
        return {"regression": v, "phase_logits": torch.stack([v[:, 0], -v[:, 0]], 1), "seg_logits": None}


class WindowStartStub(nn.Module):
    """For (b, 3, N_S, H, W) input returns, at every position, the window's first frame value."""

    def forward(self, x):
        first = x[:, 0, 0, 0, 0]
        n_s = x.shape[2]
        reg = first[:, None, None].expand(-1, n_s, 11)
        return {"regression": reg, "phase_logits": None, "seg_logits": None}


def frame_index_study(size=300):
    return SimpleNamespace(frames=np.arange(20, dtype=np.float32)[:, None, None] * np.ones((20, size, size), np.float32))


def test_corner_offsets():
    assert corner_offsets(300, 224) == [(0, 0), (0, 76), (76, 0), (76, 76)]


def test_constant_model_prediction():
    scaler = TargetScaler.fit(np.stack([np.zeros(11), np.full(11, 100.0)]))
    c = np.linspace(0.1, 0.9, 11)
    reg, prob = predict_2d(ConstantStub(c), frame_index_study(), scaler)
    assert prob is None
    np.testing.assert_allclose(reg, np.tile(scaler.invert(c.astype(np.float32)), (20, 1)), rtol=1e-6)


def test_four_crop_average():
    rng = np.random.default_rng(0)
    frames = rng.random((20, 300, 300)).astype(np.float32)
    reg, prob = predict_2d(CornerStub(), SimpleNamespace(frames=frames))
    for t in (0, 7):
        o = [frames[t, r, c] for r, c in corner_offsets()]
        assert reg[t, 0] == pytest.approx(np.mean(o), rel=1e-6)
    np.testing.assert_allclose(prob.sum(1), 1.0)


@pytest.mark.parametrize("n_s", [3, 5, 7, 10])
def test_window_coverage(n_s):
    for k in range(20):
        assert len(window_starts_covering(k, n_s)) == n_s
    counts = np.zeros(20, int)
    for start in range(20):
        for j in range(n_s):
            counts[(start + j) % 20] += 1
    assert np.all(counts == n_s)


def test_window_example():
    assert window_starts_covering(0, 5) == [0, 16, 17, 18, 19]


@pytest.mark.parametrize("n_s", [3, 5])
def test_overlap_average_equals_brute_force(n_s):
    reg, _ = predict_3d(WindowStartStub(), frame_index_study(), n_s)
    for k in range(20):
        brute = np.mean([s for s in range(20) if k in [(s + j) % 20 for j in range(n_s)]])
        assert reg[k, 0] == brute


def test_metric_examples():
    rng = np.random.default_rng(1)
    g = rng.normal(50, 10, size=(40, 3))
    assert mae(g, g) == (0.0, 0.0)
    assert pcc(g, g) == pytest.approx(1.0)
    assert mae(g + 5, g)[0] == pytest.approx(5.0)
    assert pcc(g + 5, g) == pytest.approx(1.0)
    c = g - g.mean(0)
    assert pcc(-c, c) == pytest.approx(-1.0)
    assert error_rate([0, 1, 1, 0], [0, 1, 1, 0]) == 0.0
    assert error_rate([0, 1, 1, 0], [1, 1, 1, 0]) == 0.25
    with pytest.raises(UndefinedCorrelation):
        pcc(np.ones(5), np.arange(5.0))


def test_metric_permutation_invariance():
    rng = np.random.default_rng(2)
    p, g = rng.random((30, 2)), rng.random((30, 2))
    perm = rng.permutation(30)
    assert mae(p[perm], g[perm]) == pytest.approx(mae(p, g))
    assert pcc(p[perm], g[perm]) == pytest.approx(pcc(p, g))


def test_task_metrics_on_ground_truth(raw_studies):
    gt = ground_truth(raw_studies[:3])
    m = task_metrics(gt, gt)
    assert m["areas"]["mae"] == 0.0 and m["rwt"]["pcc"] == pytest.approx(1.0)
    assert m["phase"]["er"] == 0.0


def test_prediction_csv_roundtrip(tmp_path, raw_studies):
    gt = ground_truth(raw_studies[:2])
    gt.to_csv(tmp_path / "p.csv")
    back = PredictionSet.read_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.values, gt.values)
    np.testing.assert_array_equal(back.probs, gt.probs)
    assert back.to_csv() == gt.to_csv()


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def brute_force_p(d):
    """Two-sided p-value by enumerating all 2^n sign assignments."""
    d = np.asarray(d, float)
    d = d[d != 0]
    r = midranks(np.abs(d))
    obs = min(r[d > 0].sum(), r[d < 0].sum())
    n = len(r)
    tot = 0
    for signs in itertools.product((0, 1), repeat=n):
        wp = r[np.array(signs, bool)].sum()
        tot += min(wp, r.sum() - wp) <= obs + 1e-9
    return tot / 2**n


def test_wilcoxon_examples():
    b = np.arange(10.0)
    res = wilcoxon_signed_rank(b + 1, b)
    assert res.statistic == 0 and res.significant
    assert res.p_value == pytest.approx(2 / 2**10)
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank(b, b)


def test_wilcoxon_matches_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(6, 11))
        a = np.round(rng.normal(size=n), 1)
        b = np.round(rng.normal(size=n), 1)
        res = wilcoxon_signed_rank(a, b)
        bf = min(1.0, brute_force_p(a - b))
        assert res.p_value == pytest.approx(bf, abs=1e-12)


def test_wilcoxon_calibration():
    rng = np.random.default_rng(4)
    sig = sum(wilcoxon_signed_rank(rng.random(20), rng.random(20)).significant for _ in range(1000))
    assert sig <= 100


def test_wilcoxon_normal_branch_matches_scipy():
    from scipy import stats

    rng = np.random.default_rng(5)
    a, b = rng.normal(size=60), rng.normal(0.3, 1, size=60)
    res = wilcoxon_signed_rank(a, b)
    assert res.method == "normal"
    ref = stats.wilcoxon(a, b, method="approx", correction=False)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-9)
