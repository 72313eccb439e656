from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch

from lvquant.data import TargetScaler, make_fold_plan
from lvquant.ensemble import (
    EnsembleSelection,
    average_prediction,
    ensemble_predict,
    nested_protocol,
    rank_candidates,
    search_optimal_subset,
    subset_error,
)
from lvquant.errors import CandidateOverflow, MissingCheckpoint
from lvquant.evaluate import PredictionSet, absolute_errors, mae
from lvquant.model import BackboneSpec, HeadSpec, build_2d, save_checkpoint
from lvquant.train import Configuration


def make_gt(n_patients=6, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"P{i:03d}" for i in range(n_patients) for _ in range(20)]
    frames = np.tile(np.arange(20), n_patients)
    values = rng.uniform(10, 2000, size=(len(ids), 11))
    probs = np.eye(2)[rng.integers(0, 2, len(ids))]
    return PredictionSet("ground_truth", ids, frames, values, probs)


def shifted(gt, cid, offset, probs=None):
    return PredictionSet(cid, list(gt.patient_ids), gt.frames, gt.values + offset, gt.probs if probs is None else probs)


def noisy_sets(gt, n, seed):
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n):
        p = np.clip(gt.probs[:, 0] + rng.normal(0, 0.4, len(gt)), 0, 1)
        out[f"c{i:02d}"] = shifted(gt, f"c{i:02d}", rng.normal(rng.normal(0, 5), 20, gt.values.shape), np.c_[p, 1 - p])
    return out


def test_perfect_member_dominates():
    gt = make_gt()
    sets = {"A": shifted(gt, "A", 0.0), "B": shifted(gt, "B", 3.0)}
    sel = search_optimal_subset(sets, gt, "areas")
    assert sel.members == ("A",) and sel.selection_error == 0.0


def test_three_config_fixture_matches_brute_force():
    gt = make_gt()
    gt.values = np.round(gt.values)  # integer truth keeps every subset mean exact
    sets = {"A": shifted(gt, "A", 2.0), "B": shifted(gt, "B", -2.0), "C": shifted(gt, "C", 2.0)}
    sel = search_optimal_subset(sets, gt, "areas")
    brute = {}
    for r in (1, 2, 3):
        for sub in itertools.combinations("ABC", r):
            avg = average_prediction(sets, sub)
            brute[sub] = mae(avg.values[:, :2], gt.values[:, :2])[0]
    best = min(brute.values())
    winners = sorted((len(s), s) for s, e in brute.items() if e == best)
    assert best == 0.0
    assert sel.members == winners[0][1] == ("A", "B")
    assert sel.selection_error == best


def test_rank_candidates():
    gt = make_gt()
    sets = {"x1": shifted(gt, "x1", 150.0), "x2": shifted(gt, "x2", 120.0), "x3": shifted(gt, "x3", 130.0)}
    assert rank_candidates(sets, gt)["areas"] == ["x2", "x3", "x1"]
    assert rank_candidates(sets, gt, k=50)["areas"] == ["x2", "x3", "x1"]
    assert rank_candidates(sets, gt, k=2)["areas"] == ["x2", "x3"]


def test_phase_ranked_by_error_rate():
    gt = make_gt()
    flip = gt.probs[:, ::-1].copy()
    half = gt.probs.copy()
    half[: len(gt) // 2] = flip[: len(gt) // 2]
    sets = {"good_reg": shifted(gt, "good_reg", 0.0, flip), "bad_reg": shifted(gt, "bad_reg", 50.0, half)}
    r = rank_candidates(sets, gt)
    assert r["areas"] == ["good_reg", "bad_reg"]
    assert r["phase"] == ["bad_reg", "good_reg"]


@pytest.mark.parametrize("task", ["areas", "dims", "rwt", "phase"])
def test_optimality_certificate(task):
    gt = make_gt(seed=1)
    sets = noisy_sets(gt, 12, seed=2)
    sel = search_optimal_subset(sets, gt, task)
    assert subset_error(sets, gt, task, sel.members) == sel.selection_error
    assert sel.selection_error <= sel.full_average_error
    assert sel.selection_error <= sel.best_singleton_error
    ids = sorted(sets)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        k = int(rng.integers(1, len(ids) + 1))
        sub = tuple(sorted(rng.choice(ids, k, replace=False)))
        assert subset_error(sets, gt, task, sub) >= sel.selection_error


def test_subset_error_matches_direct_metric():
    gt = make_gt(seed=4)
    sets = noisy_sets(gt, 5, seed=5)
    members = ("c01", "c03")
    avg = average_prediction(sets, members)
    assert subset_error(sets, gt, "dims", members) == pytest.approx(absolute_errors(avg, gt, "dims").mean(), rel=1e-12)


def test_overflow():
    gt = make_gt(n_patients=2)
    sets = noisy_sets(gt, 21, seed=0)
    with pytest.raises(CandidateOverflow):
        search_optimal_subset(sets, gt, "areas")


def test_selection_serialization(tmp_path):
    sel = EnsembleSelection("areas", ("a", "b"), 1.5, 2.0, pool=("a", "b", "c"))
    sel.save(tmp_path / "s.json")
    import json

    d = json.loads((tmp_path / "s.json").read_text())
    assert d["pool_hash"] == sel.pool_hash
    assert EnsembleSelection.from_dict(d) == sel


def test_nested_degenerate_pool():
    gt = make_gt(n_patients=10)
    plan = make_fold_plan(sorted(set(gt.patient_ids)), 0)
    one = {"only": shifted(gt, "only", 4.0)}
    res = nested_protocol(one, gt, plan)
    sel = res["areas"]
    assert sel.members == ("only",)
    assert sel.selection_error == pytest.approx(4.0) and sel.evaluation_error == pytest.approx(4.0)
    assert not set(sel.selection_patients) & set(sel.evaluation_patients)
    assert sorted(sel.selection_patients + sel.evaluation_patients) == sorted(set(gt.patient_ids))


def _stub_checkpoints(root, cid, bias, scaler):
    spec = BackboneSpec("tiny", 4, (4, 96), (1, 1))
    for fold in range(5):
        m = build_2d(spec, HeadSpec("regression"), seed=fold)
        with torch.no_grad():
            m.head.bias.fill_(bias)
        save_checkpoint(root / cid / str(fold) / "checkpoint", m.eval())
        scaler.save(root / cid / str(fold) / "scaler.json")


def test_ensemble_predict_stubs(tmp_path, canonical_studies):
    scaler = TargetScaler.fit(np.stack([np.full(11, -100.0), np.full(11, 100.0)]))
    cfg = Configuration(arch="tiny", init="random")
    _stub_checkpoints(tmp_path, "plus", 0.75, scaler)
    _stub_checkpoints(tmp_path, "minus", 0.25, scaler)
    configs = {"plus": cfg, "minus": cfg}
    studies = canonical_studies[:1]
    single = ensemble_predict(["plus"], studies, tmp_path, configs)
    np.testing.assert_allclose(single.values, 50.0, rtol=1e-6)
    both = ensemble_predict(["plus", "minus"], studies, tmp_path, configs)
    np.testing.assert_allclose(both.values, 0.0, atol=1e-5)
    with pytest.raises(MissingCheckpoint):
        ensemble_predict(["absent"], studies, tmp_path, configs)
    with pytest.raises(MissingCheckpoint):
        ensemble_predict(["plus"], studies, tmp_path / "elsewhere", configs)
