from __future__ import annotations

import numpy as np
import pytest
import torch

from lvquant.data import make_fold_plan
from lvquant.errors import ConfigError
from lvquant.evaluate import PredictionSet
from lvquant.model import BackboneSpec, HeadSpec
from lvquant.train import (
    Configuration,
    TrainRecord,
    TrainSettings,
    composite_loss,
    expand_space,
    load_experiment,
    run_space,
    train_one,
)

TINY = {"tiny": BackboneSpec("tiny", 4, (4, 96), (1, 1))}
FAST = TrainSettings(epochs=2, samples_per_patient=1)


def test_loss_zero_when_exact():
    y = torch.rand(4, 11)
    total, comp = composite_loss({"regression": y, "phase_logits": None, "seg_logits": None}, y, None, None, HeadSpec("regression"), False)
    assert float(total) == 0.0 and comp["ce_phase"] == comp["ce_seg"] == 0.0


def test_loss_weights():
    # logits chosen so the CE terms have prescribed values
    b = 4
    target = torch.zeros(b, 11)
    reg = torch.full((b, 11), 0.2)  # mse 0.04
    p = np.exp(-0.6)
    phase_logits = torch.tensor([[np.log(p), np.log(1 - p)]] * b, dtype=torch.float32)
    q = np.exp(-1.0)
    seg = torch.zeros(b, 3, 2, 2)
    seg[:, 0] = float(np.log(q))
    seg[:, 1] = seg[:, 2] = float(np.log((1 - q) / 2))
    res = {"regression": reg, "phase_logits": phase_logits, "seg_logits": seg}
    total, comp = composite_loss(res, target, torch.zeros(b), torch.zeros(b, 2, 2), HeadSpec("joint"), True)
    assert comp["mse"] == pytest.approx(0.04, abs=1e-6)
    assert comp["ce_phase"] == pytest.approx(0.6, abs=1e-6)
    assert comp["ce_seg"] == pytest.approx(1.0, abs=1e-6)
    assert float(total) == pytest.approx(0.17, abs=1e-6)


def test_loss_classification_only():
    logits = torch.randn(3, 2)
    res = {"regression": None, "phase_logits": logits, "seg_logits": None}
    total, comp = composite_loss(res, None, torch.tensor([0, 1, 0]), None, HeadSpec("classification"), False)
    assert comp["mse"] == 0.0 and comp["ce_seg"] == 0.0
    assert float(total) == pytest.approx(0.05 * comp["ce_phase"], rel=1e-6)


def test_steps_per_epoch():
    ids = [f"P{i:03d}" for i in range(56)]
    plan = make_fold_plan(ids, 0)
    s = TrainSettings()
    n_train = len(plan.train_patients(0))
    assert n_train in (44, 45)
    assert s.steps_per_epoch(n_train) == {44: 55, 45: 56}[n_train]
    assert s.steps_per_epoch(44) == 55 and s.steps_per_epoch(45) == 56


def test_configuration_validation():
    with pytest.raises(ConfigError):
        Configuration(dim="3D")
    with pytest.raises(ConfigError):
        Configuration(dim="2D", n_s=5)
    with pytest.raises(ConfigError):
        Configuration(init="imagenet")
    with pytest.raises(ConfigError):
        Configuration.from_dict({"arch": "mini", "bogus": 1})
    c = Configuration(dim="3D", n_s=5, input_mode=None)
    assert Configuration.from_dict(c.to_dict()) == c
    assert c.config_id != Configuration().config_id


def test_expand_space():
    cfgs = expand_space({"arch": ["mini"], "dim": ["2D", "3D"], "n_s": [3, 5], "init": ["random"]})
    labels = sorted(c.label for c in cfgs)
    assert labels == ["mini 2D nopre", "mini 3D NS3 nopre", "mini 3D NS5 nopre"]


def test_load_experiment(tmp_path):
    f = tmp_path / "exp.yaml"
    f.write_text("defaults:\n  train:\n    adam_eps: 1.0e-7\nspace:\n  arch: [mini]\n  init: [random]\n")
    exp = load_experiment(f, profile="desk")
    assert exp["settings"].epochs < 150 and exp["settings"].adam_eps == 1e-7
    assert exp["settings"].lr == 1e-4 and exp["settings"].adam_betas == (0.9, 0.999)
    assert [c.init for c in exp["configs"]] == ["random"]
    with pytest.raises(ConfigError):
        load_experiment(f, profile="nope")


def test_smoke_training_reduces_loss(canonical_studies):
    studies = canonical_studies[:10]
    plan = make_fold_plan([s.patient_id for s in studies], 0)
    fold = next(f for f in range(5) if len(plan.train_patients(f)) == 8)
    cfg = Configuration(arch="mini", init="random")
    _, _, rec = train_one(cfg, fold, studies, plan, TrainSettings(epochs=5))
    assert rec.epochs[-1]["total"] < rec.epochs[0]["total"]
    assert not rec.seen_patients & set(plan.patients(fold))


def test_determinism_and_decomposition(canonical_studies):
    studies = canonical_studies[:10]
    plan = make_fold_plan([s.patient_id for s in studies], 0)
    cfg = Configuration(arch="tiny", init="random", sr=True, targets="joint")
    a = train_one(cfg, 0, studies, plan, FAST, backbones=TINY)[2]
    b = train_one(cfg, 0, studies, plan, FAST, backbones=TINY)[2]
    assert a.epochs[0]["total"] == b.epochs[0]["total"]
    for e in a.epochs:
        assert e["total"] == pytest.approx(e["mse"] + 0.05 * e["ce_phase"] + 0.1 * e["ce_seg"], abs=1e-6)
        assert e["ce_seg"] > 0


def test_run_space_store(tmp_path, canonical_studies):
    studies = canonical_studies[:10]
    plan = make_fold_plan([s.patient_id for s in studies], 0)
    cfgs = [Configuration(arch="tiny", init="random"), Configuration(arch="tiny", init="random", sr=True)]
    runs = tmp_path / "runs"
    res = run_space(cfgs, plan, studies, runs, FAST, backbones=TINY)
    assert set(res) == {c.config_id for c in cfgs}
    for c in cfgs:
        ps = res[c.config_id]
        assert sorted(set(ps.patient_ids)) == sorted(s.patient_id for s in studies)
        assert len(ps) == 10 * 20
        for f in range(5):
            assert set(ps.select_patients(plan.patients(f)).folds) == {f}
            assert (runs / c.config_id / str(f) / "checkpoint" / "params.bin").is_file()
    seg = TrainRecord.read_csv(runs / cfgs[1].config_id / "0" / "record.csv")
    assert all(r["ce_seg"] > 0 for r in seg)
    stamp = (runs / cfgs[0].config_id / "0" / "predictions.csv").stat().st_mtime_ns
    again = run_space(cfgs, plan, studies, runs, FAST, backbones=TINY)
    assert (runs / cfgs[0].config_id / "0" / "predictions.csv").stat().st_mtime_ns == stamp
    assert again[cfgs[0].config_id].to_csv() == res[cfgs[0].config_id].to_csv()
    assert PredictionSet.read_csv(runs / cfgs[0].config_id / "predictions.csv").to_csv() == res[cfgs[0].config_id].to_csv()


def test_run_space_records_failures(tmp_path, canonical_studies):
    studies = canonical_studies[:10]
    plan = make_fold_plan([s.patient_id for s in studies], 0)
    bad = Configuration(arch="tiny", init="pretrained")  # no checkpoint supplied
    good = Configuration(arch="tiny", init="random")
    res = run_space([bad, good], plan, studies, tmp_path, FAST, backbones=TINY, folds=[0])
    assert list(res) == [good.config_id]
    assert (tmp_path / "failures.json").is_file()
    assert (tmp_path / bad.config_id / ".0.partial" / "error.txt").is_file()
