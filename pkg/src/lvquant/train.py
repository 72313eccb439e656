"""Configurations, composite loss, per-fold training and the cross-validation job store.

Job store layout::

    runs/<config-hash>/config.json
    runs/<config-hash>/<fold>/checkpoint/{params.bin, checkpoint.json}
    runs/<config-hash>/<fold>/scaler.json
    runs/<config-hash>/<fold>/record.csv
    runs/<config-hash>/<fold>/predictions.csv
    runs/<config-hash>/predictions.csv      # concatenation over folds
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import shutil
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import augment
from .data import FoldPlan, Study, TargetScaler, write_json
from .errors import ConfigError, NonFiniteLoss
from .evaluate import N_S_CHOICES, PredictionSet, predict_2d, predict_3d
from .model import BACKBONES, BackboneSpec, HeadSpec, LVNet, build_2d, inflate_to_3d, load_checkpoint, model_from_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LAMBDA_P = 0.05
LAMBDA_S = 0.1


@dataclass(frozen=True)
class Configuration:
    """One training setup; the tuple fully determines a run."""

    arch: str = "mini"
    dim: str = "2D"
    n_s: int | None = None
    init: str = "pretrained"
    sr: bool = False
    targets: str = "regression"
    input_mode: str | None = "replicate"
    seed: int = 0

    def __post_init__(self):
        if self.dim not in ("2D", "3D"):
            raise ConfigError(f"dim must be 2D or 3D, got {self.dim!r}")
        if self.dim == "3D":
            if self.n_s not in N_S_CHOICES:
                raise ConfigError(f"3D configurations need n_s in {N_S_CHOICES}")
            if self.input_mode is not None:
                raise ConfigError("input_mode applies to 2D configurations only")
        else:
            if self.n_s is not None:
                raise ConfigError("n_s applies to 3D configurations only")
            if self.input_mode not in ("replicate", "neighbors"):
                raise ConfigError("2D configurations need input_mode replicate|neighbors")
        if self.init not in ("random", "pretrained"):
            raise ConfigError(f"init must be random|pretrained, got {self.init!r}")
        HeadSpec(self.targets)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Configuration":
        d = dict(d)
        if d.get("dim") == "3D":
            d.setdefault("input_mode", None)
        if "sr" in d and isinstance(d["sr"], str):
            d["sr"] = d["sr"].lower() in ("on", "true", "yes")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**d)

    @property
    def config_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    @property
    def label(self) -> str:
        parts = [self.arch, self.dim]
        if self.dim == "3D":
            parts.append(f"NS{self.n_s}")
        elif self.input_mode == "neighbors":
            parts.append("nb")
        if self.init == "random":
            parts.append("nopre")
        if self.sr:
            parts.append("SR")
        parts.append({"regression": "", "joint": "Joint", "classification": "Class."}[self.targets])
        return " ".join(p for p in parts if p)

    @property
    def head(self) -> HeadSpec:
        return HeadSpec(self.targets)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 150
    samples_per_patient: int = 10
    batch_size: int = 8
    crop_size: int = 224
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lambda_p: float = LAMBDA_P
    lambda_s: float = LAMBDA_S

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainSettings":
        """Short CI profile: fewer epochs, every other contract unchanged."""
        return replace(cls(epochs=12), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainSettings":
        d = {k: v for k, v in dict(d).items() if k in {f.name for f in fields(cls)}}
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def steps_per_epoch(self, n_train_patients: int) -> int:
        # last partial batch dropped
        return (self.samples_per_patient * n_train_patients) // self.batch_size


# ---------------------------------------------------------------------------- loss


def composite_loss(result: dict, targets, phase, masks, head: HeadSpec, sr: bool, lambda_p=LAMBDA_P, lambda_s=LAMBDA_S):
    """MSE on scaled indices + lambda_p * CE(phase) + lambda_s * CE(segmentation).

    Terms are included only for the enabled heads. Returns ``(total,
    components)`` where components are detached floats ``mse``, ``ce_phase``,
    ``ce_seg`` (0.0 when absent).
    """
    ref = next(v for v in result.values() if v is not None)
    total = torch.zeros((), dtype=ref.dtype)
    comp = {"mse": 0.0, "ce_phase": 0.0, "ce_seg": 0.0}
    if head.has_regression:
        mse = F.mse_loss(result["regression"], torch.as_tensor(targets, dtype=ref.dtype))
        total = total + mse
        comp["mse"] = float(mse.detach())
    if head.has_phase:
        logits = result["phase_logits"].reshape(-1, 2)
        ce_p = F.cross_entropy(logits, torch.as_tensor(phase).reshape(-1).long())
        total = total + lambda_p * ce_p
        comp["ce_phase"] = float(ce_p.detach())
    if sr:
        ce_s = F.cross_entropy(result["seg_logits"], torch.as_tensor(masks).long())
        total = total + lambda_s * ce_s
        comp["ce_seg"] = float(ce_s.detach())
    return total, comp


# ------------------------------------------------------------------------ training


@dataclass
class TrainRecord:
    config_id: str
    fold: int
    epochs: list = field(default_factory=list)  # dicts: epoch, total, mse, ce_phase, ce_seg
    wall_time: float = 0.0
    checkpoint: str | None = None
    train_patients: list = field(default_factory=list)
    seen_patients: set = field(default_factory=set)

    RECORD_COLUMNS = ("epoch", "total", "mse", "ce_phase", "ce_seg")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.RECORD_COLUMNS)
            for e in self.epochs:
                w.writerow([e["epoch"]] + [repr(float(e[c])) for c in self.RECORD_COLUMNS[1:]])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="", encoding="utf-8") as f:
            return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


def resolve_backbone(arch: str, backbones: dict | None = None) -> BackboneSpec:
    table = dict(BACKBONES)
    table.update(backbones or {})
    if arch not in table:
        raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(table)}")
    return table[arch]


def build_model(config: Configuration, pretrained=None, backbones=None, seed: int | None = None) -> LVNet:
    spec = resolve_backbone(config.arch, backbones)
    init = config.init
    if init == "pretrained" and pretrained is None:
        raise ConfigError(f"configuration {config.label} needs a pretrained body checkpoint")
    model = build_2d(spec, config.head, init, pretrained if init == "pretrained" else None, sr=config.sr, seed=seed)
    if config.dim == "3D":
        model = inflate_to_3d(model)
    return model


def train_one(
    config: Configuration,
    fold: int,
    studies: list[Study],
    plan: FoldPlan,
    settings: TrainSettings = TrainSettings(),
    pretrained=None,
    out_dir=None,
    backbones=None,
    deadline: float | None = None,
):
    """Train ``config`` on every fold except ``fold``.

    Returns ``(model, scaler, record)``. When ``out_dir`` is given the
    checkpoint, scaler and per-epoch record are written there.
    """
    t0 = time.perf_counter()
    by_id = {s.patient_id: s for s in studies}
    train_ids = plan.train_patients(fold)
    train = [by_id[p] for p in train_ids]
    scaler = TargetScaler.fit(train)
    seed = int(config.seed) * 1000 + int(fold)
    torch.manual_seed(seed)
    model = build_model(config, pretrained, backbones, seed=seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr, betas=tuple(settings.adam_betas), eps=settings.adam_eps)
    rng = augment.worker_rng(seed, 0)
    record = TrainRecord(config.config_id, fold, train_patients=list(train_ids))
    steps = settings.steps_per_epoch(len(train))
    head = config.head
    for epoch in range(settings.epochs):
        sums = {"total": 0.0, "mse": 0.0, "ce_phase": 0.0, "ce_seg": 0.0}
        for _ in range(steps):
            samples = augment.build_batch(
                train,
                mode=config.dim,
                b=settings.batch_size,
                crop_size=settings.crop_size,
                n_s=config.n_s,
                input_mode=config.input_mode or "replicate",
                rng=rng,
                scaler=scaler,
            )
            record.seen_patients.update(s.patient_id for s in samples)
            images, masks, targets, phase = augment.collate(samples)
            result = model(torch.from_numpy(images), with_seg=config.sr)
            loss, comp = composite_loss(result, targets, phase, masks, head, config.sr, settings.lambda_p, settings.lambda_s)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"{config.label} fold {fold} epoch {epoch}: loss={loss.item()}; transforms="
                    + json.dumps([{"patient": s.patient_id, **s.record} for s in samples])
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["total"] += float(loss.detach())
            for k in ("mse", "ce_phase", "ce_seg"):
                sums[k] += comp[k]
        record.epochs.append({"epoch": epoch, **{k: v / steps for k, v in sums.items()}})
        log.info("%s fold %d epoch %d loss %.5f", config.label, fold, epoch, record.epochs[-1]["total"])
        if deadline is not None and time.perf_counter() > deadline:
            raise TimeoutError(f"{config.label} fold {fold} passed its deadline at epoch {epoch}")
    model.eval()
    record.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint", model, meta={"config": config.to_dict(), "fold": fold, "scaler": "../scaler.json"})
        scaler.save(out / "scaler.json")
        record.to_csv(out / "record.csv")
        record.checkpoint = str(out / "checkpoint")
    return model, scaler, record


def predict_study(model, study: Study, config: Configuration, scaler: TargetScaler, fold: int = -1) -> PredictionSet:
    if config.dim == "2D":
        reg, prob = predict_2d(model, study, scaler, config.input_mode)
    else:
        reg, prob = predict_3d(model, study, config.n_s, scaler)
    return PredictionSet.from_study(config.config_id, study, reg, prob, fold)


def load_fold_model(run_dir):
    run_dir = Path(run_dir)
    return model_from_checkpoint(run_dir / "checkpoint"), TargetScaler.load(run_dir / "scaler.json")


# ------------------------------------------------------------------- job store


def run_space(
    configs,
    plan: FoldPlan,
    studies: list[Study],
    runs_dir,
    settings: TrainSettings = TrainSettings(),
    pretrained=None,
    backbones=None,
    folds=None,
) -> dict:
    """Train every (config, fold), predict each held-out fold and persist PredictionSets.

    Completed folds (``predictions.csv`` present) are skipped. A failing job
    writes ``error.txt`` and the remaining jobs continue. Returns
    ``{config_id: PredictionSet}`` for configurations whose folds all finished.
    """
    runs = Path(runs_dir)
    by_id = {s.patient_id: s for s in studies}
    folds = list(range(plan.n_folds)) if folds is None else list(folds)
    results, failures = {}, []
    for config in configs:
        cdir = runs / config.config_id
        cdir.mkdir(parents=True, exist_ok=True)
        write_json(cdir / "config.json", {"config": config.to_dict(), "label": config.label, "settings": settings.to_dict()})
        fold_sets = []
        for fold in folds:
            fdir = cdir / str(fold)
            pred_path = fdir / "predictions.csv"
            if pred_path.is_file():
                fold_sets.append(PredictionSet.read_csv(pred_path))
                continue
            tmp = cdir / f".{fold}.partial"
            if tmp.exists():
                shutil.rmtree(tmp)
            try:
                model, scaler, record = train_one(config, fold, studies, plan, settings, pretrained, tmp, backbones)
                held_out = plan.patients(fold)
                leaked = record.seen_patients & set(held_out)
                if leaked:
                    raise RuntimeError(f"held-out patients in training stream: {sorted(leaked)}")
                preds = PredictionSet.concat([predict_study(model, by_id[p], config, scaler, fold) for p in held_out])
                preds.to_csv(tmp / "predictions.csv")
                if fdir.exists():
                    shutil.rmtree(fdir)
                tmp.rename(fdir)
                fold_sets.append(preds)
            except Exception as exc:  # noqa: BLE001 - recorded, remaining jobs proceed
                log.error("job %s fold %d failed: %s", config.label, fold, exc)
                tmp.mkdir(parents=True, exist_ok=True)
                (tmp / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}", encoding="utf-8")
                failures.append((config.config_id, fold, f"{type(exc).__name__}: {exc}"))
        if len(fold_sets) == len(folds):
            combined = PredictionSet.concat(fold_sets).sorted()
            combined.to_csv(cdir / "predictions.csv")
            results[config.config_id] = combined
    if failures:
        write_json(runs / "failures.json", [{"config_id": c, "fold": f, "error": e} for c, f, e in failures])
    return results


# ------------------------------------------------------------- experiment file

DEFAULT_EXPERIMENT = {
    "defaults": {
        "train": TrainSettings().to_dict(),
        "n_patients": 56,
        "data_seed": 7,
        "fold_seed": 0,
        "pretext": {"n_train": 800, "n_val": 200, "epochs": 4, "lr": 1e-3, "seed": 0},
    },
    "profiles": {"desk": {"train": {"epochs": 12}, "space": {"arch": ["mini-wide"]}}},
    "space": {
        "arch": ["mini"],
        "dim": ["2D"],
        "init": ["pretrained", "random"],
        "sr": [False],
        "targets": ["regression"],
        "input_mode": ["replicate"],
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def expand_space(space: dict) -> list[Configuration]:
    """Cartesian product over a ``space`` mapping, skipping invalid combinations.

    ``n_s`` applies to 3D entries and ``input_mode`` to 2D entries only.
    """
    keys = [k for k in ("arch", "dim", "init", "sr", "targets", "input_mode", "n_s", "seed") if k in space]
    out, seen = [], set()
    for combo in itertools.product(*[space[k] if isinstance(space[k], list) else [space[k]] for k in keys]):
        d = dict(zip(keys, combo))
        if d.get("dim", "2D") == "3D":
            d["input_mode"] = None
            d.setdefault("n_s", 5)
        else:
            d["n_s"] = None
            d.setdefault("input_mode", "replicate")
        cfg = Configuration.from_dict(d)
        if cfg.config_id not in seen:
            seen.add(cfg.config_id)
            out.append(cfg)
    return out


def load_experiment(path=None, profile: str | None = None, overrides: dict | None = None) -> dict:
    """Experiment file (YAML) merged over the built-in defaults.

    Returns a resolved dict with ``settings`` (TrainSettings), ``configs``
    (list of Configuration) and every default materialized.
    """
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    exp = _merge(DEFAULT_EXPERIMENT, raw)
    defaults = dict(exp["defaults"])
    if profile:
        if profile not in exp.get("profiles", {}):
            raise ConfigError(f"unknown profile {profile!r}")
        prof = dict(exp["profiles"][profile])
        if "space" in prof:
            exp["space"] = _merge(exp["space"], prof.pop("space"))
        defaults = _merge(defaults, prof)
    defaults = _merge(defaults, overrides or {})
    configs = [Configuration.from_dict(c) for c in exp["configurations"]] if "configurations" in exp else expand_space(exp["space"])
    backbones = {k: BackboneSpec.from_dict({"arch_id": k, **v}) for k, v in (exp.get("backbones") or {}).items()}
    return {
        "defaults": defaults,
        "settings": TrainSettings.from_dict(defaults["train"]),
        "configs": configs,
        "backbones": backbones,
        "profile": profile,
    }
