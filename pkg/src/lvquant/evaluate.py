"""Multi-crop / cyclic-window inference, prediction tables, metrics and the Wilcoxon test."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import norm

from .augment import CROP_SIZE, cyclic_window, make_3ch
from .data import N_FRAMES
from .errors import TooFewPairs, UndefinedCorrelation
from .indices import INDEX_NAMES, N_INDICES, PHASE_NAMES, TASK_SLICES

TASKS = ("areas", "dims", "rwt", "phase")
N_S_CHOICES = (3, 5, 7, 10)


def corner_offsets(size: int = 300, crop: int = CROP_SIZE) -> list[tuple[int, int]]:
    """The four corner-anchored crop positions; together they cover the slice."""
    m = size - crop
    return [(0, 0), (0, m), (m, 0), (m, m)]


def _forward(model, x: np.ndarray, chunk: int = 32):
    """Run ``model`` on a numpy batch; returns (regression, phase probabilities) arrays or None."""
    regs, probs = [], []
    with torch.no_grad():
        for i in range(0, len(x), chunk):
            out = model(torch.from_numpy(np.ascontiguousarray(x[i : i + chunk])))
            if out.get("regression") is not None:
                regs.append(out["regression"].double().numpy())
            if out.get("phase_logits") is not None:
                probs.append(torch.softmax(out["phase_logits"].double(), dim=-1).numpy())
    return (np.concatenate(regs) if regs else None, np.concatenate(probs) if probs else None)


def _crops(img: np.ndarray, offsets, crop):
    return np.stack([img[..., r : r + crop, c : c + crop] for r, c in offsets])


def predict_2d(model, study, scaler=None, input_mode: str = "replicate", crop: int = CROP_SIZE):
    """Per-frame predictions averaged over the four corner crops.

    Returns ``(regression (20, 11) in physical units or None, phase
    probabilities (20, 2) or None)``. Without a scaler the regression stays in
    model units.
    """
    if hasattr(model, "eval"):
        model.eval()
    offsets = corner_offsets(study.frames.shape[-1], crop)
    batch = np.concatenate(
        [_crops(make_3ch(study.frames, t, input_mode).astype(np.float32), offsets, crop) for t in range(N_FRAMES)]
    )
    reg, prob = _forward(model, batch)
    n = len(offsets)
    if reg is not None:
        reg = reg.reshape(N_FRAMES, n, -1).mean(axis=1)
        if scaler is not None:
            reg = scaler.invert(reg)
    if prob is not None:
        prob = prob.reshape(N_FRAMES, n, -1).mean(axis=1)
    return reg, prob


def window_starts_covering(frame: int, n_s: int, n: int = N_FRAMES) -> list[int]:
    return sorted((frame - k) % n for k in range(n_s))


def predict_3d(model, study, n_s: int, scaler=None, crop: int = CROP_SIZE):
    """Overlap-averaged predictions from all 20 cyclic windows of ``n_s`` frames.

    Each window is evaluated at the four corner crops; a frame's prediction
    is the mean over the ``n_s`` window positions that contain it.
    """
    if n_s not in N_S_CHOICES:
        raise ValueError(f"N_S must be one of {N_S_CHOICES}")
    if hasattr(model, "eval"):
        model.eval()
    offsets = corner_offsets(study.frames.shape[-1], crop)
    n_off = len(offsets)
    reg_sum = prob_sum = None
    count = np.zeros(N_FRAMES)
    for start in range(N_FRAMES):
        frames = cyclic_window(start, n_s)
        seq = study.frames[frames].astype(np.float32)  # (N_S, H, W)
        clip = np.stack([seq] * 3)  # (3, N_S, H, W)
        reg, prob = _forward(model, _crops(clip, offsets, crop))
        if reg is not None:
            reg = reg.reshape(n_off, n_s, -1).mean(axis=0)
            if reg_sum is None:
                reg_sum = np.zeros((N_FRAMES, reg.shape[-1]))
            np.add.at(reg_sum, frames, reg)
        if prob is not None:
            prob = prob.reshape(n_off, n_s, -1).mean(axis=0)
            if prob_sum is None:
                prob_sum = np.zeros((N_FRAMES, prob.shape[-1]))
            np.add.at(prob_sum, frames, prob)
        np.add.at(count, frames, 1)
    reg_out = None if reg_sum is None else reg_sum / count[:, None]
    if reg_out is not None and scaler is not None:
        reg_out = scaler.invert(reg_out)
    prob_out = None if prob_sum is None else prob_sum / count[:, None]
    return reg_out, prob_out


# -------------------------------------------------------------- prediction tables

COLUMNS = ("config_id", "patient_id", "frame", *INDEX_NAMES, "p_systole", "p_diastole", "fold")


@dataclass
class PredictionSet:
    """One row per (patient, frame): 11 indices (NaN when absent), phase probabilities, fold."""

    config_id: str
    patient_ids: list
    frames: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    folds: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.patient_ids)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(n, N_INDICES)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(n, 2)
        self.folds = np.full(n, -1, dtype=np.int64) if self.folds is None else np.asarray(self.folds, dtype=np.int64)
        keys = list(zip(self.patient_ids, self.frames.tolist()))
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (patient, frame) rows")

    @property
    def has_regression(self) -> bool:
        return bool(np.isfinite(self.values).all())

    @property
    def has_phase(self) -> bool:
        return bool(np.isfinite(self.probs).all())

    @property
    def keys(self) -> list:
        return list(zip(self.patient_ids, self.frames.tolist()))

    def __len__(self):
        return len(self.patient_ids)

    @classmethod
    def from_study(cls, config_id, study, regression=None, probs=None, fold=-1) -> "PredictionSet":
        n = study.frames.shape[0]
        values = np.full((n, N_INDICES), np.nan) if regression is None else regression
        p = np.full((n, 2), np.nan) if probs is None else probs
        return cls(config_id, [study.patient_id] * n, np.arange(n), values, p, np.full(n, fold))

    @classmethod
    def concat(cls, sets, config_id=None) -> "PredictionSet":
        sets = list(sets)
        return cls(
            config_id or sets[0].config_id,
            [p for s in sets for p in s.patient_ids],
            np.concatenate([s.frames for s in sets]),
            np.concatenate([s.values for s in sets]),
            np.concatenate([s.probs for s in sets]),
            np.concatenate([s.folds for s in sets]),
        )

    def sorted(self) -> "PredictionSet":
        order = sorted(range(len(self)), key=lambda i: (self.patient_ids[i], int(self.frames[i])))
        return self.subset_rows(order)

    def subset_rows(self, rows) -> "PredictionSet":
        rows = list(rows)
        return PredictionSet(
            self.config_id,
            [self.patient_ids[i] for i in rows],
            self.frames[rows],
            self.values[rows],
            self.probs[rows],
            self.folds[rows],
        )

    def select_patients(self, patients) -> "PredictionSet":
        keep = set(patients)
        return self.subset_rows([i for i, p in enumerate(self.patient_ids) if p in keep])

    def aligned_to(self, other: "PredictionSet") -> "PredictionSet":
        """Rows reordered to match ``other``'s (patient, frame) order."""
        pos = {k: i for i, k in enumerate(self.keys)}
        try:
            return self.subset_rows([pos[k] for k in other.keys])
        except KeyError as exc:
            raise ValueError(f"{self.config_id} has no row for {exc.args[0]}") from exc

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(self)):
            w.writerow(
                [self.config_id, self.patient_ids[i], int(self.frames[i])]
                + [_fmt(v) for v in self.values[i]]
                + [_fmt(v) for v in self.probs[i]]
                + [int(self.folds[i])]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def read_csv(cls, path) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError(f"{path} has no rows")
        return cls(
            rows[0]["config_id"],
            [r["patient_id"] for r in rows],
            [int(r["frame"]) for r in rows],
            [[_parse(r[n]) for n in INDEX_NAMES] for r in rows],
            [[_parse(r["p_systole"]), _parse(r["p_diastole"])] for r in rows],
            [int(r["fold"]) for r in rows],
        )


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def _parse(s: str) -> float:
    return float("nan") if s == "" else float(s)


def ground_truth(studies) -> PredictionSet:
    """Ground truth in PredictionSet layout (one-hot phase probabilities)."""
    sets = []
    for s in studies:
        onehot = np.eye(2)[np.asarray(s.phase, dtype=int)]
        sets.append(PredictionSet.from_study("ground_truth", s, s.indices, onehot))
    return PredictionSet.concat(sets).sorted()


def phase_decision(probs) -> np.ndarray:
    """Argmax of averaged probabilities; ties go to systole (first column)."""
    return np.argmax(np.asarray(probs), axis=-1)


# ------------------------------------------------------------------------ metrics


def mae(pred, gt) -> tuple[float, float]:
    """Mean and (population) std of absolute errors over all entries."""
    err = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)).ravel()
    return float(err.mean()), float(err.std())


def pcc(pred, gt) -> float:
    """Pearson correlation per column, averaged over columns."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim == 1:
        p, g = p[:, None], g[:, None]
    if p.shape[0] < 2:
        raise UndefinedCorrelation("PCC needs at least 2 samples")
    pc, gc = p - p.mean(axis=0), g - g.mean(axis=0)
    sp, sg = np.sqrt((pc**2).sum(axis=0)), np.sqrt((gc**2).sum(axis=0))
    if np.any(sp == 0) or np.any(sg == 0):
        raise UndefinedCorrelation("zero variance in prediction or ground truth")
    r = (pc * gc).sum(axis=0) / (sp * sg)
    return float(np.clip(r, -1.0, 1.0).mean())


def error_rate(pred_labels, gt_labels) -> float:
    p, g = np.asarray(pred_labels), np.asarray(gt_labels)
    return float(np.count_nonzero(p != g) / p.size)


def task_metrics(pred: PredictionSet, gt: PredictionSet) -> dict:
    """Table-1 style metrics per task; tasks the prediction set lacks are omitted."""
    p = pred.aligned_to(gt)
    out = {}
    if p.has_regression:
        for task, sl in TASK_SLICES.items():
            m, s = mae(p.values[:, sl], gt.values[:, sl])
            try:
                r = pcc(p.values[:, sl], gt.values[:, sl])
            except UndefinedCorrelation:
                r = float("nan")
            out[task] = {"mae": m, "std": s, "pcc": r}
    if p.has_phase:
        out["phase"] = {"er": error_rate(phase_decision(p.probs), phase_decision(gt.probs))}
    return out


def absolute_errors(pred: PredictionSet, gt: PredictionSet, task: str) -> np.ndarray:
    p = pred.aligned_to(gt)
    if task == "phase":
        return (phase_decision(p.probs) != phase_decision(gt.probs)).astype(np.float64)
    sl = TASK_SLICES[task]
    return np.abs(p.values[:, sl] - gt.values[:, sl]).ravel()


# ----------------------------------------------------------------------- Wilcoxon

EXACT_MAX_N = 25
MIN_PAIRS = 6


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n: int
    significant: bool
    method: str


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null_cdf(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of W+ for the given (possibly tied) ranks.

    Works on doubled ranks so mid-ranks stay integral; returns (support of W+, pmf).
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    pmf = counts / counts.sum()
    return np.arange(total + 1) / 2.0, pmf


def wilcoxon_signed_rank(errors_a, errors_b, alpha: float = 0.05) -> WilcoxonResult:
    """Two-sided paired signed-rank test on ``errors_a - errors_b``.

    Zero differences are dropped and ties get mid-ranks. The exact null
    distribution is used for n <= 25, otherwise a normal approximation with
    tie-corrected variance.
    """
    d = np.asarray(errors_a, dtype=np.float64) - np.asarray(errors_b, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n < MIN_PAIRS:
        raise TooFewPairs(f"{n} non-zero differences (< {MIN_PAIRS})")
    ranks = midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        support, pmf = signed_rank_null_cdf(ranks)
        p = float(min(1.0, 2.0 * pmf[support <= stat + 1e-9].sum()))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
        z = (stat - mean) / math.sqrt(var)
        p = float(min(1.0, 2.0 * norm.cdf(z)))
        method = "normal"
    return WilcoxonResult(stat, p, n, p < alpha, method)
