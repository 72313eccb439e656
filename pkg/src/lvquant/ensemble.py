"""Per-task optimal-subset ensembles over cross-validated prediction sets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import write_json
from .errors import CandidateOverflow, MissingCheckpoint
from .evaluate import TASKS, PredictionSet
from .indices import SYSTOLE, TASK_SLICES

MAX_CANDIDATES = 20
TOP_K = 20
_LOW_BITS = 10


@dataclass
class EnsembleSelection:
    task: str
    members: tuple
    selection_error: float
    evaluation_error: float | None = None
    pool: tuple = ()
    full_average_error: float | None = None
    best_singleton_error: float | None = None
    selection_patients: tuple = ()
    evaluation_patients: tuple = ()

    @property
    def pool_hash(self) -> str:
        return hashlib.sha1(json.dumps(sorted(self.pool)).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["members"] = list(self.members)
        d["pool"] = list(self.pool)
        d["pool_hash"] = self.pool_hash
        d["selection_patients"] = list(self.selection_patients)
        d["evaluation_patients"] = list(self.evaluation_patients)
        return d

    @classmethod
    def from_dict(cls, d) -> "EnsembleSelection":
        d = dict(d)
        d.pop("pool_hash", None)
        for k in ("members", "pool", "selection_patients", "evaluation_patients"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)

    def save(self, path) -> None:
        write_json(path, self.to_dict())


def _task_supported(ps: PredictionSet, task: str) -> bool:
    return ps.has_phase if task == "phase" else ps.has_regression


def _task_matrix(ps: PredictionSet, task: str) -> np.ndarray:
    """Flattened quantity that is averaged across members for ``task``."""
    if task == "phase":
        return ps.probs[:, SYSTOLE].astype(np.float64)
    return ps.values[:, TASK_SLICES[task]].astype(np.float64).ravel()


def _task_truth(gt: PredictionSet, task: str) -> np.ndarray:
    if task == "phase":
        return np.argmax(gt.probs, axis=1)
    return gt.values[:, TASK_SLICES[task]].astype(np.float64).ravel()


def _errors(sums: np.ndarray, k: np.ndarray, truth: np.ndarray, task: str) -> np.ndarray:
    """Task error of member means given member sums (rows) and member counts ``k``."""
    if task == "phase":
        # mean p_systole >= mean p_diastole  <=>  2 * sum >= k; ties go to systole
        pred = np.where(2.0 * sums >= k[:, None], SYSTOLE, 1 - SYSTOLE)
        return (pred != truth[None, :]).mean(axis=1)
    return np.abs(sums - k[:, None] * truth[None, :]).mean(axis=1) / k


def _partial_sums(mats: np.ndarray) -> np.ndarray:
    """Sums over every subset of the rows of ``mats``; row ``mask`` = subset with that bitmask.

    Each subset extends a smaller one by its lowest member (running sums).
    """
    n = mats.shape[0]
    out = np.zeros((1 << n, mats.shape[1]))
    for mask in range(1, 1 << n):
        low = mask & -mask
        out[mask] = out[mask ^ low] + mats[low.bit_length() - 1]
    return out


def _popcount(arr: np.ndarray) -> np.ndarray:
    arr = arr.astype(np.int64)
    return np.array([bin(int(v)).count("1") for v in arr], dtype=np.int64)


class _SubsetEvaluator:
    """Exhaustive subset errors via low/high bit partial-sum tables.

    All error values (search, re-evaluation, singletons, full average) go
    through the same arithmetic, so they are comparable bit-for-bit.
    """

    def __init__(self, mats: np.ndarray, truth: np.ndarray, task: str):
        self.n = mats.shape[0]
        self.task, self.truth = task, truth
        self.n_low = min(self.n, _LOW_BITS)
        self.low = _partial_sums(mats[: self.n_low])
        self.high = _partial_sums(mats[self.n_low :])
        self.low_k = _popcount(np.arange(1 << self.n_low))

    def all_errors(self) -> np.ndarray:
        n_high = self.n - self.n_low
        errs = np.empty(1 << self.n)
        for hi in range(1 << n_high):
            k = self.low_k + bin(hi).count("1")
            k_safe = np.maximum(k, 1)
            sums = self.low + self.high[hi]
            block = _errors(sums, k_safe.astype(np.float64), self.truth, self.task)
            errs[hi << self.n_low : (hi + 1) << self.n_low] = np.where(k > 0, block, np.inf)
        return errs

    def error(self, mask: int) -> float:
        lo = mask & ((1 << self.n_low) - 1)
        hi = mask >> self.n_low
        # evaluate the whole low block so the reduction order matches all_errors()
        k = self.low_k + bin(hi).count("1")
        sums = self.low + self.high[hi]
        block = _errors(sums, np.maximum(k, 1).astype(np.float64), self.truth, self.task)
        return float(block[lo])


def _prepare(candidates: dict, gt: PredictionSet, task: str):
    ids = sorted(candidates)
    mats = np.stack([_task_matrix(candidates[c].aligned_to(gt), task) for c in ids])
    return ids, mats, _task_truth(gt, task)


def individual_error(ps: PredictionSet, gt: PredictionSet, task: str) -> float:
    ev = _SubsetEvaluator(_task_matrix(ps.aligned_to(gt), task)[None, :], _task_truth(gt, task), task)
    return ev.error(1)


def rank_candidates(prediction_sets: dict, gt: PredictionSet, k: int = TOP_K) -> dict:
    """Per task, config ids sorted by individual error (MAE, or ER for phase); top ``k`` kept."""
    out = {}
    for task in TASKS:
        scored = [(individual_error(ps, gt, task), cid) for cid, ps in prediction_sets.items() if _task_supported(ps, task)]
        out[task] = [cid for _, cid in sorted(scored)[:k]]
    return out


def subset_error(candidates: dict, gt: PredictionSet, task: str, members) -> float:
    ids, mats, truth = _prepare(candidates, gt, task)
    if len(ids) > MAX_CANDIDATES:
        raise CandidateOverflow(f"{len(ids)} candidates (max {MAX_CANDIDATES})")
    mask = sum(1 << ids.index(m) for m in members)
    return _SubsetEvaluator(mats, truth, task).error(mask)


def search_optimal_subset(candidates: dict, gt: PredictionSet, task: str) -> EnsembleSelection:
    """Exhaustive search over all non-empty subsets of ``candidates``.

    The subset prediction is the unweighted member mean (probability mean
    then argmax for phase). Ties prefer fewer members, then the
    lexicographically smallest sorted id tuple.
    """
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) > MAX_CANDIDATES:
        raise CandidateOverflow(f"{len(candidates)} candidates (max {MAX_CANDIDATES})")
    ids, mats, truth = _prepare(candidates, gt, task)
    ev = _SubsetEvaluator(mats, truth, task)
    errs = ev.all_errors()
    best = errs.min()
    tied = np.nonzero(errs == best)[0]

    def members_of(mask):
        return tuple(ids[i] for i in range(len(ids)) if mask >> i & 1)

    choice = min(tied, key=lambda m: (bin(int(m)).count("1"), members_of(int(m))))
    singles = [errs[1 << i] for i in range(len(ids))]
    sel = EnsembleSelection(
        task=task,
        members=members_of(int(choice)),
        selection_error=float(errs[choice]),
        pool=tuple(ids),
        full_average_error=float(errs[(1 << len(ids)) - 1]),
        best_singleton_error=float(min(singles)),
    )
    assert sel.selection_error <= sel.full_average_error and sel.selection_error <= sel.best_singleton_error
    return sel


def average_prediction(prediction_sets, members, config_id: str = "ensemble") -> PredictionSet:
    """Unweighted mean of member prediction sets (aligned to the first member)."""
    sets = [prediction_sets[m] for m in members]
    ref = sets[0]
    aligned = [s.aligned_to(ref) for s in sets]
    return PredictionSet(
        config_id,
        list(ref.patient_ids),
        ref.frames,
        np.mean([s.values for s in aligned], axis=0),
        np.mean([s.probs for s in aligned], axis=0),
        ref.folds,
    )


def select_all_tasks(prediction_sets: dict, gt: PredictionSet, k: int = TOP_K) -> dict:
    """Rank, then search the top-``k`` pool, independently for each task."""
    ranked = rank_candidates(prediction_sets, gt, k)
    out = {}
    for task, pool in ranked.items():
        if pool:
            out[task] = search_optimal_subset({c: prediction_sets[c] for c in pool}, gt, task)
    return out


def nested_protocol(prediction_sets: dict, gt: PredictionSet, plan, k: int = TOP_K) -> dict:
    """Choose subsets on half-A patients of every fold and report their error on half B."""
    sel_patients = plan.patients(half="A")
    eval_patients = plan.patients(half="B")
    if set(sel_patients) & set(eval_patients):
        raise AssertionError("selection and evaluation halves overlap")
    gt_a, gt_b = gt.select_patients(sel_patients), gt.select_patients(eval_patients)
    sets_a = {c: ps.select_patients(sel_patients) for c, ps in prediction_sets.items()}
    sets_b = {c: ps.select_patients(eval_patients) for c, ps in prediction_sets.items()}
    out = {}
    for task, sel in select_all_tasks(sets_a, gt_a, k).items():
        pool_b = {c: sets_b[c] for c in sel.pool}
        sel.evaluation_error = subset_error(pool_b, gt_b, task, sel.members)
        sel.selection_patients = tuple(sel_patients)
        sel.evaluation_patients = tuple(eval_patients)
        out[task] = sel
    return out


def ensemble_predict(members, studies, runs_dir, configs: dict, n_folds: int = 5, config_id: str = "ensemble") -> PredictionSet:
    """Predict unseen studies with every fold model of every member config.

    Each config contributes the mean over its fold models; the result is the
    mean over configs. ``configs`` maps config id -> Configuration.
    """
    from .train import load_fold_model, predict_study

    runs = Path(runs_dir)
    per_config = {}
    for cid in members:
        if cid not in configs:
            raise MissingCheckpoint(f"no configuration for {cid}")
        fold_sets = []
        for fold in range(n_folds):
            fdir = runs / cid / str(fold)
            if not (fdir / "checkpoint" / "checkpoint.json").is_file():
                raise MissingCheckpoint(f"missing checkpoint {fdir / 'checkpoint'}")
            model, scaler = load_fold_model(fdir)
            fold_sets.append(PredictionSet.concat([predict_study(model, s, configs[cid], scaler) for s in studies]))
        per_config[cid] = average_prediction(dict(enumerate(fold_sets)), range(n_folds), cid)
    return average_prediction(per_config, list(members), config_id)
