"""Study container, on-disk format, preprocessing, target scaling and CV folds.

On-disk study layout (one directory per patient)::

    meta.json     {"patient_id", "spacing", "shape": [T, H, W], "dtype": "float32"}
    frames.bin    float32, little-endian, T*H*W row-major
    masks.bin     uint8, same layout
    indices.json  {"names": [...11], "values": [[...11] * T], "phase": ["systole" | "diastole"] * T}
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetWriteError, DegenerateScaler, EmptySlice
from .indices import INDEX_NAMES, N_INDICES, PHASE_NAMES

log = logging.getLogger(__name__)

N_FRAMES = 20
CANONICAL_SIZE = 300
CANONICAL_SPACING = 1.0
N_FOLDS = 5


@dataclass
class Study:
    """One patient's cardiac cycle.

    ``indices`` is a (T, 11) array in mm / mm^2 in canonical index order and
    ``phase`` holds per-frame codes (0 = systole, 1 = diastole).
    """

    patient_id: str
    frames: np.ndarray
    masks: np.ndarray
    indices: np.ndarray
    phase: np.ndarray
    spacing: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.shape != self.masks.shape:
            raise ValueError(f"frames {self.frames.shape} and masks {self.masks.shape} differ in shape")
        if self.frames.shape[0] != N_FRAMES:
            raise ValueError(f"expected {N_FRAMES} frames, got {self.frames.shape[0]}")
        if self.indices.shape != (N_FRAMES, N_INDICES):
            raise ValueError(f"indices must be ({N_FRAMES}, {N_INDICES}), got {self.indices.shape}")


# --------------------------------------------------------------------------- I/O


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys, repr floats) so reruns are byte-identical."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_study(study: Study, directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        t, h, w = study.frames.shape
        write_json(
            directory / "meta.json",
            {"patient_id": study.patient_id, "spacing": float(study.spacing), "shape": [t, h, w], "dtype": "float32"},
        )
        study.frames.astype("<f4").tofile(directory / "frames.bin")
        study.masks.astype("u1").tofile(directory / "masks.bin")
        write_json(
            directory / "indices.json",
            {
                "names": list(INDEX_NAMES),
                "values": [[float(v) for v in row] for row in study.indices],
                "phase": [PHASE_NAMES[int(p)] for p in study.phase],
            },
        )
    except OSError as exc:
        raise DatasetWriteError(f"cannot write study {study.patient_id} to {directory}: {exc}") from exc
    return directory


def read_study(directory) -> Study:
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    shape = tuple(meta["shape"])
    frames = np.fromfile(directory / "frames.bin", dtype="<f4").reshape(shape).astype(np.float32)
    masks = np.fromfile(directory / "masks.bin", dtype="u1").reshape(shape)
    idx = read_json(directory / "indices.json")
    phase = np.array([PHASE_NAMES.index(p) for p in idx["phase"]], dtype=np.int64)
    return Study(
        patient_id=meta["patient_id"],
        frames=frames,
        masks=masks,
        indices=np.asarray(idx["values"], dtype=np.float64),
        phase=phase,
        spacing=float(meta["spacing"]),
    )


def list_studies(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "meta.json").is_file())


def load_dataset(root) -> list[Study]:
    return [read_study(p) for p in list_studies(root)]


# ------------------------------------------------------------------ preprocessing


def resampled_size(n_pixels: int, spacing: float, target_spacing: float = CANONICAL_SPACING) -> int:
    return int(np.floor(n_pixels * spacing / target_spacing + 0.5))


def resample_slice(image: np.ndarray, spacing: float, order: int, target_spacing: float = CANONICAL_SPACING):
    """Resample a square slice to ``target_spacing`` keeping the image centre fixed."""
    n_in = image.shape[0]
    n_out = resampled_size(n_in, spacing, target_spacing)
    scale = target_spacing / spacing
    c_in, c_out = (n_in - 1) / 2.0, (n_out - 1) / 2.0
    offset = c_in - c_out * scale
    mode = "nearest" if order > 0 else "constant"
    return ndimage.affine_transform(
        image, np.diag([scale, scale]), offset=offset, output_shape=(n_out, n_out), order=order, mode=mode, cval=0.0
    )


def center_crop_or_pad(image: np.ndarray, size: int = CANONICAL_SIZE) -> np.ndarray:
    """Centre crop to ``size``; symmetric zero pad when the slice is smaller."""
    out = image
    for axis in (0, 1):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Clip to the slice's 1st/99th percentile, standardize, then map to [0, 1].

    Percentiles use the inclusive order statistics ('lower' / 'higher'), which
    makes the operation idempotent on an already-normalized slice.
    """
    x = np.asarray(image, dtype=np.float64)
    lo = np.percentile(x, 1, method="lower")
    hi = np.percentile(x, 99, method="higher")
    x = np.clip(x, lo, hi)
    std = x.std()
    # resampling can leave round-off ripple on a constant slice
    if std <= 1e-9 * max(1.0, float(np.abs(x).max())):
        raise EmptySlice("constant slice")
    x = (x - x.mean()) / std
    return (x - x.min()) / (x.max() - x.min())


def preprocess_study(study: Study) -> Study:
    """Resample to 1 mm/px, centre crop to 300x300 and normalize every slice.

    Constant slices are mapped to zeros with a warning. Indices are already
    stored in mm / mm^2 so the unit conversion is the identity.
    """
    frames, masks = [], []
    for t in range(study.frames.shape[0]):
        img = resample_slice(study.frames[t].astype(np.float64), study.spacing, order=1)
        msk = resample_slice(study.masks[t], study.spacing, order=0)
        img = center_crop_or_pad(img)
        msk = center_crop_or_pad(msk)
        try:
            img = normalize_slice(img)
        except EmptySlice:
            warnings.warn(f"{study.patient_id} frame {t}: constant slice mapped to zeros", stacklevel=2)
            img = np.zeros_like(img)
        frames.append(img.astype(np.float32))
        masks.append(msk.astype(np.uint8))
    indices_mm = study.indices.copy()  # physical units already
    meta = dict(study.meta)
    meta.update(source_spacing=float(study.spacing), unit_conversion="identity (mm, mm^2)")
    return replace(
        study,
        frames=np.stack(frames),
        masks=np.stack(masks),
        indices=indices_mm,
        spacing=CANONICAL_SPACING,
        meta=meta,
    )


# -------------------------------------------------------------------- target scale


@dataclass(frozen=True)
class TargetScaler:
    """Per-index min-max scaling to [0, 1]; values outside the fit range are not clamped."""

    minimum: tuple[float, ...]
    maximum: tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.minimum), np.asarray(self.maximum)
        if lo.shape != (N_INDICES,) or hi.shape != (N_INDICES,):
            raise ValueError("scaler needs 11 minima and 11 maxima")
        if np.any(hi <= lo):
            bad = [INDEX_NAMES[i] for i in np.nonzero(hi <= lo)[0]]
            raise DegenerateScaler(f"max <= min for {bad}")

    @classmethod
    def fit(cls, values) -> "TargetScaler":
        """Fit on an (N, 11) array of training targets (or a list of Studies)."""
        if isinstance(values, (list, tuple)) and values and isinstance(values[0], Study):
            if len(values) < 2:
                raise ValueError("fitting a scaler needs at least 2 studies")
            values = np.concatenate([s.indices for s in values])
        v = np.asarray(values, dtype=np.float64).reshape(-1, N_INDICES)
        return cls(tuple(float(x) for x in v.min(axis=0)), tuple(float(x) for x in v.max(axis=0)))

    def apply(self, x):
        lo, hi = np.asarray(self.minimum), np.asarray(self.maximum)
        return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)

    def invert(self, y):
        lo, hi = np.asarray(self.minimum), np.asarray(self.maximum)
        return np.asarray(y, dtype=np.float64) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {"names": list(INDEX_NAMES), "minimum": list(self.minimum), "maximum": list(self.maximum)}

    @classmethod
    def from_dict(cls, d) -> "TargetScaler":
        return cls(tuple(d["minimum"]), tuple(d["maximum"]))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "TargetScaler":
        return cls.from_dict(read_json(path))


def fit_target_scaler(studies) -> TargetScaler:
    return TargetScaler.fit(list(studies))


# --------------------------------------------------------------------- fold plans


@dataclass(frozen=True)
class FoldPlan:
    """Patient -> CV fold, plus the nested half split ("A" selects, "B" evaluates)."""

    fold_of: dict
    half_of: dict
    seed: int

    @property
    def n_folds(self) -> int:
        return max(self.fold_of.values()) + 1

    def patients(self, fold: int | None = None, half: str | None = None) -> list[str]:
        return [
            p
            for p in sorted(self.fold_of)
            if (fold is None or self.fold_of[p] == fold) and (half is None or self.half_of[p] == half)
        ]

    def train_patients(self, fold: int) -> list[str]:
        return [p for p in sorted(self.fold_of) if self.fold_of[p] != fold]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "fold_of": dict(sorted(self.fold_of.items())), "half_of": dict(sorted(self.half_of.items()))}

    @classmethod
    def from_dict(cls, d) -> "FoldPlan":
        return cls({k: int(v) for k, v in d["fold_of"].items()}, dict(d["half_of"]), int(d["seed"]))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FoldPlan":
        return cls.from_dict(read_json(path))


def make_fold_plan(patient_ids, seed: int, n_folds: int = N_FOLDS) -> FoldPlan:
    """Shuffle patients and deal them round-robin into ``n_folds`` folds.

    The first ceil(n/2) patients of each fold (in shuffled order) form half A.
    """
    ids = sorted(set(patient_ids))
    if len(ids) < 2 * n_folds:
        raise ValueError(f"need at least {2 * n_folds} patients, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    fold_of = {p: i % n_folds for i, p in enumerate(shuffled)}
    half_of = {}
    for f in range(n_folds):
        members = [p for p in shuffled if fold_of[p] == f]
        n_a = (len(members) + 1) // 2
        for j, p in enumerate(members):
            half_of[p] = "A" if j < n_a else "B"
    return FoldPlan(fold_of, half_of, int(seed))


def atomic_dir(path) -> Path:
    """Temporary sibling directory used to stage outputs before an atomic rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    return tmp
