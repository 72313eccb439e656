"""Training-time augmentation (rotation, scaling, random crops) and batch assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CANONICAL_SIZE, N_FRAMES
from .errors import InsufficientPatients
from .indices import AREA_SLICE, DIM_SLICE, RWT_SLICE

SCALE_RANGE = (0.8, 1.2)
BATCH_SIZE = 8
CROP_SIZE = 224


@dataclass
class AugmentedSample:
    """One training sample.

    2D: ``image`` is (3, crop, crop), ``mask`` (crop, crop), ``targets`` (11,),
    ``phase`` scalar. 3D: ``image`` is (3, N_S, crop, crop), ``mask``
    (N_S, crop, crop), ``targets`` (N_S, 11), ``phase`` (N_S,).
    ``record`` holds everything needed to regenerate the sample.
    """

    patient_id: str
    image: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    phase: np.ndarray
    record: dict


def worker_rng(seed: int, worker_id: int = 0) -> np.random.Generator:
    """Independent stream per data-loading worker."""
    return np.random.default_rng([int(seed), int(worker_id)])


def _affine(theta_deg: float, scale: float, size: int, out_shape, out_offset=(0, 0)):
    """Matrix/offset mapping output (row, col) to input coordinates.

    Content is rotated counter-clockwise on screen by ``theta_deg`` and
    magnified by ``scale`` about the slice centre; ``out_offset`` selects a
    window of the (virtual) full-size output.
    """
    th = np.deg2rad(theta_deg)
    m = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]]) / scale
    c = (size - 1) / 2.0
    offset = m @ (np.asarray(out_offset, dtype=np.float64) - c) + c
    return m, offset


def transform_slice(image, theta_deg=0.0, scale=1.0, order=1, out_shape=None, out_offset=(0, 0)):
    """Rotate + scale one slice about its centre, zero fill, optionally cropping a window."""
    size = image.shape[0]
    out_shape = tuple(out_shape) if out_shape is not None else image.shape
    if theta_deg == 0.0 and scale == 1.0:
        r, c = out_offset
        if r + out_shape[0] <= size and c + out_shape[1] <= size and r >= 0 and c >= 0:
            return np.array(image[r : r + out_shape[0], c : c + out_shape[1]])
    m, offset = _affine(theta_deg, scale, size, out_shape, out_offset)
    return ndimage.affine_transform(image, m, offset=offset, output_shape=out_shape, order=order, mode="constant", cval=0.0)


def adjust_targets(targets, scale: float) -> np.ndarray:
    """Scale physical-unit targets: areas by scale**2, lengths by scale."""
    t = np.array(targets, dtype=np.float64)
    t[..., AREA_SLICE] *= scale**2
    t[..., DIM_SLICE] *= scale
    t[..., RWT_SLICE] *= scale
    return t


def random_rotate(image, mask, theta: float):
    """Rotate by ``theta`` degrees (bilinear image, nearest mask). Targets are not touched."""
    if not 0 <= theta < 360:
        raise ValueError(f"theta must lie in [0, 360), got {theta}")
    return transform_slice(image, theta, 1.0, order=1), transform_slice(mask, theta, 1.0, order=0)


def random_scale(image, mask, targets, s_c: float):
    """Resize by ``s_c`` about the centre, crop or zero pad back to the input size."""
    if not SCALE_RANGE[0] <= s_c <= SCALE_RANGE[1]:
        raise ValueError(f"scale must lie in {SCALE_RANGE}, got {s_c}")
    return (
        transform_slice(image, 0.0, s_c, order=1),
        transform_slice(mask, 0.0, s_c, order=0),
        adjust_targets(targets, s_c),
    )


def make_3ch(frames, t: int, mode: str = "replicate") -> np.ndarray:
    """3-channel input for frame ``t``: the slice replicated, or (t-1, t, t+1) with wrap-around."""
    n = len(frames)
    if not 0 <= t < n:
        raise ValueError(f"frame {t} outside [0, {n})")
    if mode == "replicate":
        return np.stack([frames[t]] * 3)
    if mode == "neighbors":
        return np.stack([frames[(t - 1) % n], frames[t], frames[(t + 1) % n]])
    raise ValueError(f"unknown input mode {mode!r}")


def channel_frames(t: int, mode: str, n: int = N_FRAMES) -> list[int]:
    return [t, t, t] if mode == "replicate" else [(t - 1) % n, t, (t + 1) % n]


def cyclic_window(start: int, n_s: int, n: int = N_FRAMES) -> list[int]:
    return [(start + k) % n for k in range(n_s)]


def crop_offsets(size: int = CANONICAL_SIZE, crop: int = CROP_SIZE) -> int:
    """Largest valid crop offset along one axis (76 for 300 vs 224)."""
    if crop > size:
        raise ValueError(f"crop {crop} larger than slice {size}")
    return size - crop


def _sample_one(study, mode, crop_size, n_s, input_mode, rng, scaler, augment):
    size = study.frames.shape[-1]
    max_off = crop_offsets(size, crop_size)
    if mode == "2D":
        t = int(rng.integers(N_FRAMES))
        frames_used = channel_frames(t, input_mode)
        target_frames = [t]
    else:
        start = int(rng.integers(N_FRAMES))
        frames_used = cyclic_window(start, n_s)
        target_frames = frames_used
    theta = float(rng.uniform(0.0, 360.0)) if augment else 0.0
    scale = float(rng.uniform(*SCALE_RANGE)) if augment else 1.0
    off = (int(rng.integers(max_off + 1)), int(rng.integers(max_off + 1)))
    shape = (crop_size, crop_size)

    cache = {}

    def img(f):
        if f not in cache:
            cache[f] = transform_slice(study.frames[f], theta, scale, 1, shape, off).astype(np.float32)
        return cache[f]

    def msk(f):
        return transform_slice(study.masks[f], theta, scale, 0, shape, off).astype(np.int64)

    targets = adjust_targets(study.indices[target_frames], scale)
    if scaler is not None:
        targets = scaler.apply(targets)
    phase = study.phase[target_frames]
    if mode == "2D":
        image = np.stack([img(f) for f in frames_used])
        mask = msk(t)
        targets, phase = targets[0], phase[0]
    else:
        seq = np.stack([img(f) for f in frames_used])
        image = np.stack([seq] * 3)
        mask = np.stack([msk(f) for f in frames_used])
    record = {"theta": theta, "scale": scale, "offset": off, "frames": list(frames_used)}
    return AugmentedSample(study.patient_id, image, mask, targets.astype(np.float32), np.asarray(phase), record)


def build_batch(
    studies,
    mode: str = "2D",
    b: int = BATCH_SIZE,
    crop_size: int = CROP_SIZE,
    n_s: int | None = None,
    input_mode: str = "replicate",
    rng: np.random.Generator | None = None,
    scaler=None,
    augment: bool = True,
) -> list[AugmentedSample]:
    """Draw ``b`` samples from ``b`` distinct patients.

    2D: one random frame per patient (with its channel neighbours). 3D: a
    random cyclic window of ``n_s`` consecutive frames. Every sample gets a
    random rotation, scale and crop location; the same transform is applied
    to all frames and masks of a sample.
    """
    if mode not in ("2D", "3D"):
        raise ValueError(f"mode must be '2D' or '3D', got {mode!r}")
    if mode == "3D" and not n_s:
        raise ValueError("3D batches need n_s")
    if len(studies) < b:
        raise InsufficientPatients(f"need {b} patients for a batch, have {len(studies)}")
    rng = rng if rng is not None else np.random.default_rng()
    chosen = rng.choice(len(studies), size=b, replace=False)
    return [_sample_one(studies[i], mode, crop_size, n_s, input_mode, rng, scaler, augment) for i in chosen]


def collate(samples):
    """Stack samples into arrays ``(images, masks, targets, phase)``."""
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.mask for s in samples]),
        np.stack([s.targets for s in samples]),
        np.stack([np.asarray(s.phase) for s in samples]).astype(np.int64),
    )
