"""LV indices and cardiac phase labels computed from label masks.

Angles follow the display convention used throughout the package: 0 deg
points along +x (increasing column), angles grow counter-clockwise on
screen, i.e. towards decreasing row index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import AmbiguousPhase, DegenerateMask

BACKGROUND, MYOCARDIUM, CAVITY = 0, 1, 2
SYSTOLE, DIASTOLE = 0, 1
PHASE_NAMES = ("systole", "diastole")

INDEX_NAMES = (
    "cavity_area",
    "myo_area",
    "dim1",
    "dim2",
    "dim3",
    "rwt1",
    "rwt2",
    "rwt3",
    "rwt4",
    "rwt5",
    "rwt6",
)
N_INDICES = len(INDEX_NAMES)
AREA_SLICE = slice(0, 2)
DIM_SLICE = slice(2, 5)
RWT_SLICE = slice(5, 11)
TASK_SLICES = {"areas": AREA_SLICE, "dims": DIM_SLICE, "rwt": RWT_SLICE}

DIM_ANGLES = (0.0, 60.0, 120.0)
RAY_STEP_DEG = 1.0
_RAY_ANGLES = np.arange(0.0, 360.0, RAY_STEP_DEG)
_SAMPLE_STEP = 0.25  # px along each ray


@dataclass(frozen=True)
class IndexVector:
    """The 11 regression targets of one frame, in mm and mm^2."""

    cavity_area: float
    myo_area: float
    dims: tuple[float, float, float]
    rwt: tuple[float, float, float, float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([self.cavity_area, self.myo_area, *self.dims, *self.rwt], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "IndexVector":
        v = [float(x) for x in np.asarray(values, dtype=np.float64).ravel()]
        if len(v) != N_INDICES:
            raise ValueError(f"expected {N_INDICES} values, got {len(v)}")
        return cls(v[0], v[1], (v[2], v[3], v[4]), (v[5], v[6], v[7], v[8], v[9], v[10]))


def sector_of(angle_deg):
    """Index of the 60 deg RWT sector containing ``angle_deg`` (sector 0 centred at 0 deg)."""
    return (np.floor((np.asarray(angle_deg) + 30.0) % 360.0 / 60.0)).astype(int)


def _first_crossing(values: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row, first sample index >= start where ``values`` drops below 0.5.

    Returns the fractional sample position of the 0.5 crossing (linear
    interpolation between neighbouring samples) and a found-flag.
    """
    n = values.shape[1]
    idx = np.arange(n)[None, :]
    below = (values < 0.5) & (idx >= start[:, None])
    found = below.any(axis=1)
    j = np.where(found, below.argmax(axis=1), n - 1)
    j = np.maximum(j, 1)
    rows = np.arange(values.shape[0])
    v0 = values[rows, j - 1]
    v1 = values[rows, j]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(v0 != v1, (v0 - 0.5) / (v0 - v1), 0.0)
    return (j - 1) + np.clip(frac, 0.0, 1.0), found


def boundary_radii(mask: np.ndarray, angles_deg=_RAY_ANGLES):
    """Endo- and epicardial radii (px) along rays from the cavity centroid.

    Returns ``(centroid_rc, r_endo, r_epi)``. Raises DegenerateMask when the
    cavity is empty, the centroid lies outside the cavity, or some ray never
    crosses myocardium before reaching the background.
    """
    mask = np.asarray(mask)
    cav = mask == CAVITY
    if not cav.any():
        raise DegenerateMask("cavity (label 2) is empty")
    rows, cols = np.nonzero(cav)
    cr, cc = rows.mean(), cols.mean()

    theta = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    tr, tc = np.nonzero(mask > BACKGROUND)
    reach = np.sqrt(np.max((tr - cr) ** 2 + (tc - cc) ** 2)) + 3.0
    radii = np.arange(0.0, reach, _SAMPLE_STEP)
    rr = cr - np.sin(theta)[:, None] * radii[None, :]
    cc_ = cc + np.cos(theta)[:, None] * radii[None, :]
    coords = np.stack([rr.ravel(), cc_.ravel()])

    def sample(binary):
        out = ndimage.map_coordinates(binary.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
        return out.reshape(rr.shape)

    cav_s = sample(cav)
    tis_s = sample(mask > BACKGROUND)
    myo_s = sample(mask == MYOCARDIUM)

    if np.any(cav_s[:, 0] < 0.5):
        raise DegenerateMask("cavity centroid lies outside the cavity")
    zero = np.zeros(len(theta), dtype=int)
    endo_pos, endo_found = _first_crossing(cav_s, zero)
    if not endo_found.all():
        raise DegenerateMask("cavity reaches the image border")
    start = np.floor(endo_pos).astype(int)
    epi_pos, epi_found = _first_crossing(tis_s, start)
    if not epi_found.all():
        raise DegenerateMask("myocardium reaches the image border")
    # every ray must pass through myocardium between the two crossings
    n = radii.size
    idx = np.arange(n)[None, :]
    between = (idx >= start[:, None]) & (idx <= np.ceil(epi_pos).astype(int)[:, None])
    myo_peak = np.where(between, myo_s, 0.0).max(axis=1)
    if np.any(myo_peak < 0.5):
        bad = np.asarray(angles_deg)[myo_peak < 0.5]
        raise DegenerateMask(f"annulus broken along {bad.size} ray(s), e.g. {bad[0]:.0f} deg")
    return (cr, cc), endo_pos * _SAMPLE_STEP, epi_pos * _SAMPLE_STEP


def indices_from_mask(mask: np.ndarray, spacing: float) -> IndexVector:
    """Mask-based oracle for the 11 LV indices.

    Areas are pixel counts times ``spacing**2``. Dimensions are chords of the
    cavity through its centroid along 0/60/120 deg. RWT k is the mean radial
    wall thickness over the 1-deg rays of sector k (centred at 60*k deg).
    """
    mask = np.asarray(mask)
    _, r_endo, r_epi = boundary_radii(mask)
    n_half = int(round(180.0 / RAY_STEP_DEG))
    dims = []
    for a in DIM_ANGLES:
        i = int(round(a / RAY_STEP_DEG))
        dims.append((r_endo[i] + r_endo[(i + n_half) % r_endo.size]) * spacing)
    thick = (r_epi - r_endo) * spacing
    sectors = sector_of(_RAY_ANGLES)
    rwt = [float(thick[sectors == k].mean()) for k in range(6)]
    s2 = float(spacing) ** 2
    return IndexVector(
        cavity_area=float(np.count_nonzero(mask == CAVITY)) * s2,
        myo_area=float(np.count_nonzero(mask == MYOCARDIUM)) * s2,
        dims=tuple(float(d) for d in dims),
        rwt=tuple(rwt),
    )


def phase_labels(cavity_area_curve, strict: bool = True) -> np.ndarray:
    """Systole/diastole codes from a cyclic cavity-area curve.

    Frames after the area maximum (exclusive) up to the minimum (inclusive),
    walking forward cyclically, are ``SYSTOLE``; the rest are ``DIASTOLE``.
    With ``strict=False`` a tied extremum only warns and the earliest frame
    wins.
    """
    curve = np.asarray(cavity_area_curve, dtype=np.float64)
    imax, imin = int(np.argmax(curve)), int(np.argmin(curve))
    n_max = np.count_nonzero(curve == curve[imax])
    n_min = np.count_nonzero(curve == curve[imin])
    if n_max > 1 or n_min > 1:
        msg = f"non-unique extremum in area curve (argmax ties={n_max}, argmin ties={n_min})"
        if strict:
            raise AmbiguousPhase(msg)
        warnings.warn(msg + "; using earliest frames", stacklevel=2)
    labels = np.full(curve.size, DIASTOLE, dtype=np.int64)
    if imax == imin:
        return labels
    t = (imax + 1) % curve.size
    while True:
        labels[t] = SYSTOLE
        if t == imin:
            break
        t = (t + 1) % curve.size
    return labels
