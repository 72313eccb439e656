"""Synthetic short-axis cine phantoms with analytic LV indices.

The LV is an eccentric annulus. The endocardium is an ellipse whose size
follows a cosine contraction waveform (frame 0 = end-diastole); the wall
thickness varies smoothly over angle through a periodic spline of six
multipliers and thickens over the cycle so that myocardial area stays
constant. Because the boundaries are explicit polar curves, every index has
a closed form (or a dense quadrature of closed-form radii) that does not
depend on any rasterized mask.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .data import N_FRAMES, Study, write_json, write_study
from .errors import DatasetWriteError, GeometryOverflow
from .indices import CAVITY, MYOCARDIUM, IndexVector, phase_labels

log = logging.getLogger(__name__)

SPACING_RANGE = (0.6836, 1.7188)
RESOLUTIONS = (256, 512)
# spacing sub-ranges per matrix size keep the field of view within ~300-440 mm
_SPACING_BY_RES = {512: (0.6836, 0.8594), 256: (1.1719, 1.7188)}
_N_QUAD = 3600
_SUPERSAMPLE = 4
NOISE_CORRELATION_MM = 1.5


@dataclass(frozen=True)
class PhantomParams:
    patient_seed: int
    center: tuple[float, float]  # (x, y) mm from image centre, y up
    base_endo_radius: float  # mm, major semi-axis at end-diastole
    base_wall_thickness: float  # mm at end-diastole
    contraction_amplitude: float
    systole_fraction: float
    angular_wall_variation: tuple[float, ...]  # 6 multipliers at 0, 60, ..., 300 deg
    eccentricity: tuple[float, float]  # (minor/major axis ratio, major-axis angle deg)
    intensity_levels: tuple[float, float, float]  # background, myocardium, blood pool
    noise_sigma: float
    bias_field_amplitude: float
    pixel_spacing: float
    resolution: int

    def __post_init__(self):
        if self.base_endo_radius <= 0 or self.base_wall_thickness <= 0:
            raise ValueError("radius and wall thickness must be positive")
        if not 0 <= self.contraction_amplitude < 1:
            raise ValueError("contraction_amplitude must lie in [0, 1)")
        if not SPACING_RANGE[0] <= self.pixel_spacing <= SPACING_RANGE[1]:
            raise ValueError(f"pixel_spacing {self.pixel_spacing} outside {SPACING_RANGE}")
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if len(self.angular_wall_variation) != 6:
            raise ValueError("need 6 angular wall multipliers")

    @property
    def es_frame(self) -> int:
        """End-systolic frame; integral so that the area minimum is unique."""
        return int(np.clip(round(self.systole_fraction * N_FRAMES), 1, N_FRAMES - 1))

    def to_dict(self) -> dict:
        return asdict(self)


def sample_params(seed: int) -> PhantomParams:
    rng = np.random.default_rng(seed)
    resolution = int(rng.choice(RESOLUTIONS))
    lo, hi = _SPACING_BY_RES[resolution]
    return PhantomParams(
        patient_seed=int(seed),
        center=(float(rng.uniform(-25, 25)), float(rng.uniform(-25, 25))),
        base_endo_radius=float(rng.uniform(22.0, 28.0)),
        base_wall_thickness=float(rng.uniform(7.0, 11.0)),
        contraction_amplitude=float(rng.uniform(0.2, 0.35)),
        systole_fraction=float(rng.uniform(0.3, 0.5)),
        angular_wall_variation=tuple(float(v) for v in rng.uniform(0.7, 1.3, size=6)),
        eccentricity=(float(rng.uniform(0.85, 1.0)), float(rng.uniform(0.0, 180.0))),
        intensity_levels=(float(rng.uniform(0.05, 0.2)), float(rng.uniform(0.3, 0.45)), float(rng.uniform(0.75, 0.95))),
        noise_sigma=float(rng.uniform(0.02, 0.05)),
        bias_field_amplitude=float(rng.uniform(0.0, 0.1)),
        pixel_spacing=float(rng.uniform(lo, hi)),
        resolution=resolution,
    )


# ------------------------------------------------------------------- geometry


def contraction(t, es_frame: int, n_frames: int = N_FRAMES):
    """Contraction fraction in [0, 1]: 0 at frame 0, 1 only at ``es_frame``."""
    t = np.asarray(t, dtype=np.float64) % n_frames
    up = 0.5 * (1 - np.cos(np.pi * t / es_frame))
    down = 0.5 * (1 + np.cos(np.pi * (t - es_frame) / (n_frames - es_frame)))
    return np.where(t <= es_frame, up, down)


def _wall_profile(params: PhantomParams) -> CubicSpline:
    knots = np.deg2rad(np.arange(0, 420, 60))
    vals = np.array([*params.angular_wall_variation, params.angular_wall_variation[0]])
    return CubicSpline(knots, vals, bc_type="periodic")


def _endo_axes(params: PhantomParams, t) -> tuple[float, float]:
    r = params.base_endo_radius * (1 - params.contraction_amplitude * float(contraction(t, params.es_frame)))
    return r, r * params.eccentricity[0]


def endo_radius(params: PhantomParams, t, theta):
    """Polar radius (mm) of the endocardial ellipse at angle ``theta`` (rad)."""
    a, b = _endo_axes(params, t)
    phi = np.deg2rad(params.eccentricity[1])
    d = np.asarray(theta) - phi
    return a * b / np.sqrt((b * np.cos(d)) ** 2 + (a * np.sin(d)) ** 2)


_QUAD = np.linspace(0.0, 2 * np.pi, _N_QUAD, endpoint=False)


def _myo_area(r_endo, wall):
    # 0.5 * integral (r_epi^2 - r_endo^2) dtheta on a uniform periodic grid
    return np.pi * np.mean((r_endo + wall) ** 2 - r_endo**2)


def wall_scale(params: PhantomParams, t) -> float:
    """Wall thickness scale at frame t that keeps myocardial area at its ED value."""
    g = _wall_profile(params)(_QUAD)
    m0 = _myo_area(endo_radius(params, 0, _QUAD), params.base_wall_thickness * g)
    r = endo_radius(params, t, _QUAD)
    # pi * mean(2 r w g + w^2 g^2) = m0  ->  quadratic in w
    qa = np.pi * np.mean(g**2)
    qb = 2 * np.pi * np.mean(r * g)
    return float((-qb + np.sqrt(qb**2 + 4 * qa * m0)) / (2 * qa))


def epi_radius(params: PhantomParams, t, theta):
    g = _wall_profile(params)(np.asarray(theta) % (2 * np.pi))
    return endo_radius(params, t, theta) + wall_scale(params, t) * g


def analytic_indices(params: PhantomParams, t: int) -> IndexVector:
    """Closed-form indices of frame ``t``.

    Cavity area is pi*a*b, dimensions are diameters of the ellipse along
    0/60/120 deg, myocardial area and sector-mean wall thickness are dense
    quadratures of the explicit boundary radii.
    """
    if not 0 <= t < N_FRAMES:
        raise ValueError(f"frame index {t} outside [0, {N_FRAMES})")
    a, b = _endo_axes(params, t)
    r_endo = endo_radius(params, t, _QUAD)
    wall = wall_scale(params, t) * _wall_profile(params)(_QUAD)
    dims = tuple(float(2 * endo_radius(params, t, np.deg2rad(ang))) for ang in (0.0, 60.0, 120.0))
    deg = np.rad2deg(_QUAD)
    sectors = np.floor(((deg + 30.0) % 360.0) / 60.0).astype(int)
    rwt = tuple(float(wall[sectors == k].mean()) for k in range(6))
    return IndexVector(
        cavity_area=float(np.pi * a * b),
        myo_area=float(_myo_area(r_endo, wall)),
        dims=dims,
        rwt=rwt,
    )


# ------------------------------------------------------------------ rendering


def _pixel_grid(params: PhantomParams, rows, cols):
    """Physical (x, y) mm of pixel positions relative to the LV centre."""
    n, s = params.resolution, params.pixel_spacing
    c = (n - 1) / 2.0
    x = (np.asarray(cols) - c) * s - params.center[0]
    y = -(np.asarray(rows) - c) * s - params.center[1]
    return x, y


def _labels_at(params: PhantomParams, t, x, y, wall_k, spline):
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x) % (2 * np.pi)
    r_in = endo_radius(params, t, theta)
    r_out = r_in + wall_k * spline(theta)
    lab = np.zeros(rho.shape, dtype=np.uint8)
    lab[rho <= r_out] = MYOCARDIUM
    lab[rho <= r_in] = CAVITY
    return lab


def _check_fov(params: PhantomParams) -> float:
    """Largest epicardial radius over the cycle; raises if it leaves the field of view."""
    half_fov = (params.resolution - 1) / 2.0 * params.pixel_spacing
    r_max = max(float(np.max(epi_radius(params, t, _QUAD))) for t in range(N_FRAMES))
    theta = _QUAD
    ext_x = np.max(np.abs(params.center[0] + r_max * np.cos(theta)))
    ext_y = np.max(np.abs(params.center[1] + r_max * np.sin(theta)))
    if max(ext_x, ext_y) > half_fov - params.pixel_spacing:
        raise GeometryOverflow(
            f"epicardium reaches {max(ext_x, ext_y):.1f} mm from the image centre; field of view half-width {half_fov:.1f} mm"
        )
    return r_max


def _bias_field(params: PhantomParams, rng) -> np.ndarray:
    n = params.resolution
    u = np.linspace(-1, 1, n)
    uu, vv = np.meshgrid(u, u)
    coef = rng.uniform(-1, 1, size=5)
    poly = coef[0] * uu + coef[1] * vv + coef[2] * uu * vv + coef[3] * uu**2 + coef[4] * vv**2
    peak = np.max(np.abs(poly))
    return params.bias_field_amplitude * poly / peak if peak > 0 else np.zeros_like(poly)


def correlated_noise(params: PhantomParams, rng) -> np.ndarray:
    """Gaussian noise with std ``noise_sigma`` and a fixed correlation length in mm.

    A physical (not per-pixel) correlation length keeps the noise texture the
    same after resampling to the canonical grid, whatever the native spacing.
    """
    white = rng.normal(0.0, 1.0, size=(params.resolution, params.resolution))
    smooth = ndimage.gaussian_filter(white, NOISE_CORRELATION_MM / params.pixel_spacing, mode="wrap")
    return params.noise_sigma * smooth / smooth.std()


def render_frame(params: PhantomParams, t: int, rng=None):
    """Rasterize frame ``t``: returns ``(image float32, mask uint8)``.

    Masks use pixel-centre membership. The image uses 4x4 supersampling for
    partial-volume edges and is then corrupted by noise drawn from ``rng``.
    """
    n, s = params.resolution, params.pixel_spacing
    spline = _wall_profile(params)
    wall_k = wall_scale(params, t)
    r_max = max(float(np.max(epi_radius(params, t, _QUAD))), 1.0) + 2 * s
    # only pixels in a window around the LV can be non-background
    c = (n - 1) / 2.0
    col0 = c + params.center[0] / s
    row0 = c - params.center[1] / s
    half = r_max / s
    r_lo, r_hi = max(int(np.floor(row0 - half)), 0), min(int(np.ceil(row0 + half)) + 1, n)
    c_lo, c_hi = max(int(np.floor(col0 - half)), 0), min(int(np.ceil(col0 + half)) + 1, n)
    rows, cols = np.mgrid[r_lo:r_hi, c_lo:c_hi]
    x, y = _pixel_grid(params, rows, cols)
    box = np.hypot(x, y) <= r_max
    br, bc = rows[box], cols[box]
    mask = np.zeros((n, n), dtype=np.uint8)
    mask[br, bc] = _labels_at(params, t, x[box], y[box], wall_k, spline)

    bg, myo, blood = params.intensity_levels
    image = np.full((n, n), bg, dtype=np.float64)
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    acc = np.zeros(br.size)
    levels = np.array([bg, myo, blood])
    for dr in offs:
        for dc in offs:
            sx, sy = _pixel_grid(params, br + dr, bc + dc)
            acc += levels[_labels_at(params, t, sx, sy, wall_k, spline)]
    image[br, bc] = acc / _SUPERSAMPLE**2

    if rng is not None:
        image = image + correlated_noise(params, rng)
    return image, mask


def render_study(params: PhantomParams, patient_id: str | None = None) -> Study:
    """Render all 20 frames, with analytic indices and phase labels."""
    _check_fov(params)
    rng = np.random.default_rng([params.patient_seed, 1])
    bias = _bias_field(params, rng)
    frames = np.empty((N_FRAMES, params.resolution, params.resolution), dtype=np.float32)
    masks = np.empty_like(frames, dtype=np.uint8)
    for t in range(N_FRAMES):
        img, msk = render_frame(params, t, rng)
        frames[t] = (img + bias).astype(np.float32)
        masks[t] = msk
    indices = np.stack([analytic_indices(params, t).as_array() for t in range(N_FRAMES)])
    phase = phase_labels(indices[:, 0], strict=params.contraction_amplitude > 0)
    return Study(
        patient_id=patient_id or f"seed{params.patient_seed}",
        frames=frames,
        masks=masks,
        indices=indices,
        phase=phase,
        spacing=params.pixel_spacing,
        meta={"phantom": params.to_dict()},
    )


def patient_seeds(n_patients: int, seed: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n_patients)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_studies(n_patients: int = 56, seed: int = 0):
    """Yield ``(params, study)`` pairs without touching the disk."""
    for i, ps in enumerate(patient_seeds(n_patients, seed)):
        params = sample_params(ps)
        yield params, render_study(params, patient_id=f"P{i + 1:03d}")


def generate_dataset(n_patients: int = 56, seed: int = 0, out_dir="data") -> dict:
    """Write ``n_patients`` study directories plus ``manifest.json`` to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetWriteError(f"cannot create {out}: {exc}") from exc
    records = []
    for params, study in generate_studies(n_patients, seed):
        write_study(study, out / study.patient_id)
        records.append(
            {
                "id": study.patient_id,
                "seed": params.patient_seed,
                "spacing": params.pixel_spacing,
                "resolution": params.resolution,
            }
        )
        log.info("wrote %s (%d px, %.4f mm/px)", study.patient_id, params.resolution, params.pixel_spacing)
    manifest = {"n_patients": n_patients, "seed": seed, "patients": records}
    try:
        write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise DatasetWriteError(f"cannot write manifest: {exc}") from exc
    return manifest
