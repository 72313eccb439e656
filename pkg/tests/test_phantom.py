from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from lvquant.data import read_json
from lvquant.errors import DatasetWriteError, GeometryOverflow
from lvquant.indices import CAVITY, MYOCARDIUM, indices_from_mask
from lvquant.phantom import (
    RESOLUTIONS,
    SPACING_RANGE,
    analytic_indices,
    generate_dataset,
    render_study,
    sample_params,
)


def circular(seed=0, **kw):
    base = dict(
        eccentricity=(1.0, 0.0),
        angular_wall_variation=(1.0,) * 6,
        base_endo_radius=20.0,
        base_wall_thickness=8.0,
        center=(0.0, 0.0),
    )
    base.update(kw)
    return replace(sample_params(seed), **base)


def test_sample_params_ranges_and_determinism():
    p = sample_params(0)
    assert SPACING_RANGE[0] <= p.pixel_spacing <= SPACING_RANGE[1]
    assert p.resolution in RESOLUTIONS
    assert sample_params(0) == p
    spacings = [sample_params(s).pixel_spacing for s in range(1000)]
    assert min(spacings) >= 0.6836 and max(spacings) <= 1.7188


def test_circle_formulas():
    v = analytic_indices(circular(), 0)
    assert v.cavity_area == pytest.approx(np.pi * 400, rel=1e-6)
    np.testing.assert_allclose(v.dims, 40.0, rtol=1e-9)
    np.testing.assert_allclose(v.rwt, 8.0, rtol=1e-6)


def test_ellipse_formulas():
    p = circular(base_endo_radius=22.0, eccentricity=(18.0 / 22.0, 0.0))
    v = analytic_indices(p, 0)
    assert v.dims[0] == pytest.approx(44.0, rel=1e-9)
    assert v.cavity_area == pytest.approx(np.pi * 22 * 18, rel=1e-6)


def test_no_motion_gives_identical_frames():
    s = render_study(replace(sample_params(3), contraction_amplitude=0.0))
    for t in range(1, 20):
        np.testing.assert_array_equal(s.masks[t], s.masks[0])
        np.testing.assert_array_equal(s.indices[t], s.indices[0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_waveform_shape(seed):
    s = render_study(sample_params(seed))
    area = s.indices[:, 0]
    assert np.argmax(area) == 0
    assert np.count_nonzero(area == area.min()) == 1
    # cycle closure
    steps = np.abs(np.diff(area))
    assert abs(area[19] - area[0]) < steps.max()
    assert np.all(np.isfinite(s.indices)) and np.all(s.indices > 0)


def test_frame0_area_within_2_percent():
    p = circular(seed=5)
    s = render_study(p)
    pixel_area = np.count_nonzero(s.masks[0] == CAVITY) * p.pixel_spacing**2
    assert pixel_area == pytest.approx(analytic_indices(p, 0).cavity_area, rel=0.02)


def test_annulus_topology():
    s = render_study(sample_params(4))
    for t in (0, 7, 13):
        outside = ndimage.label(s.masks[t] != MYOCARDIUM)[0]
        border = set(np.unique(np.r_[outside[0], outside[-1], outside[:, 0], outside[:, -1]])) - {0}
        assert not np.any(np.isin(outside[s.masks[t] == CAVITY], list(border)))


def test_phase_field_matches_rule():
    from lvquant.indices import phase_labels

    s = render_study(sample_params(6))
    np.testing.assert_array_equal(s.phase, phase_labels(s.indices[:, 0]))


def test_mask_oracle_on_one_study():
    p = sample_params(11)
    s = render_study(p)
    for t in (0, p.es_frame):
        got = indices_from_mask(s.masks[t], p.pixel_spacing).as_array()
        exp = s.indices[t]
        tol = np.r_[np.maximum(0.02 * exp[:2], p.pixel_spacing**2), np.maximum(0.02 * exp[2:], p.pixel_spacing)]
        assert np.all(np.abs(got - exp) <= tol)


def test_geometry_overflow():
    with pytest.raises(GeometryOverflow):
        render_study(replace(sample_params(0), base_endo_radius=140.0, center=(60.0, 60.0)))


def test_generate_dataset(tmp_path):
    m = generate_dataset(1, 3, tmp_path / "a")
    assert len(m["patients"]) == 1
    assert read_json(tmp_path / "a" / "manifest.json") == m
    generate_dataset(1, 3, tmp_path / "b")
    pid = m["patients"][0]["id"]
    assert (tmp_path / "a" / pid / "frames.bin").read_bytes() == (tmp_path / "b" / pid / "frames.bin").read_bytes()


def test_generate_dataset_write_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetWriteError):
        generate_dataset(1, 0, blocker / "sub")
