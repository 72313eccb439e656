from __future__ import annotations

import warnings

import numpy as np
import pytest
import torch

from lvquant.data import preprocess_study
from lvquant.indices import CAVITY, MYOCARDIUM
from lvquant.phantom import generate_studies

torch.set_num_threads(1)


def annulus_mask(size=128, r_endo=20.0, wall=8.0, center=None):
    """Label image with a disk cavity of radius ``r_endo`` px inside a uniform wall."""
    c = (size - 1) / 2.0 if center is None else center
    rr, cc = np.mgrid[:size, :size]
    r = np.hypot(rr - c, cc - c)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[r <= r_endo + wall] = MYOCARDIUM
    mask[r <= r_endo] = CAVITY
    return mask


@pytest.fixture(scope="session")
def raw_studies():
    """Twelve raw phantom studies (seed 7)."""
    return [s for _, s in generate_studies(12, 7)]


@pytest.fixture(scope="session")
def canonical_studies(raw_studies):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [preprocess_study(s) for s in raw_studies]


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Shared list of (criterion, passed, detail) rows printed in the terminal summary."""
    if not hasattr(request.config, "_acceptance_rows"):
        request.config._acceptance_rows = []
    return request.config._acceptance_rows


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "_acceptance_rows", None)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
