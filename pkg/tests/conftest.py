"""Shared fixtures: a small, fast phantom case and a reduced profile."""

import pytest

from radpath.engine import STANDARD
from radpath.phantom import PhantomGeometry


@pytest.fixture(scope="session")
def small_geometry():
    """A compact gland so pipeline tests stay fast."""
    return PhantomGeometry(
        size_px=(96, 96, 8),
        spacing=(0.4, 0.4, 4.0),
        prostate_axes=(14.0, 11.0, 13.0),
        bump_axes=(5.0, 3.5, 9.0),
        pz_inner_axes=(12.5, 8.0, 12.0),
        pz_inner_shift=(0.0, -2.5, 0.0),
        urethra_radius=1.2,
        urethra_base_y=1.5,
        urethra_bend=5.0,
        cancer_center=(5.0, 6.0, 1.0),
        cancer_axes=(4.0, 3.5, 4.0),
        slice_indices=(2, 3, 4),
    )


@pytest.fixture(scope="session")
def quick_profile():
    """Standard chain with trimmed budgets for unit-level pipeline tests."""
    return STANDARD.replace(gd_iterations=80, lbfgsb_iterations=5)
