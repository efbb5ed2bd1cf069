"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jacmorph.grid import Image3D, Mask3D
from jacmorph.jacobian import JacobianMap
from jacmorph.phantom import PhantomSpec, make_sphere_phantom

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

UNIT = (1.0, 1.0, 1.0)


def image_of(arr, spacing=UNIT, origin=(0.0, 0.0, 0.0)) -> Image3D:
    return Image3D(np.asarray(arr, dtype=np.float64), spacing, origin)


def mask_of(arr, spacing=UNIT, origin=(0.0, 0.0, 0.0)) -> Mask3D:
    return Mask3D(np.asarray(arr, dtype=bool), spacing, origin)


def jmap_of(arr, spacing=UNIT, origin=(0.0, 0.0, 0.0)) -> JacobianMap:
    return JacobianMap(image_of(arr, spacing, origin))


@pytest.fixture(scope="session")
def shrink_case():
    """One moderately shrinking blended-intensity phantom at full resolution."""
    spec = PhantomSpec(shrink_factor=0.5 ** (1.0 / 3.0), noise_sd=0.01, seed=42,
                       foreground_intensity=0.71, background_intensity=0.09)
    return make_sphere_phantom(spec)


@pytest.fixture(scope="session")
def small_pair():
    """A small, fast pair for registration unit tests: 24 voxel cube, 2 mm."""
    spec = PhantomSpec(dims=(24, 24, 24), spacing=(2.0, 2.0, 2.0),
                       baseline_radius=8.0, shrink_factor=0.85, noise_sd=0.01,
                       seed=5, foreground_intensity=0.71, background_intensity=0.09)
    return make_sphere_phantom(spec)
