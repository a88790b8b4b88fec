"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from hireg import RigidTransform


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1.0
    return q


def random_transform(rng: np.random.Generator,
                     translation_scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.uniform(-translation_scale, translation_scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
