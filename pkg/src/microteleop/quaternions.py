"""Minimal unit-quaternion helpers (scalar-first convention w, x, y, z)."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

IDENTITY: NDArray[np.float64] = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: NDArray[np.float64]) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def to_matrix(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """World-from-body rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def integrate(
    q: NDArray[np.float64], omega_world: NDArray[np.float64], dt: float
) -> NDArray[np.float64]:
    """Advance orientation by a world-frame angular velocity, renormalized."""
    wx, wy, wz = omega_world
    w, x, y, z = q
    dq = 0.5 * np.array(
        [
            -wx * x - wy * y - wz * z,
            wx * w + wy * z - wz * y,
            -wx * z + wy * w + wz * x,
            wx * y - wy * x + wz * w,
        ]
    )
    return normalize(q + dt * dq)
