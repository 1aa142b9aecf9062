"""Low-Reynolds-number resistance tensors, drag, and far-field coupling.

Everything here is quasi-static Stokes flow: drag is linear in velocity,
resistance tensors are symmetric positive definite, and bodies couple
through the far-field point-force (Stokeslet) solution only.  Lubrication
and wall corrections are intentionally out of scope; ambient background
flow enters through `FluidMedium.ambient_flow`.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

# Below this eccentricity the closed-form spheroid factors lose digits to
# cancellation (their denominators are O(e^3) differences of O(e) terms);
# switch to their small-e series, kept to O(e^6) so both branches agree to
# ~1e-10 at the crossover.
_SPHEROID_SERIES_ECCENTRICITY: float = 1e-2

# Evaluation closer than this to a Stokeslet source is singular (m)
STOKESLET_SINGULAR_RADIUS: float = 1e-9


def _zero_flow(p: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.zeros(3)


@dataclass(frozen=True)
class FluidMedium:
    """Newtonian fluid the bodies move through.

    `ambient_flow` maps a position to the undisturbed background velocity;
    it defaults to quiescent fluid and is the hook for boundary or imposed
    flow models.
    """

    viscosity: float = 1e-3  # Pa*s (water)
    density: float = 1000.0  # kg/m^3
    ambient_flow: Callable[[NDArray[np.float64]], NDArray[np.float64]] = _zero_flow

    def __post_init__(self) -> None:
        if self.viscosity <= 0.0:
            raise ValueError("viscosity must be positive")
        if self.density <= 0.0:
            raise ValueError("density must be positive")


@dataclass(frozen=True)
class Sphere:
    """Spherical particle of the given radius (m)."""

    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3

    @property
    def bounding_radius(self) -> float:
        return self.radius


@dataclass(frozen=True)
class ProlateSpheroid:
    """Prolate spheroid with symmetry (major) semi-axis a >= minor b (m).

    The body frame puts the symmetry axis along +z.
    """

    semi_major: float
    semi_minor: float

    def __post_init__(self) -> None:
        if self.semi_minor <= 0.0 or self.semi_major < self.semi_minor:
            raise ValueError("require semi_major >= semi_minor > 0")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.semi_major * self.semi_minor**2

    @property
    def eccentricity(self) -> float:
        return float(np.sqrt(1.0 - (self.semi_minor / self.semi_major) ** 2))

    @property
    def bounding_radius(self) -> float:
        return self.semi_major


ParticleShape = Sphere | ProlateSpheroid


@dataclass(frozen=True)
class ResistanceTensor:
    """Body-frame hydrodynamic resistance, split into 3x3 blocks.

    translational maps velocity (m/s) to force (N); rotational maps angular
    velocity (rad/s) to torque (N*m).  Both blocks are SPD.
    """

    translational: NDArray[np.float64]
    rotational: NDArray[np.float64]
    isotropic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "translational", np.asarray(self.translational, float))
        object.__setattr__(self, "rotational", np.asarray(self.rotational, float))

    def rotated(self, rotation: NDArray[np.float64]) -> "ResistanceTensor":
        """Resistance expressed in a frame reached by `rotation` (world R body)."""
        if self.isotropic:
            return self
        Q = np.asarray(rotation, dtype=np.float64)
        return ResistanceTensor(
            translational=Q @ self.translational @ Q.T,
            rotational=Q @ self.rotational @ Q.T,
        )


def _prolate_friction_factors(e: float) -> tuple[float, float, float, float]:
    """Perrin/Oberbeck correction factors (axial/transverse, trans/rot).

    Returns (axial_translation, transverse_translation, axial_rotation,
    transverse_rotation), each relative to the sphere of radius a
    (6*pi*mu*a for translation, 8*pi*mu*a^3 for rotation).
    """
    if e < _SPHEROID_SERIES_ECCENTRICITY:
        e2 = e * e
        e4 = e2 * e2
        e6 = e4 * e2
        return (
            1.0 - 2.0 / 5.0 * e2 - 17.0 / 175.0 * e4 - 128.0 / 2625.0 * e6,
            1.0 - 3.0 / 10.0 * e2 - 57.0 / 700.0 * e4 - 907.0 / 21000.0 * e6,
            1.0 - 6.0 / 5.0 * e2 + 27.0 / 175.0 * e4 + 64.0 / 2625.0 * e6,
            1.0 - 9.0 / 10.0 * e2 + 18.0 / 175.0 * e4 - 1.0 / 5250.0 * e6,
        )
    L = np.log((1.0 + e) / (1.0 - e))
    e3 = e**3
    axial_t = (8.0 / 3.0) * e3 / (-2.0 * e + (1.0 + e * e) * L)
    transverse_t = (16.0 / 3.0) * e3 / (2.0 * e + (3.0 * e * e - 1.0) * L)
    axial_r = (4.0 / 3.0) * e3 * (1.0 - e * e) / (2.0 * e - (1.0 - e * e) * L)
    transverse_r = (4.0 / 3.0) * e3 * (2.0 - e * e) / (-2.0 * e + (1.0 + e * e) * L)
    return axial_t, transverse_t, axial_r, transverse_r


@functools.lru_cache(maxsize=256)
def resistance_tensor(shape: ParticleShape, fluid: FluidMedium) -> ResistanceTensor:
    """Stokes resistance of the shape in the body frame.

    Memoized on (shape, fluid); callers must treat the blocks as read-only.

    Sphere: 6*pi*mu*R for translation, 8*pi*mu*R^3 for rotation, isotropic.
    Prolate spheroid: closed-form Perrin/Oberbeck factors along and across
    the symmetry axis (+z in the body frame); the axial translational drag
    is always below the transverse one.
    """
    mu = fluid.viscosity
    if isinstance(shape, Sphere):
        R = shape.radius
        return ResistanceTensor(
            translational=6.0 * np.pi * mu * R * np.eye(3),
            rotational=8.0 * np.pi * mu * R**3 * np.eye(3),
            isotropic=True,
        )
    a = shape.semi_major
    axial_t, transverse_t, axial_r, transverse_r = _prolate_friction_factors(
        shape.eccentricity
    )
    translational = 6.0 * np.pi * mu * a * np.diag([transverse_t, transverse_t, axial_t])
    rotational = 8.0 * np.pi * mu * a**3 * np.diag([transverse_r, transverse_r, axial_r])
    return ResistanceTensor(translational=translational, rotational=rotational)


def drag_force(
    shape: ParticleShape,
    fluid: FluidMedium,
    v_rel: NDArray[np.float64],
    omega_rel: NDArray[np.float64],
    orientation: NDArray[np.float64] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Viscous drag (force, torque) opposing motion relative to the fluid.

    Args:
        v_rel: Body velocity minus local fluid velocity (m/s).
        omega_rel: Body angular velocity minus fluid rotation (rad/s).
        orientation: World-from-body rotation matrix; identity if None.
    """
    v_rel = np.asarray(v_rel, dtype=np.float64)
    omega_rel = np.asarray(omega_rel, dtype=np.float64)
    tensor = resistance_tensor(shape, fluid)
    if orientation is not None:
        tensor = tensor.rotated(orientation)
    return -tensor.translational @ v_rel, -tensor.rotational @ omega_rel


def stokeslet_velocity(
    p: NDArray[np.float64],
    source_p: NDArray[np.float64],
    F: NDArray[np.float64],
    fluid: FluidMedium,
) -> NDArray[np.float64]:
    """Far-field fluid velocity at `p` induced by a point force at `source_p`.

    Oseen-tensor solution u = (F + (F . r_hat) r_hat) / (8 pi mu r); decays
    as 1/r and satisfies the reciprocity u(p; q, F) . G = u(q; p, G) . F.
    """
    p = np.asarray(p, dtype=np.float64)
    source_p = np.asarray(source_p, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    r = p - source_p
    dist = float(np.sqrt(r @ r))
    if dist <= STOKESLET_SINGULAR_RADIUS:
        raise ValueError(
            f"stokeslet evaluated {dist:.3e} m from its source (singular)"
        )
    r_hat = r / dist
    return (F + (F @ r_hat) * r_hat) / (8.0 * np.pi * fluid.viscosity * dist)
