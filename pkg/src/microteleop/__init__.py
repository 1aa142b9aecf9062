"""Scaled bilateral tele-manipulation of magnetically guided microrobots.

A deterministic desk-scale simulator and control library: electromagnet
actuation, low-Reynolds-number hydrodynamics, master/slave dynamics, force
observation and scaling, the bilateral loop with an absolute-stability
check, and reproducible manipulation scenarios.
"""

from .hydrodynamics import (
    FluidMedium,
    ParticleShape,
    ProlateSpheroid,
    ResistanceTensor,
    Sphere,
    drag_force,
    resistance_tensor,
    stokeslet_velocity,
)
from .magnetics import (
    Coil,
    CoilArray,
    CurrentVector,
    Linear,
    MagneticCluster,
    MagneticWrench,
    Saturated,
    SingularPointError,
    cluster_moment,
    field_at,
    field_gradient_at,
    magnetic_wrench,
    solve_currents,
)

__all__ = [
    "Coil",
    "CoilArray",
    "CurrentVector",
    "FluidMedium",
    "Linear",
    "MagneticCluster",
    "MagneticWrench",
    "ParticleShape",
    "ProlateSpheroid",
    "ResistanceTensor",
    "Saturated",
    "SingularPointError",
    "Sphere",
    "cluster_moment",
    "drag_force",
    "field_at",
    "field_gradient_at",
    "magnetic_wrench",
    "resistance_tensor",
    "solve_currents",
    "stokeslet_velocity",
]
