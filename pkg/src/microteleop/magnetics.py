"""Electromagnet arrays, cluster magnetization, and the inverse actuation solve.

Each coil is modeled as a point magnetic dipole whose moment is proportional
to its drive current.  This gives closed-form fields and gradients that are
exactly linear in the current vector, which the rest of the library relies on
(superposition, least-squares current allocation).  The model is deliberately
swappable: anything that provides per-unit-current fields and gradients can
replace it.

Units are strict SI: positions in m, currents in A, fields in T, gradients
in T/m, forces in N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .hydrodynamics import ParticleShape, Sphere

# Permeability of free space (T*m/A)
MU_0: float = 4.0 * np.pi * 1e-7

# Points closer than this to a coil center are treated as singular (m)
SINGULAR_RADIUS: float = 1e-6

# Saturated clusters in fields weaker than this have no defined easy axis (T)
_FIELD_DIRECTION_FLOOR: float = 1e-12

_EYE3 = np.eye(3)


class SingularPointError(ValueError):
    """Field requested within the singular core of a point-dipole coil."""


@dataclass(frozen=True)
class Coil:
    """A single electromagnet, reduced to a current-driven point dipole.

    Args:
        position: Coil center in workspace coordinates (m).
        axis: Unit vector along the coil's dipole axis.
        dipole_gain: Dipole moment per ampere of drive current (A*m^2/A).
        max_current: Saturation limit of the coil driver (A).
    """

    position: NDArray[np.float64]
    axis: NDArray[np.float64]
    dipole_gain: float
    max_current: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        axis = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"coil axis must be unit length, got norm {norm!r}")
        object.__setattr__(self, "axis", axis)
        if self.dipole_gain <= 0.0:
            raise ValueError("dipole_gain must be positive")
        if self.max_current <= 0.0:
            raise ValueError("max_current must be positive")


@dataclass(frozen=True)
class CoilArray:
    """An ordered set of coils driven by a shared current vector."""

    coils: tuple[Coil, ...]

    def __post_init__(self) -> None:
        if len(self.coils) == 0:
            raise ValueError("coil array must contain at least one coil")
        object.__setattr__(self, "coils", tuple(self.coils))
        object.__setattr__(
            self, "_positions", np.array([c.position for c in self.coils])
        )
        object.__setattr__(
            self, "_moments", np.array([c.dipole_gain * c.axis for c in self.coils])
        )
        object.__setattr__(
            self, "_limits", np.array([c.max_current for c in self.coils])
        )

    def __len__(self) -> int:
        return len(self.coils)

    @classmethod
    def default_four_coil(
        cls,
        radius: float = 0.05,
        dipole_gain: float = 100.0,
        max_current: float = 5.0,
    ) -> "CoilArray":
        """Four coils on +/-x and +/-y at `radius` from center, axes inward.

        This is the default orthogonal in-plane configuration; it actuates
        forces in the xy-plane (the z direction is unreachable by symmetry).
        """
        def inward(p: NDArray[np.float64]) -> NDArray[np.float64]:
            return -p / np.linalg.norm(p)

        positions = [
            np.array([radius, 0.0, 0.0]),
            np.array([-radius, 0.0, 0.0]),
            np.array([0.0, radius, 0.0]),
            np.array([0.0, -radius, 0.0]),
        ]
        coils = tuple(
            Coil(position=p, axis=inward(p), dipole_gain=dipole_gain, max_current=max_current)
            for p in positions
        )
        return cls(coils=coils)


@dataclass
class CurrentVector:
    """Drive currents for a coil array, with allocation diagnostics.

    `saturated` is set when any requested current exceeded its coil limit
    and was clamped; `degenerate` when the actuation map was rank-deficient
    and the minimum-norm tie-break was used.
    """

    currents: NDArray[np.float64]
    saturated: bool = False
    degenerate: bool = False

    def __post_init__(self) -> None:
        self.currents = np.asarray(self.currents, dtype=np.float64)


@dataclass(frozen=True)
class Saturated:
    """Magnetization law for clusters already at saturation.

    The moment has fixed magnitude moment_density * volume and aligns with
    the local field direction.
    """

    moment_density: float  # A/m

    def __post_init__(self) -> None:
        if self.moment_density < 0.0:
            raise ValueError("moment_density must be >= 0")


@dataclass(frozen=True)
class Linear:
    """Linear (paramagnetic) magnetization: moment proportional to field."""

    susceptibility: float  # dimensionless

    def __post_init__(self) -> None:
        if self.susceptibility < 0.0:
            raise ValueError("susceptibility must be >= 0")


Magnetization = Saturated | Linear


@dataclass(frozen=True)
class MagneticCluster:
    """A magnetizable particle cluster acted on by the coil array."""

    shape: ParticleShape
    volume: float  # m^3
    magnetization: Magnetization

    def __post_init__(self) -> None:
        if self.volume <= 0.0:
            raise ValueError("cluster volume must be positive")

    @classmethod
    def saturated_sphere(cls, radius: float, moment_density: float) -> "MagneticCluster":
        shape = Sphere(radius=radius)
        return cls(shape=shape, volume=shape.volume, magnetization=Saturated(moment_density))


@dataclass(frozen=True)
class MagneticWrench:
    """Force and torque exerted on a magnetized body by the external field."""

    force: NDArray[np.float64]  # N
    torque: NDArray[np.float64]  # N*m

    def __post_init__(self) -> None:
        force = np.asarray(self.force, dtype=np.float64)
        torque = np.asarray(self.torque, dtype=np.float64)
        if not (np.all(np.isfinite(force)) and np.all(np.isfinite(torque))):
            raise ValueError("wrench components must be finite")
        object.__setattr__(self, "force", force)
        object.__setattr__(self, "torque", torque)


def _check_not_singular(array: CoilArray, p: NDArray[np.float64]) -> None:
    for k, coil in enumerate(array.coils):
        if np.linalg.norm(p - coil.position) <= SINGULAR_RADIUS:
            raise SingularPointError(
                f"point {p.tolist()} is within {SINGULAR_RADIUS} m of coil {k}"
            )


def _dipole_field(moment: NDArray[np.float64], r: NDArray[np.float64]) -> NDArray[np.float64]:
    """Field of a point dipole with moment `moment` at offset `r` from it."""
    dist = np.linalg.norm(r)
    r_hat = r / dist
    return MU_0 / (4.0 * np.pi) * (3.0 * np.dot(moment, r_hat) * r_hat - moment) / dist**3


def _dipole_gradient(moment: NDArray[np.float64], r: NDArray[np.float64]) -> NDArray[np.float64]:
    """Analytic Jacobian dB_i/dr_j of the point-dipole field.

    Symmetric and traceless everywhere off the source, as required by
    curl B = 0 and div B = 0 in free space.
    """
    dist = np.linalg.norm(r)
    m_dot_r = np.dot(moment, r)
    outer_rm = np.outer(r, moment)
    c = MU_0 / (4.0 * np.pi)
    return c * (
        3.0 * m_dot_r / dist**5 * np.eye(3)
        + 3.0 * (outer_rm + outer_rm.T) / dist**5
        - 15.0 * np.outer(r, r) * m_dot_r / dist**7
    )


def unit_current_field_gradient(
    array: CoilArray, p: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-coil field and gradient at `p` for one ampere of drive each.

    Returns:
        (fields, gradients) with shapes (n, 3) and (n, 3, 3).  The actual
        field for currents i is fields.T @ i; likewise for gradients.
    """
    p = np.asarray(p, dtype=np.float64)
    moments = array._moments
    positions = array._positions
    r = p[None, :] - positions  # (n, 3)
    dist = np.sqrt(np.einsum("ki,ki->k", r, r))
    if np.any(dist <= SINGULAR_RADIUS):
        k = int(np.argmin(dist))
        raise SingularPointError(
            f"point {p.tolist()} is within {SINGULAR_RADIUS} m of coil {k}"
        )
    c = MU_0 / (4.0 * np.pi)
    m_dot_r = np.einsum("ki,ki->k", moments, r)
    inv_d2 = 1.0 / (dist * dist)
    inv_d3 = inv_d2 / dist
    inv_d5 = inv_d3 * inv_d2
    a = (3.0 * c) * m_dot_r * inv_d5  # shared dipole prefactor
    fields = a[:, None] * r - (c * inv_d3)[:, None] * moments
    outer_rm = r[:, :, None] * moments[:, None, :]
    gradients = (
        a[:, None, None] * _EYE3
        + (3.0 * c * inv_d5)[:, None, None] * (outer_rm + outer_rm.transpose(0, 2, 1))
        - (5.0 * a * inv_d2)[:, None, None] * (r[:, :, None] * r[:, None, :])
    )
    return fields, gradients


def field_at(
    array: CoilArray, i: CurrentVector, p: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Magnetic field (T) at point `p` from the coil array under currents `i`.

    Exactly linear in the currents (dipole superposition).
    """
    fields, _ = unit_current_field_gradient(array, np.asarray(p, dtype=np.float64))
    return fields.T @ i.currents


def field_gradient_at(
    array: CoilArray, i: CurrentVector, p: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Field gradient dB_i/dp_j (T/m) at `p`; symmetric and traceless."""
    _, gradients = unit_current_field_gradient(array, np.asarray(p, dtype=np.float64))
    return np.einsum("k,kij->ij", i.currents, gradients)


def cluster_moment(
    c: MagneticCluster, B: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Magnetic moment (A*m^2) of the cluster in field `B`.

    Saturated clusters align a fixed-magnitude moment with the field
    (zero when the field direction is undefined); linear clusters respond
    proportionally, m = (chi * V / mu_0) * B.
    """
    B = np.asarray(B, dtype=np.float64)
    if not np.all(np.isfinite(B)):
        raise ValueError("field must be finite")
    law = c.magnetization
    if isinstance(law, Saturated):
        norm = np.linalg.norm(B)
        if norm < _FIELD_DIRECTION_FLOOR:
            return np.zeros(3)
        return law.moment_density * c.volume * (B / norm)
    return (law.susceptibility * c.volume / MU_0) * B


def magnetic_wrench(
    m: NDArray[np.float64],
    B: NDArray[np.float64],
    gradB: NDArray[np.float64],
    symmetry_tol: float = 1e-6,
) -> MagneticWrench:
    """Gradient-pulling force and alignment torque on a point dipole.

    force = gradB^T @ m  (equivalently (m . grad) B since gradB is symmetric
    off sources); torque = m x B.  A uniform field produces torque only.
    """
    m = np.asarray(m, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    gradB = np.asarray(gradB, dtype=np.float64)
    asym = np.linalg.norm(gradB - gradB.T)
    scale = np.linalg.norm(gradB)
    if scale > 0.0 and asym > symmetry_tol * scale:
        raise ValueError(f"field gradient is not symmetric (asymmetry {asym:.3e})")
    return MagneticWrench(force=gradB.T @ m, torque=np.cross(m, B))


def achieved_force(
    array: CoilArray,
    i: CurrentVector,
    p: NDArray[np.float64],
    cluster: MagneticCluster,
) -> NDArray[np.float64]:
    """Actuation force realized by currents `i` on `cluster` at `p`."""
    fields, gradients = unit_current_field_gradient(array, np.asarray(p, dtype=np.float64))
    B = fields.T @ i.currents
    G = np.einsum("k,kij->ij", i.currents, gradients)
    m = cluster_moment(cluster, B)
    return G.T @ m


def solve_currents(
    array: CoilArray,
    p: NDArray[np.float64],
    desired_force: NDArray[np.float64],
    cluster: MagneticCluster,
    bias_field: float = 1e-3,
    refine_steps: int = 1,
    degeneracy_rtol: float = 1e-9,
) -> CurrentVector:
    """Minimum-norm currents realizing `desired_force` on `cluster` at `p`.

    A field-dependent moment makes the bare force map ill-posed: the
    minimum-norm gradient currents produce a near-null field, leaving a
    saturated cluster's moment direction undefined.  The solve therefore
    pins the moment by also commanding a bias field of magnitude
    `bias_field` along the desired force direction, and takes the
    minimum-norm least-squares solution of the stacked linear map

        [per-coil unit field;  per-coil unit force at the moment estimate] i
            = [bias_field * f_hat;  desired_force]

    with the moment evaluated at the current field estimate and one
    fixed-point refinement (`refine_steps`) for field-dependent moments.

    If the stacked system cannot realize the requested force (residual
    above `degeneracy_rtol` relative, e.g. out-of-plane forces on the
    planar four-coil array), the minimum-norm solution is returned with
    `degenerate` set.  Currents beyond a coil's limit are clamped
    componentwise with `saturated` set.  A zero desired force yields zero
    currents and no flags.
    """
    p = np.asarray(p, dtype=np.float64)
    fields, gradients = unit_current_field_gradient(array, p)
    return allocate_currents(
        array,
        fields,
        gradients,
        desired_force,
        cluster,
        bias_field=bias_field,
        refine_steps=refine_steps,
        degeneracy_rtol=degeneracy_rtol,
    )


def allocate_currents(
    array: CoilArray,
    fields: NDArray[np.float64],
    gradients: NDArray[np.float64],
    desired_force: NDArray[np.float64],
    cluster: MagneticCluster,
    bias_field: float = 1e-3,
    refine_steps: int = 1,
    degeneracy_rtol: float = 1e-9,
) -> CurrentVector:
    """`solve_currents` against a precomputed unit-current basis.

    Callers stepping a loop already hold (fields, gradients) from
    `unit_current_field_gradient` at the same point; this avoids
    recomputing them.
    """
    desired_force = np.asarray(desired_force, dtype=np.float64)
    if not np.all(np.isfinite(desired_force)):
        raise ValueError("desired force must be finite")
    n = len(array)
    force_norm = np.linalg.norm(desired_force)
    if force_norm == 0.0:
        return CurrentVector(currents=np.zeros(n))

    f_dir = desired_force / force_norm
    target_field = bias_field * f_dir

    force_map = np.empty((3, len(array)))

    def solve_with_moment(moment: NDArray[np.float64]) -> NDArray[np.float64]:
        np.einsum("kij,i->jk", gradients, moment, out=force_map)  # columns G_k^T m
        stacked = np.vstack([fields.T, force_map])
        rhs = np.concatenate([target_field, desired_force])
        # Row-equilibrate (field rows are ~1e4 times the force rows), then
        # normal equations at full rank; fall back to the minimum-norm
        # least-squares solve when the map is deficient.
        scale = np.sqrt(np.einsum("ij,ij->i", stacked, stacked))
        scale[scale == 0.0] = 1.0
        A = stacked / scale[:, None]
        b = rhs / scale
        gram = A.T @ A
        try:
            solution = np.linalg.solve(gram, A.T @ b)
        except np.linalg.LinAlgError:
            solution = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
        if not np.isfinite(solution.sum()):
            solution = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
        return solution

    moment = cluster_moment(cluster, target_field)
    currents = solve_with_moment(moment)
    for _ in range(max(refine_steps, 0)):
        refined = cluster_moment(cluster, fields.T @ currents)
        delta = refined - moment
        if delta @ delta <= 1e-18 * (moment @ moment):
            break  # already at the moment fixed point (1e-9 relative)
        moment = refined
        currents = solve_with_moment(moment)

    residual = force_map @ currents - desired_force
    degenerate = bool(
        np.sqrt(residual @ residual) > degeneracy_rtol * force_norm
    )
    limits = array._limits
    clamped = np.clip(currents, -limits, limits)
    saturated = bool(np.any(np.abs(currents) > limits))
    return CurrentVector(currents=clamped, saturated=saturated, degenerate=degenerate)
