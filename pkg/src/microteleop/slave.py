"""Slave microrobot dynamics: force assembly and fixed-step integration.

The slave obeys a rigid-body force balance with four contributions: viscous
drag, magnetic actuation, contact/adhesion against other bodies, and net
gravity.  Two integration modes are provided: `QuasiStatic` solves the
instantaneous Stokes balance (the default at low Reynolds number, where
inertia is negligible) and `SecondOrder` integrates the full momentum
equation with the drag term handled implicitly so that haptic-rate steps
remain stable even when dt exceeds the viscous time constant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from numpy.typing import NDArray

from . import quaternions
from .hydrodynamics import (
    FluidMedium,
    ParticleShape,
    ProlateSpheroid,
    Sphere,
    resistance_tensor,
    stokeslet_velocity,
)
from .magnetics import MagneticCluster, cluster_moment

STANDARD_GRAVITY: NDArray[np.float64] = np.array([0.0, 0.0, -9.81])


class IntegrationDivergedError(RuntimeError):
    """A step produced a non-finite state; carries the offending snapshot."""

    def __init__(self, message: str, state: "RigidBodyState") -> None:
        super().__init__(message)
        self.state = state


class StepMode(enum.Enum):
    QUASI_STATIC = "quasi_static"
    SECOND_ORDER = "second_order"


@dataclass(frozen=True)
class RigidBodyState:
    """Pose and twist of a rigid body (world frame, scalar-first quaternion)."""

    position: NDArray[np.float64]
    orientation: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: quaternions.IDENTITY.copy()
    )
    velocity: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    angular_velocity: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        for name in ("position", "orientation", "velocity", "angular_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        checksum = (
            self.position.sum()
            + self.orientation.sum()
            + self.velocity.sum()
            + self.angular_velocity.sum()
        )
        if not np.isfinite(checksum):
            raise ValueError("state components must be finite")
        norm = np.linalg.norm(self.orientation)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"orientation quaternion norm {norm!r} is not 1")

    @property
    def rotation_matrix(self) -> NDArray[np.float64]:
        return quaternions.to_matrix(self.orientation)


@dataclass(frozen=True)
class BodyProperties:
    """Inertial, geometric, and magnetic description of a body.

    `magnetic` is None for passive objects (beads, bubbles).
    """

    shape: ParticleShape
    mass_matrix: NDArray[np.float64]  # 6x6, body frame
    density: float
    magnetic: MagneticCluster | None = None

    def __post_init__(self) -> None:
        M = np.asarray(self.mass_matrix, dtype=np.float64)
        object.__setattr__(self, "mass_matrix", M)
        if M.shape != (6, 6):
            raise ValueError("mass matrix must be 6x6")
        if np.linalg.norm(M - M.T) > 1e-12 * np.linalg.norm(M) or np.any(
            np.linalg.eigvalsh(M) <= 0.0
        ):
            raise ValueError("mass matrix must be symmetric positive definite")
        if self.density <= 0.0:
            raise ValueError("density must be positive")

    @classmethod
    def from_shape(
        cls,
        shape: ParticleShape,
        density: float,
        magnetic: MagneticCluster | None = None,
    ) -> "BodyProperties":
        """Uniform-density mass matrix for a sphere or prolate spheroid."""
        mass = density * shape.volume
        if isinstance(shape, Sphere):
            inertia = np.full(3, 0.4 * mass * shape.radius**2)
        else:
            assert isinstance(shape, ProlateSpheroid)
            a, b = shape.semi_major, shape.semi_minor
            transverse = 0.2 * mass * (a * a + b * b)
            inertia = np.array([transverse, transverse, 0.4 * mass * b * b])
        M = np.zeros((6, 6))
        M[:3, :3] = mass * np.eye(3)
        M[3:, 3:] = np.diag(inertia)
        return cls(shape=shape, mass_matrix=M, density=density, magnetic=magnetic)


@dataclass(frozen=True)
class ContactParams:
    """Exponential repulsion with short-range, speed-gated adhesion.

    Repulsion k_r * exp(-gap/decay_length) acts at all gaps; a constant
    adhesive pull acts while 0 < gap < adhesion_range unless the surfaces
    separate faster than `breakaway_speed` (the fast-retract release).
    """

    stiffness: float  # N, repulsion at zero gap
    decay_length: float  # m
    adhesion_force: float  # N
    adhesion_range: float  # m
    breakaway_speed: float  # m/s

    def __post_init__(self) -> None:
        for name in ("stiffness", "decay_length", "adhesion_force", "adhesion_range", "breakaway_speed"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Neighbor:
    """Another body the slave can touch and couple to through the fluid.

    `stokeslet_force` is the point force this body currently exerts on the
    fluid (its non-drag force total in quasi-statics); it drives the
    far-field flow the slave feels.
    """

    position: NDArray[np.float64]
    velocity: NDArray[np.float64]
    shape: ParticleShape
    stokeslet_force: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    adhesion_armed: bool = True


@dataclass(frozen=True)
class SlaveEnvironment:
    """Snapshot of everything external acting on the slave for one step."""

    fluid: FluidMedium
    field: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    field_gradient: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros((3, 3)))
    neighbors: tuple[Neighbor, ...] = ()
    contact: ContactParams | None = None
    gravity: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: STANDARD_GRAVITY.copy()
    )


@dataclass(frozen=True)
class ForceBreakdown:
    """Generalized (6-vector) force terms, individually retrievable."""

    drag: NDArray[np.float64]
    actuation: NDArray[np.float64]
    contact: NDArray[np.float64]
    gravity: NDArray[np.float64]

    @property
    def total(self) -> NDArray[np.float64]:
        return self.drag + self.actuation + self.contact + self.gravity

    @property
    def non_drag(self) -> NDArray[np.float64]:
        return self.actuation + self.contact + self.gravity


def contact_force(
    gap: float, normal_velocity: float, params: ContactParams, adhesion_armed: bool = True
) -> float:
    """Scalar normal contact force; positive pushes the surfaces apart.

    Args:
        gap: Surface separation (m); negative means overlap.
        normal_velocity: Separation speed (m/s); positive while separating.
        adhesion_armed: Hysteresis latch owned by the caller; adhesion only
            acts while armed.
    """
    force = params.stiffness * np.exp(-gap / params.decay_length)
    in_range = 0.0 < gap < params.adhesion_range
    released = normal_velocity > params.breakaway_speed
    if adhesion_armed and in_range and not released:
        force -= params.adhesion_force
    return float(force)


def gravity_buoyancy(
    body: BodyProperties,
    fluid: FluidMedium,
    g: NDArray[np.float64] = STANDARD_GRAVITY,
) -> NDArray[np.float64]:
    """Net weight minus buoyancy, (rho_body - rho_fluid) V g."""
    return (body.density - fluid.density) * body.shape.volume * np.asarray(g, float)


def ambient_velocity_at(
    p: NDArray[np.float64], env: SlaveEnvironment
) -> NDArray[np.float64]:
    """Background flow plus the neighbors' Stokeslet far fields at `p`."""
    u = np.array(env.fluid.ambient_flow(p), dtype=np.float64)
    for neighbor in env.neighbors:
        if neighbor.stokeslet_force.any():
            u += stokeslet_velocity(p, neighbor.position, neighbor.stokeslet_force, env.fluid)
    return u


def _assemble_forces(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    tensor: "ResistanceTensor",
    u_flow: NDArray[np.float64],
) -> tuple[ForceBreakdown, NDArray[np.float64]]:
    """Force breakdown plus the implicit contact stiffness, sharing the
    neighbor geometry pass between the two."""
    drag = np.empty(6)
    drag[:3] = -(tensor.translational @ (state.velocity - u_flow))
    drag[3:] = -(tensor.rotational @ state.angular_velocity)

    actuation = np.zeros(6)
    if body.magnetic is not None:
        m = cluster_moment(body.magnetic, env.field)
        B = env.field
        actuation[:3] = env.field_gradient.T @ m
        actuation[3] = m[1] * B[2] - m[2] * B[1]
        actuation[4] = m[2] * B[0] - m[0] * B[2]
        actuation[5] = m[0] * B[1] - m[1] * B[0]

    contact = np.zeros(6)
    stiffness = np.zeros((3, 3))
    if env.contact is not None:
        params = env.contact
        for neighbor in env.neighbors:
            offset = state.position - neighbor.position
            distance = float(np.sqrt(offset @ offset))
            if distance == 0.0:
                raise ValueError("coincident bodies have no contact normal")
            normal = offset / distance
            gap = distance - body.shape.bounding_radius - neighbor.shape.bounding_radius
            separation_speed = float((state.velocity - neighbor.velocity) @ normal)
            magnitude = contact_force(
                gap, separation_speed, params, neighbor.adhesion_armed
            )
            contact[:3] += magnitude * normal
            repulsion = params.stiffness * np.exp(-gap / params.decay_length)
            stiffness += (repulsion / params.decay_length) * np.outer(normal, normal)

    gravity = np.zeros(6)
    gravity[:3] = gravity_buoyancy(body, env.fluid, env.gravity)
    return (
        ForceBreakdown(drag=drag, actuation=actuation, contact=contact, gravity=gravity),
        stiffness,
    )


def total_force(
    state: RigidBodyState, body: BodyProperties, env: SlaveEnvironment
) -> ForceBreakdown:
    """Assemble the four generalized force terms acting on the body."""
    tensor = _world_resistance(state, body, env)
    u_flow = ambient_velocity_at(state.position, env)
    breakdown, _ = _assemble_forces(state, body, env, tensor, u_flow)
    return breakdown


def _world_mass_matrix(body: BodyProperties, rotation: NDArray[np.float64]) -> NDArray[np.float64]:
    M = np.zeros((6, 6))
    M[:3, :3] = rotation @ body.mass_matrix[:3, :3] @ rotation.T
    M[3:, 3:] = rotation @ body.mass_matrix[3:, 3:] @ rotation.T
    return M


def _contact_stiffness(
    state: RigidBodyState, body: BodyProperties, env: SlaveEnvironment
) -> NDArray[np.float64]:
    """Local slope of the repulsive contact force, as a 3x3 stiffness.

    The exponential wall relaxes far faster than the loop step, so the
    integrator treats its first-order expansion implicitly; this matrix is
    sum_n (f_rep / decay_length) n_hat n_hat^T over the neighbors.  Only
    the (stabilizing) repulsion slope is included.
    """
    K = np.zeros((3, 3))
    if env.contact is None:
        return K
    for neighbor in env.neighbors:
        offset = state.position - neighbor.position
        distance = np.linalg.norm(offset)
        if distance == 0.0:
            continue
        normal = offset / distance
        gap = distance - body.shape.bounding_radius - neighbor.shape.bounding_radius
        repulsion = env.contact.stiffness * np.exp(-gap / env.contact.decay_length)
        K += (repulsion / env.contact.decay_length) * np.outer(normal, normal)
    return K


def _world_resistance(
    state: RigidBodyState, body: BodyProperties, env: SlaveEnvironment
) -> "ResistanceTensor":
    tensor = resistance_tensor(body.shape, env.fluid)
    if isinstance(body.shape, Sphere):
        return tensor  # isotropic: rotation is a no-op
    return tensor.rotated(state.rotation_matrix)


def advance(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    dt: float,
    mode: StepMode,
    forces: ForceBreakdown,
) -> RigidBodyState:
    """Integrate one step given a precomputed force breakdown.

    QuasiStatic solves the instantaneous balance R (v - u_flow) = F_nondrag
    for the twist; SecondOrder advances momentum with the drag implicit:
    (M + dt R) xi' = M xi + dt (F_nondrag + R u_flow_6).  In both modes the
    stiff repulsive contact slope enters the solve implicitly (see
    `_contact_stiffness`), positions update with the new velocity
    (semi-implicit Euler), and the quaternion is renormalized.
    """
    new_state, _ = advance_with_drag(state, body, env, dt, mode, forces)
    return new_state


def advance_with_drag(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    dt: float,
    mode: StepMode,
    forces: ForceBreakdown,
) -> tuple[RigidBodyState, NDArray[np.float64]]:
    """`advance`, also returning the drag at the post-step twist.

    The post-step drag is what balances the other force terms in
    quasi-statics; the force observer consumes it to recover the contact
    force exactly.
    """
    tensor = _world_resistance(state, body, env)
    stiffness = _contact_stiffness(state, body, env)
    u_flow = ambient_velocity_at(state.position, env)
    return _integrate(state, body, env, dt, mode, forces.non_drag, tensor, stiffness, u_flow)


# Contact substepping resolves the wall to this fraction of decay_length
_CONTACT_RESOLUTION: float = 0.25
_MAX_SUBSTEPS: int = 512


def step_body(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    dt: float,
    mode: StepMode,
    extra_force: NDArray[np.float64] | None = None,
) -> tuple[RigidBodyState, ForceBreakdown, NDArray[np.float64]]:
    """Assemble forces and integrate in one pass.

    Returns (new state, force breakdown at the step's start state, post-step
    drag).  `extra_force` injects an additional unmodeled 6-vector (the
    stability linearization's environment port), reported in the contact
    term.

    When contact is configured and the step would move the body further
    than a quarter decay length while inside the wall's reach, the step is
    subdivided (deterministically, from the trial displacement) and the
    forces re-evaluated each substep; an exponential wall thinner than the
    per-step travel cannot otherwise arrest the body.
    """
    tensor = _world_resistance(state, body, env)
    u_flow = ambient_velocity_at(state.position, env)
    breakdown, stiffness = _assemble_forces(state, body, env, tensor, u_flow)
    if extra_force is not None:
        breakdown = ForceBreakdown(
            drag=breakdown.drag,
            actuation=breakdown.actuation,
            contact=breakdown.contact + extra_force,
            gravity=breakdown.gravity,
        )
    new_state, drag = _integrate(
        state, body, env, dt, mode, breakdown.non_drag, tensor, stiffness, u_flow
    )
    if env.contact is None or not env.neighbors:
        return new_state, breakdown, drag

    displacement = float(np.linalg.norm(new_state.position - state.position))
    resolution = _CONTACT_RESOLUTION * env.contact.decay_length
    if displacement <= resolution or not _near_contact(state, body, env, displacement):
        return new_state, breakdown, drag

    n = min(int(np.ceil(displacement / resolution)), _MAX_SUBSTEPS)
    dt_sub = dt / n
    current = state
    drag = breakdown.drag
    for k in range(n):
        forces, stiffness = _assemble_forces(current, body, env, tensor, u_flow)
        if extra_force is not None:
            forces = ForceBreakdown(
                drag=forces.drag,
                actuation=forces.actuation,
                contact=forces.contact + extra_force,
                gravity=forces.gravity,
            )
        current, drag = _integrate(
            current, body, env, dt_sub, mode, forces.non_drag, tensor, stiffness, u_flow
        )
    return current, breakdown, drag


def _near_contact(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    reach: float,
) -> bool:
    """True when some neighbor's wall lies within this step's travel."""
    guard = 20.0 * env.contact.decay_length + reach
    for neighbor in env.neighbors:
        offset = state.position - neighbor.position
        gap = (
            float(np.sqrt(offset @ offset))
            - body.shape.bounding_radius
            - neighbor.shape.bounding_radius
        )
        if gap < guard:
            return True
    return False


def _integrate(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    dt: float,
    mode: StepMode,
    non_drag: NDArray[np.float64],
    tensor: "ResistanceTensor",
    stiffness: NDArray[np.float64],
    u_flow: NDArray[np.float64],
) -> tuple[RigidBodyState, NDArray[np.float64]]:
    if dt <= 0.0 or dt > 1e-2:
        raise ValueError("dt must lie in (0, 1e-2] s")

    if mode is StepMode.QUASI_STATIC:
        if not np.isfinite(non_drag.sum()):
            raise IntegrationDivergedError("non-finite force in quasi-static balance", state)
        if tensor.isotropic:
            r_t = tensor.translational[0, 0]
            rhs_t = non_drag[:3] + r_t * u_flow
            if stiffness[0, 0] == 0.0 and stiffness[1, 1] == 0.0 and stiffness[2, 2] == 0.0:
                velocity = rhs_t / r_t
            else:
                velocity = np.linalg.solve(
                    tensor.translational + dt * stiffness, rhs_t
                )
            omega = non_drag[3:] / tensor.rotational[0, 0]
        else:
            rhs_t = non_drag[:3] + tensor.translational @ u_flow
            velocity = np.linalg.solve(tensor.translational + dt * stiffness, rhs_t)
            omega = np.linalg.solve(tensor.rotational, non_drag[3:])
        drag = np.concatenate(
            [dt * (stiffness @ velocity) - non_drag[:3], -non_drag[3:]]
        )
    elif body.mass_matrix[:3, 3:].any():
        # Fully coupled mass matrix: solve the joint 6x6 momentum balance
        Q = state.rotation_matrix
        W = np.zeros((6, 6))
        W[:3, :3] = Q
        W[3:, 3:] = Q
        M = W @ body.mass_matrix @ W.T
        resistance = np.zeros((6, 6))
        resistance[:3, :3] = tensor.translational
        resistance[3:, 3:] = tensor.rotational
        stiffness6 = np.zeros((6, 6))
        stiffness6[:3, :3] = stiffness
        u6 = np.concatenate([u_flow, np.zeros(3)])
        twist_old = np.concatenate([state.velocity, state.angular_velocity])
        rhs = M @ twist_old + dt * (non_drag + resistance @ u6)
        twist = np.linalg.solve(M + dt * resistance + dt * dt * stiffness6, rhs)
        velocity, omega = twist[:3], twist[3:]
        drag = -resistance @ (twist - u6)
    else:
        M_t = state.rotation_matrix @ body.mass_matrix[:3, :3] @ state.rotation_matrix.T
        M_r = state.rotation_matrix @ body.mass_matrix[3:, 3:] @ state.rotation_matrix.T
        rhs_t = M_t @ state.velocity + dt * (non_drag[:3] + tensor.translational @ u_flow)
        velocity = np.linalg.solve(
            M_t + dt * tensor.translational + dt * dt * stiffness, rhs_t
        )
        rhs_r = M_r @ state.angular_velocity + dt * non_drag[3:]
        omega = np.linalg.solve(M_r + dt * tensor.rotational, rhs_r)
        drag = np.concatenate(
            [
                -tensor.translational @ (velocity - u_flow),
                -tensor.rotational @ omega,
            ]
        )

    position = state.position + dt * velocity
    if omega[0] == 0.0 and omega[1] == 0.0 and omega[2] == 0.0:
        orientation = state.orientation
    else:
        orientation = quaternions.integrate(state.orientation, omega, dt)

    if not np.isfinite(position.sum() + velocity.sum() + omega.sum()):
        raise IntegrationDivergedError(
            f"non-finite state after step (position {position})", state
        )
    return (
        RigidBodyState(
            position=position,
            orientation=orientation,
            velocity=velocity,
            angular_velocity=omega,
        ),
        drag,
    )


def drag_force_on(
    state: RigidBodyState, body: BodyProperties, env: SlaveEnvironment
) -> NDArray[np.float64]:
    """Generalized drag alone at the given state (cheaper than total_force)."""
    tensor = _world_resistance(state, body, env)
    u_flow = ambient_velocity_at(state.position, env)
    return np.concatenate(
        [
            -tensor.translational @ (state.velocity - u_flow),
            -tensor.rotational @ state.angular_velocity,
        ]
    )


def step_slave(
    state: RigidBodyState,
    body: BodyProperties,
    env: SlaveEnvironment,
    dt: float,
    mode: StepMode = StepMode.QUASI_STATIC,
) -> RigidBodyState:
    """Assemble forces from the env snapshot and integrate one step."""
    return advance(state, body, env, dt, mode, total_force(state, body, env))
