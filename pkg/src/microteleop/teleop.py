"""The bilateral loop: master, slave, controllers, and scaling composed.

One `TeleopSession.step` executes a full loop iteration in a fixed order:

1. the master integrates the operator's drive (a hand-impedance pull
   toward the commanded pose, or a direct force) together with the
   reflected, scaled contact-force estimate and the force-law output;
2. the master pose/velocity are scaled down into a slave reference;
3. the position law turns the reference error into a desired slave force;
4. the fail-safe clamps that force to the tissue limit;
5. the coil currents realizing the clamped force are solved, giving the
   field and gradient actually applied;
6. the slave (and any free bodies) advance one step;
7. the force observer updates the contact estimate for the next loop.

A session owns its state and is single-writer; stepping is deterministic,
so identical command sequences replay byte-identically.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from numpy.typing import NDArray

from .control import (
    ForceGains,
    ObserverState,
    PositionGains,
    ScalingMatrices,
    force_control_law,
    observe_force,
    position_control_law,
    saturate_force,
)
from .hydrodynamics import FluidMedium, resistance_tensor
from .magnetics import (
    CoilArray,
    CurrentVector,
    allocate_currents,
    cluster_moment,
    magnetic_wrench,
    unit_current_field_gradient,
)
from .master import (
    MasterModel,
    MasterState,
    PointMass,
    master_terms,
    mechanical_energy,
    step_master,
)
from .slave import (
    BodyProperties,
    ContactParams,
    ForceBreakdown,
    IntegrationDivergedError,
    Neighbor,
    RigidBodyState,
    SlaveEnvironment,
    StepMode,
    advance,
    contact_force,
    drag_force_on,
    step_body,
    total_force,
)

# Contact is flagged in telemetry once its magnitude exceeds this (N)
CONTACT_FLAG_FORCE: float = 1e-12


class SessionFaultedError(RuntimeError):
    """The session reached a non-finite state and stopped."""


class NotAnEquilibriumError(ValueError):
    """Linearization was requested away from a force-balanced state."""


@dataclass(frozen=True)
class OperatorCommand:
    """One operator input sample.

    `pose`/`velocity` drive the master through the hand-impedance model;
    a None pose applies no hand force (released handle).  `direct_force`
    adds straight onto the master input.  With `engage` False the slave
    reference holds at its last value.
    """

    pose: NDArray[np.float64] | None = None
    velocity: NDArray[np.float64] | None = None
    direct_force: NDArray[np.float64] | None = None
    engage: bool = True

    def __post_init__(self) -> None:
        for name in ("pose", "velocity", "direct_force"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if not np.all(np.isfinite(value)):
                    raise ValueError(f"operator {name} must be finite")
                object.__setattr__(self, name, value)


@dataclass(frozen=True)
class FrameFlags:
    saturation: bool = False
    contact: bool = False
    engulfed: bool = False
    adhesion_release: bool = False
    adhesion_active: bool = False
    coil_saturated: bool = False
    degenerate_actuation: bool = False
    faulted: bool = False

    _BITS = (
        "saturation",
        "contact",
        "engulfed",
        "adhesion_release",
        "adhesion_active",
        "coil_saturated",
        "degenerate_actuation",
        "faulted",
    )

    def to_bitmask(self) -> int:
        return sum(1 << k for k, name in enumerate(self._BITS) if getattr(self, name))

    @classmethod
    def from_bitmask(cls, mask: int) -> "FrameFlags":
        return cls(**{name: bool(mask >> k & 1) for k, name in enumerate(cls._BITS)})


@dataclass(frozen=True)
class TelemetryFrame:
    """Per-step record: states, estimates, commands, and events."""

    t: float
    master_q: NDArray[np.float64]
    master_qd: NDArray[np.float64]
    slave_d: NDArray[np.float64]
    slave_dd: NDArray[np.float64]
    f_predicted: NDArray[np.float64]
    master_force: NDArray[np.float64]  # F_u = S1 f_predicted
    commanded_force: NDArray[np.float64]  # post-fail-safe slave force command
    currents: NDArray[np.float64]
    drag: NDArray[np.float64]
    actuation: NDArray[np.float64]
    contact: NDArray[np.float64]
    gravity: NDArray[np.float64]
    flags: FrameFlags

    def __post_init__(self) -> None:
        checksum = (
            self.master_q.sum() + self.master_qd.sum() + self.slave_d.sum()
            + self.slave_dd.sum() + self.f_predicted.sum() + self.master_force.sum()
            + self.commanded_force.sum() + self.currents.sum() + self.drag.sum()
            + self.actuation.sum() + self.contact.sum() + self.gravity.sum()
        )
        if not np.isfinite(checksum):
            raise ValueError("telemetry frames must be finite")


@dataclass
class FreeBody:
    """A non-operator body in the workspace (bead, bubble, cell).

    `anchored` bodies (the cell) never move; `tissue` marks the engulfment
    target monitored by the penetration event logic.
    """

    name: str
    body: BodyProperties
    state: RigidBodyState
    anchored: bool = False
    tissue: bool = False
    adhesion_armed: bool = False
    stokeslet_force: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))


@dataclass
class TeleopSession:
    """Mutable bilateral-teleoperation session state."""

    master_model: MasterModel
    master_state: MasterState
    slave_body: BodyProperties
    slave_state: RigidBodyState
    coils: CoilArray
    fluid: FluidMedium
    scaling: ScalingMatrices = dataclass_field(default_factory=ScalingMatrices)
    force_gains: ForceGains = dataclass_field(default_factory=ForceGains)
    # Integral position action is left off by default: the overdamped slave
    # already settles to zero steady-state error, and a position integral
    # makes the slave port non-passive (Re h22 < 0 at low frequency), which
    # would forfeit absolute stability.
    position_gains: PositionGains = dataclass_field(
        default_factory=lambda: PositionGains(k_p=2e5, k_i=0.0, k_d=100.0)
    )
    observer: ObserverState = dataclass_field(default_factory=ObserverState)
    contact: ContactParams | None = None
    free_bodies: list[FreeBody] = dataclass_field(default_factory=list)
    dt: float = 1e-3
    mode: StepMode = StepMode.QUASI_STATIC
    gravity: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([0.0, 0.0, -9.81])
    )
    hand_stiffness: float = 300.0  # N/m, operator grip pulling toward the command
    hand_damping: float = 8.0  # N*s/m
    reference_offset: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    delay_steps: int = 0  # communication delay on the reference path
    engulf_threshold: float | None = None  # N; None disables the event
    engulf_hold_time: float = 2.0  # s of sustained force to trigger uptake
    solver_bias_field: float = 1e-3  # T
    measurement_noise_std: float = 0.0  # m, Gaussian noise on measured slave position
    rng: np.random.Generator | None = None  # drives the noise channel only

    def __post_init__(self) -> None:
        self.t = 0.0
        self.step_count = 0
        self.slave_stokeslet_force = np.zeros(3)
        self.last_saturated = False
        self.held_reference: NDArray[np.float64] | None = None
        self.reference_queue: deque[NDArray[np.float64]] = deque(maxlen=self.delay_steps + 1)
        self.engulf_timer = 0.0
        self.engulfed = False
        self.engulf_time: float | None = None
        self.faulted = False
        self.force_command_override: NDArray[np.float64] | None = None
        self.events: list[tuple[float, str]] = []
        self._arm_gap = None if self.contact is None else 0.5 * self.contact.adhesion_range
        self._static_terms = (
            master_terms(self.master_model, self.master_state.q, self.master_state.qd)
            if isinstance(self.master_model, PointMass)
            else None
        )

    # -- state bookkeeping ------------------------------------------------

    def snapshot(self) -> dict:
        """Deep copy of everything `step` mutates, for save/restore."""
        return {
            "master_state": self.master_state,
            "slave_state": self.slave_state,
            "bodies": [
                (fb.state, fb.adhesion_armed, fb.stokeslet_force.copy())
                for fb in self.free_bodies
            ],
            "slave_stokeslet": self.slave_stokeslet_force.copy(),
            "observer": (
                self.observer.f_predicted.copy(),
                self.observer.momentum.copy(),
                self.observer.initialized,
            ),
            "force_gains": (
                self.force_gains.integral.copy(),
                None if self.force_gains.previous_error is None
                else self.force_gains.previous_error.copy(),
            ),
            "position_gains": (
                self.position_gains.integral.copy(),
                None if self.position_gains.previous_error is None
                else self.position_gains.previous_error.copy(),
            ),
            "last_saturated": self.last_saturated,
            "held_reference": None if self.held_reference is None else self.held_reference.copy(),
            "reference_queue": [r.copy() for r in self.reference_queue],
            "engulf": (self.engulf_timer, self.engulfed, self.engulf_time),
            "clock": (self.t, self.step_count),
        }

    def restore(self, snap: dict) -> None:
        self.master_state = snap["master_state"]
        self.slave_state = snap["slave_state"]
        for fb, (state, armed, stokeslet) in zip(self.free_bodies, snap["bodies"]):
            fb.state = state
            fb.adhesion_armed = armed
            fb.stokeslet_force = stokeslet.copy()
        self.slave_stokeslet_force = snap["slave_stokeslet"].copy()
        f_pred, momentum, initialized = snap["observer"]
        self.observer.f_predicted = f_pred.copy()
        self.observer.momentum = momentum.copy()
        self.observer.initialized = initialized
        integral, prev = snap["force_gains"]
        self.force_gains.integral = integral.copy()
        self.force_gains.previous_error = None if prev is None else prev.copy()
        integral, prev = snap["position_gains"]
        self.position_gains.integral = integral.copy()
        self.position_gains.previous_error = None if prev is None else prev.copy()
        self.last_saturated = snap["last_saturated"]
        self.held_reference = (
            None if snap["held_reference"] is None else snap["held_reference"].copy()
        )
        self.reference_queue = deque(
            [r.copy() for r in snap["reference_queue"]], maxlen=self.delay_steps + 1
        )
        self.engulf_timer, self.engulfed, self.engulf_time = snap["engulf"]
        self.t, self.step_count = snap["clock"]

    # -- helpers -----------------------------------------------------------

    def master_task_position(self) -> NDArray[np.float64]:
        if isinstance(self.master_model, PointMass):
            return self.master_state.q.copy()
        task = self.master_model.forward_kinematics(self.master_state.q)
        return np.concatenate([task, [0.0]])

    def master_task_velocity(self) -> NDArray[np.float64]:
        if isinstance(self.master_model, PointMass):
            return self.master_state.qd.copy()
        task = self.master_model.jacobian(self.master_state.q) @ self.master_state.qd
        return np.concatenate([task, [0.0]])

    def _slave_environment(self, field_B, field_G) -> SlaveEnvironment:
        neighbors = tuple(
            Neighbor(
                position=fb.state.position,
                velocity=fb.state.velocity,
                shape=fb.body.shape,
                stokeslet_force=fb.stokeslet_force,
                adhesion_armed=fb.adhesion_armed,
            )
            for fb in self.free_bodies
        )
        return SlaveEnvironment(
            fluid=self.fluid,
            field=field_B,
            field_gradient=field_G,
            neighbors=neighbors,
            contact=self.contact,
            gravity=self.gravity,
        )

    def _body_environment(self, index: int) -> SlaveEnvironment:
        """Environment seen by free body `index`: the slave plus the others."""
        neighbors = [
            Neighbor(
                position=self.slave_state.position,
                velocity=self.slave_state.velocity,
                shape=self.slave_body.shape,
                stokeslet_force=self.slave_stokeslet_force,
                adhesion_armed=self.free_bodies[index].adhesion_armed,
            )
        ]
        for j, other in enumerate(self.free_bodies):
            if j != index:
                neighbors.append(
                    Neighbor(
                        position=other.state.position,
                        velocity=other.state.velocity,
                        shape=other.body.shape,
                        stokeslet_force=other.stokeslet_force,
                        adhesion_armed=False,
                    )
                )
        return SlaveEnvironment(
            fluid=self.fluid,
            neighbors=tuple(neighbors),
            contact=self.contact,
            gravity=self.gravity,
        )

    def _update_adhesion_latches(self) -> tuple[bool, bool]:
        """Advance the per-pair hysteresis latch; returns (active, released)."""
        if self.contact is None:
            return False, False
        any_active = False
        any_released = False
        for fb in self.free_bodies:
            offset = self.slave_state.position - fb.state.position
            distance = float(np.sqrt(offset @ offset))
            gap = (
                distance
                - self.slave_body.shape.bounding_radius
                - fb.body.shape.bounding_radius
            )
            normal = offset / distance
            separation_speed = float(
                (self.slave_state.velocity - fb.state.velocity) @ normal
            )
            if fb.adhesion_armed:
                if separation_speed > self.contact.breakaway_speed or gap > self.contact.adhesion_range:
                    fb.adhesion_armed = False
                    any_released = True
            elif gap <= self._arm_gap:
                fb.adhesion_armed = True
            if fb.adhesion_armed and 0.0 < gap < self.contact.adhesion_range:
                any_active = True
        return any_active, any_released

    # -- the loop ----------------------------------------------------------

    def step(
        self,
        cmd: OperatorCommand,
        external_slave_force: NDArray[np.float64] | None = None,
    ) -> TelemetryFrame:
        """One bilateral loop iteration; returns the telemetry frame.

        `external_slave_force` injects an unmodeled disturbance on the
        slave (the environment port used by the stability linearization).
        """
        if self.faulted:
            raise SessionFaultedError("session is faulted; create a new one")
        try:
            return self._step_inner(cmd, external_slave_force)
        except IntegrationDivergedError as err:
            self.faulted = True
            self.events.append((self.t, f"fault: {err}"))
            raise SessionFaultedError(str(err)) from err

    def _step_inner(
        self,
        cmd: OperatorCommand,
        external_slave_force: NDArray[np.float64] | None,
    ) -> TelemetryFrame:
        dt = self.dt
        terms = (
            self._static_terms
            if self._static_terms is not None
            else master_terms(self.master_model, self.master_state.q, self.master_state.qd)
        )
        task_dim = terms.J.shape[0]

        # (1) master: operator drive + force-law output + reflected force
        u = np.zeros(len(self.master_state.q))
        if cmd.pose is not None:
            pose_error = cmd.pose[:task_dim] - self.master_task_position()[:task_dim]
            vel_cmd = np.zeros(task_dim) if cmd.velocity is None else cmd.velocity[:task_dim]
            vel_error = vel_cmd - self.master_task_velocity()[:task_dim]
            hand = self.hand_stiffness * pose_error + self.hand_damping * vel_error
            u = u + terms.J.T @ hand
        if cmd.direct_force is not None:
            u = u + terms.J.T @ cmd.direct_force[:task_dim]
        f_pred_task = self.observer.f_predicted[:task_dim]
        u = u + force_control_law(
            terms,
            self.force_gains,
            self.observer.f_predicted[: self.force_gains.n],
            self.master_state.qd,
            self.scaling.S1[:task_dim, :task_dim],
            dt,
            freeze_integral=self.last_saturated,
        )
        self.master_state = step_master(
            self.master_model,
            self.master_state,
            u,
            f_pred_task,
            self.scaling.S1[:task_dim, :task_dim],
            dt,
        )

        # (2) master motion scaled down into the slave reference
        master_pos = self.master_task_position()
        master_vel = self.master_task_velocity()
        reference = self.scaling.s2 * master_pos + self.reference_offset
        reference_vel = self.scaling.s2 * master_vel
        if not cmd.engage:
            if self.held_reference is None:
                self.held_reference = (
                    self.reference_queue[-1].copy()
                    if self.reference_queue
                    else reference.copy()
                )
            reference = self.held_reference.copy()
            reference_vel = np.zeros(3)
        else:
            self.held_reference = None
        self.reference_queue.append(reference.copy())
        d_desired = self.reference_queue[0]
        dd_desired = reference_vel if cmd.engage else np.zeros(3)

        # (3) position law: reference error -> desired slave force
        tensor = resistance_tensor(self.slave_body.shape, self.fluid).rotated(
            self.slave_state.rotation_matrix
        )
        weight = (
            (self.slave_body.density - self.fluid.density)
            * self.slave_body.shape.volume
            * self.gravity
        )
        h_model = tensor.translational @ dd_desired - weight
        d_measured = self.slave_state.position
        if self.measurement_noise_std > 0.0 and self.rng is not None:
            d_measured = d_measured + self.rng.normal(
                0.0, self.measurement_noise_std, 3
            )
        position_integral_before = self.position_gains.integral.copy()
        if self.force_command_override is not None:
            desired_force = np.asarray(self.force_command_override, dtype=np.float64)
        else:
            desired_force = position_control_law(
                self.slave_body.mass_matrix[:3, :3],
                h_model,
                d_desired,
                dd_desired,
                np.zeros(3),
                d_measured,
                self.slave_state.velocity,
                self.position_gains,
                dt,
                freeze_integral=self.last_saturated,
            )

        # (4) fail-safe: clamp the force commanded against tissue
        commanded_force, saturated = saturate_force(desired_force, self.force_gains.f_max)
        if saturated:
            # anti-windup: the whole flagged step leaves the integral untouched
            self.position_gains.integral = position_integral_before
        self.last_saturated = saturated

        # (5) currents realizing the commanded force, then the actual field
        fields, gradients = unit_current_field_gradient(self.coils, self.slave_state.position)
        if self.slave_body.magnetic is not None:
            currents = allocate_currents(
                self.coils,
                fields,
                gradients,
                commanded_force,
                self.slave_body.magnetic,
                bias_field=self.solver_bias_field,
            )
        else:
            currents = CurrentVector(np.zeros(len(self.coils)))
        field_B = fields.T @ currents.currents
        field_G = np.einsum("k,kij->ij", currents.currents, gradients)

        # (6) advance the slave and every free body from one snapshot
        env = self._slave_environment(field_B, field_G)
        extra = None
        if external_slave_force is not None:
            extra = np.concatenate([np.asarray(external_slave_force, float), np.zeros(3)])
        body_updates: list[RigidBodyState] = []
        for index, fb in enumerate(self.free_bodies):
            if fb.anchored:
                body_updates.append(fb.state)
                continue
            fb_env = self._body_environment(index)
            fb_state, fb_forces, _ = step_body(fb.state, fb.body, fb_env, dt, self.mode)
            body_updates.append(fb_state)
            fb.stokeslet_force = fb_forces.non_drag[:3].copy()

        if self.engulfed:
            breakdown = total_force(self.slave_state, self.slave_body, env)
            new_slave = replace(
                self.slave_state, velocity=np.zeros(3), angular_velocity=np.zeros(3)
            )
            post_drag = drag_force_on(new_slave, self.slave_body, env)
        else:
            new_slave, breakdown, post_drag = step_body(
                self.slave_state, self.slave_body, env, dt, self.mode, extra
            )
        self.slave_stokeslet_force = breakdown.non_drag[:3].copy()
        self.slave_state = new_slave
        for fb, updated in zip(self.free_bodies, body_updates):
            fb.state = updated

        # (7) observer: drag re-evaluated at the solved velocity makes the
        # quasi-static residual equal the contact force exactly
        known = ForceBreakdown(
            drag=post_drag,
            actuation=breakdown.actuation,
            contact=np.zeros(6),
            gravity=breakdown.gravity,
        )
        _, f_predicted = observe_force(
            self.observer, self.slave_body, self.slave_state, known, dt, self.mode
        )

        adhesion_active, adhesion_released = self._update_adhesion_latches()
        contact_magnitude = float(np.linalg.norm(breakdown.contact[:3]))
        self._update_engulfment(self._tissue_contact_magnitude())

        self.step_count += 1
        self.t = self.step_count * dt

        flags = FrameFlags(
            saturation=saturated,
            contact=contact_magnitude >= CONTACT_FLAG_FORCE,
            engulfed=self.engulfed,
            adhesion_release=adhesion_released,
            adhesion_active=adhesion_active,
            coil_saturated=currents.saturated,
            degenerate_actuation=currents.degenerate,
            faulted=False,
        )
        return TelemetryFrame(
            t=self.t,
            master_q=self.master_state.q.copy(),
            master_qd=self.master_state.qd.copy(),
            slave_d=self.slave_state.position.copy(),
            slave_dd=self.slave_state.velocity.copy(),
            f_predicted=f_predicted,
            master_force=self.scaling.s1 * f_predicted,
            commanded_force=commanded_force,
            currents=currents.currents.copy(),
            drag=breakdown.drag[:3].copy(),
            actuation=breakdown.actuation[:3].copy(),
            contact=breakdown.contact[:3].copy(),
            gravity=breakdown.gravity[:3].copy(),
            flags=flags,
        )

    def _tissue_contact_magnitude(self) -> float:
        """Contact force the slave currently presses on tissue bodies with."""
        if self.contact is None:
            return 0.0
        magnitude = 0.0
        for fb in self.free_bodies:
            if not fb.tissue:
                continue
            offset = self.slave_state.position - fb.state.position
            distance = float(np.sqrt(offset @ offset))
            gap = (
                distance
                - self.slave_body.shape.bounding_radius
                - fb.body.shape.bounding_radius
            )
            normal = offset / distance
            separation_speed = float(
                (self.slave_state.velocity - fb.state.velocity) @ normal
            )
            magnitude += abs(
                contact_force(gap, separation_speed, self.contact, fb.adhesion_armed)
            )
        return magnitude

    def _update_engulfment(self, tissue_contact: float) -> None:
        if self.engulf_threshold is None or self.engulfed:
            return
        if tissue_contact >= self.engulf_threshold:
            self.engulf_timer += self.dt
            if self.engulf_timer >= self.engulf_hold_time:
                self.engulfed = True
                self.engulf_time = self.t + self.dt
                self.events.append((self.engulf_time, "engulfed"))
        else:
            self.engulf_timer = 0.0

    def master_energy(self) -> float:
        return mechanical_energy(self.master_model, self.master_state)
