"""The three manipulation case studies as reproducible desk-scale runs.

Each scenario builds a `TeleopSession`, replaces the human with a scripted
operator (piecewise-linear waypoints in master coordinates), advances the
loop for the configured duration, and reduces the telemetry to metrics.
Runs are deterministic: the only stochastic channel is the optional
measurement noise, gated entirely by the config seed.

Timelines mirror the bead experiment narrative: the pusher touches the
bead near t = 7 s, reverses fast near t = 16 s to break the adhesive bond,
and leaves the bead parked at the reference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from numpy.typing import NDArray

from .control import ForceGains, ObserverState, PositionGains, ScalingMatrices
from .hydrodynamics import FluidMedium, ProlateSpheroid, Sphere
from .magnetics import CoilArray, MagneticCluster, Saturated
from .master import MasterState, PointMass
from .slave import BodyProperties, ContactParams, RigidBodyState
from .teleop import (
    FreeBody,
    OperatorCommand,
    SessionFaultedError,
    TelemetryFrame,
    TeleopSession,
)


class ScenarioKind(enum.Enum):
    BEAD_PUSH = "bead_push"
    CELL_PENETRATION = "cell_penetration"
    BUBBLE_MANIPULATION = "bubble_manipulation"


class SegmentMode(enum.Enum):
    APPROACH = "approach"
    HOLD = "hold"
    FAST_RETRACT = "fast_retract"


@dataclass(frozen=True)
class Waypoint:
    """Operator pose sample; `mode` describes the segment ending here."""

    t: float
    pose: NDArray[np.float64]
    mode: SegmentMode = SegmentMode.APPROACH

    def __post_init__(self) -> None:
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64))


@dataclass(frozen=True)
class OperatorScript:
    """Piecewise-linear operator trajectory in master-device meters."""

    waypoints: tuple[Waypoint, ...]

    def __post_init__(self) -> None:
        points = tuple(self.waypoints)
        if not points:
            raise ValueError("script needs at least one waypoint")
        if points[0].t != 0.0:
            raise ValueError("first waypoint must be at t = 0")
        times = [w.t for w in points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must strictly increase")
        object.__setattr__(self, "waypoints", points)

    @property
    def end_time(self) -> float:
        return self.waypoints[-1].t

    def retract_windows(self) -> list[tuple[float, float]]:
        """(start, end) times of every fast-retract segment."""
        spans = []
        for before, after in zip(self.waypoints, self.waypoints[1:]):
            if after.mode is SegmentMode.FAST_RETRACT:
                spans.append((before.t, after.t))
        return spans


def scripted_operator(script: OperatorScript, t: float) -> OperatorCommand:
    """Operator command at time `t`: linear interpolation of the waypoints.

    Beyond the last waypoint the pose holds with zero velocity.
    """
    if t < 0.0:
        raise ValueError("t must be >= 0")
    points = script.waypoints
    if t >= points[-1].t:
        return OperatorCommand(pose=points[-1].pose.copy(), velocity=np.zeros(3))
    after_index = next(i for i, w in enumerate(points) if w.t > t)
    if after_index == 0:
        return OperatorCommand(pose=points[0].pose.copy(), velocity=np.zeros(3))
    before, after = points[after_index - 1], points[after_index]
    span = after.t - before.t
    alpha = (t - before.t) / span
    pose = (1.0 - alpha) * before.pose + alpha * after.pose
    velocity = (after.pose - before.pose) / span
    return OperatorCommand(pose=pose, velocity=velocity)


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one case study bit for bit."""

    kind: ScenarioKind
    script: OperatorScript
    duration: float
    dt: float = 1e-3
    seed: int = 0
    fluid: FluidMedium = dataclass_field(default_factory=FluidMedium)
    coils: CoilArray = dataclass_field(default_factory=CoilArray.default_four_coil)
    scaling: ScalingMatrices = dataclass_field(default_factory=ScalingMatrices)
    contact: ContactParams | None = None
    slave_shape: Sphere | ProlateSpheroid = dataclass_field(
        default_factory=lambda: Sphere(25e-6)
    )
    slave_density: float = 1000.0
    slave_moment: float = 8e-8  # A*m^2 total saturated moment
    slave_start: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    bodies: tuple[FreeBody, ...] = ()
    position_gains: PositionGains | None = None
    force_gains: ForceGains | None = None
    observer_bandwidth: float = 50.0
    gravity_enabled: bool = True
    engulf_threshold: float | None = None
    engulf_hold_time: float = 5.0
    fixed_gradient_pull: float | None = None  # T/m; bypasses the position law
    measurement_noise_std: float = 0.0
    tracked_body: str | None = None  # free body whose error is scored
    target_position: NDArray[np.float64] | None = None
    settling_band: float = 1e-5  # m

    def __post_init__(self) -> None:
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        self.slave_start = np.asarray(self.slave_start, dtype=np.float64)
        if self.target_position is not None:
            self.target_position = np.asarray(self.target_position, dtype=np.float64)
        if self.tracked_body is not None and self.tracked_body != "slave":
            names = {fb.name for fb in self.bodies}
            if self.tracked_body not in names:
                raise ValueError(f"tracked body {self.tracked_body!r} is not defined")


@dataclass(frozen=True)
class Metrics:
    max_steady_state_error: float
    settling_time: float | None
    peak_contact_force: float
    engulfment_time: float | None
    release_success: bool


@dataclass(frozen=True)
class ScenarioRecord:
    """One frame plus the scenario-level signals scored by the metrics."""

    frame: TelemetryFrame
    tracking_error: float
    body_positions: dict[str, NDArray[np.float64]]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[ScenarioRecord]
    metrics: Metrics
    engulfment_time: float | None
    faulted: bool = False
    fault_message: str | None = None

    @property
    def frames(self) -> list[TelemetryFrame]:
        return [r.frame for r in self.records]


def build_session(cfg: ScenarioConfig) -> TeleopSession:
    """Assemble the teleop session a scenario runs on."""
    cluster = MagneticCluster(
        shape=cfg.slave_shape,
        volume=cfg.slave_shape.volume,
        magnetization=Saturated(cfg.slave_moment / cfg.slave_shape.volume),
    )
    slave_body = BodyProperties.from_shape(
        cfg.slave_shape, density=cfg.slave_density, magnetic=cluster
    )
    bodies = [
        FreeBody(
            name=fb.name,
            body=fb.body,
            state=fb.state,
            anchored=fb.anchored,
            tissue=fb.tissue,
        )
        for fb in cfg.bodies
    ]
    session = TeleopSession(
        master_model=PointMass(),
        master_state=MasterState(q=np.zeros(3), qd=np.zeros(3)),
        slave_body=slave_body,
        slave_state=RigidBodyState(position=cfg.slave_start.copy()),
        coils=cfg.coils,
        fluid=cfg.fluid,
        scaling=cfg.scaling,
        contact=cfg.contact,
        free_bodies=bodies,
        dt=cfg.dt,
        gravity=np.array([0.0, 0.0, -9.81]) if cfg.gravity_enabled else np.zeros(3),
        engulf_threshold=cfg.engulf_threshold,
        engulf_hold_time=cfg.engulf_hold_time,
        observer=ObserverState(bandwidth=cfg.observer_bandwidth),
    )
    if cfg.position_gains is not None:
        session.position_gains = cfg.position_gains
    if cfg.force_gains is not None:
        session.force_gains = cfg.force_gains
    # Start the slave where the master commands it: no initial transient
    session.reference_offset = cfg.slave_start - session.scaling.s2 * np.zeros(3)
    session.measurement_noise_std = cfg.measurement_noise_std
    session.rng = np.random.default_rng(cfg.seed)
    return session


def _tracking_error(cfg: ScenarioConfig, session: TeleopSession) -> float:
    if cfg.tracked_body is None or cfg.target_position is None:
        return 0.0
    if cfg.tracked_body == "slave":
        position = session.slave_state.position
    else:
        position = next(
            fb.state.position for fb in session.free_bodies if fb.name == cfg.tracked_body
        )
    offset = position - cfg.target_position
    return float(np.sqrt(offset @ offset))


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Advance the scripted session for the full duration and score it.

    Deterministic given the config (the seed fixes the noise channel).  A
    faulted session ends the run early; the partial telemetry and the
    fault message are preserved in the result.
    """
    session = build_session(cfg)
    steps = int(round(cfg.duration / cfg.dt))
    records: list[ScenarioRecord] = []
    faulted = False
    fault_message = None
    override = None
    if cfg.fixed_gradient_pull is not None:
        # Constant-gradient pulling: the commanded force is the saturated
        # moment times the drive gradient, aimed at the target.
        direction = cfg.target_position - cfg.slave_start
        direction = direction / np.linalg.norm(direction)
        override = cfg.slave_moment * cfg.fixed_gradient_pull * direction

    for k in range(steps):
        cmd = scripted_operator(cfg.script, k * cfg.dt)
        if override is not None:
            session.force_command_override = override
        try:
            frame = session.step(cmd)
        except SessionFaultedError as err:
            faulted = True
            fault_message = str(err)
            break
        records.append(
            ScenarioRecord(
                frame=frame,
                tracking_error=_tracking_error(cfg, session),
                body_positions={
                    fb.name: fb.state.position.copy() for fb in session.free_bodies
                },
            )
        )

    metrics = compute_metrics(records, cfg)
    return ScenarioResult(
        config=cfg,
        records=records,
        metrics=metrics,
        engulfment_time=session.engulf_time,
        faulted=faulted,
        fault_message=fault_message,
    )


def compute_metrics(records: list[ScenarioRecord], cfg: ScenarioConfig) -> Metrics:
    """Reduce a telemetry stream to the scenario scorecard.

    The steady-state window is the final 10% of the run; settling time is
    the first time the tracking error enters the band and never leaves;
    the engulfment time comes from the frame flags.
    """
    if not records:
        raise ValueError("empty telemetry")
    times = np.array([r.frame.t for r in records])
    errors = np.array([r.tracking_error for r in records])
    contacts = np.array([np.sqrt(r.frame.contact @ r.frame.contact) for r in records])

    window_start = times[-1] - 0.1 * cfg.duration
    window = times >= window_start
    max_steady_error = float(np.max(errors[window]))

    outside = errors > cfg.settling_band
    if not np.any(outside):
        settling = 0.0
    elif outside[-1]:
        settling = None
    else:
        settling = float(times[int(np.max(np.nonzero(outside)[0])) + 1])

    engulf_index = next(
        (i for i, r in enumerate(records) if r.frame.flags.engulfed), None
    )
    engulf_time = float(times[engulf_index]) if engulf_index is not None else None

    release_success = _release_success(records, cfg)
    return Metrics(
        max_steady_state_error=max_steady_error,
        settling_time=settling,
        peak_contact_force=float(np.max(contacts)),
        engulfment_time=engulf_time,
        release_success=release_success,
    )


def _release_success(records: list[ScenarioRecord], cfg: ScenarioConfig) -> bool:
    """True when adhesion stays cleared after the last fast retract."""
    windows = cfg.script.retract_windows()
    if not windows:
        return False
    last_end = windows[-1][1]
    grace = 5 * cfg.dt
    tail = [r for r in records if r.frame.t > last_end + grace]
    if not tail:
        return False
    return not any(r.frame.flags.adhesion_active for r in tail)


# ---------------------------------------------------------------------------
# Default case studies
# ---------------------------------------------------------------------------

DEFAULT_CONTACT = ContactParams(
    stiffness=1e-9,
    decay_length=0.5e-6,
    adhesion_force=5e-10,
    adhesion_range=2e-6,
    breakaway_speed=2e-4,
)

# Stiffer wall for tissue pressing: the repulsion at zero gap exceeds the
# tissue force limit, so the fail-safe cap, not the wall, bounds the press.
TISSUE_CONTACT = ContactParams(
    stiffness=1e-6,
    decay_length=0.5e-6,
    adhesion_force=1e-9,
    adhesion_range=2e-6,
    breakaway_speed=2e-4,
)


def bead_push_config(seed: int = 0, noise_std: float = 0.0) -> ScenarioConfig:
    """Non-magnetic bead positioned by contact and non-contact pushing.

    The pusher touches the bead just before t = 7 s, pushes it to the
    reference by t = 16 s, then reverses faster than the adhesion
    breakaway speed and parks clear of the bead.  The waypoint numbers
    absorb the Stokeslet interaction that drags the bead ahead of the
    pusher during approach and back during retract.
    """
    bead = FreeBody(
        name="bead",
        body=BodyProperties.from_shape(Sphere(50e-6), density=1000.0),
        state=RigidBodyState(position=np.array([150e-6, 0.0, 0.0])),
    )
    script = OperatorScript(
        waypoints=(
            Waypoint(0.0, np.zeros(3)),
            Waypoint(5.0, np.array([0.074, 0.0, 0.0])),
            Waypoint(7.0, np.array([0.112, 0.0, 0.0])),
            Waypoint(16.0, np.array([0.2125, 0.0, 0.0])),
            Waypoint(16.3, np.array([0.10, 0.0, 0.0]), SegmentMode.FAST_RETRACT),
            Waypoint(19.0, np.array([0.10, 0.0, 0.0]), SegmentMode.HOLD),
        )
    )
    return ScenarioConfig(
        kind=ScenarioKind.BEAD_PUSH,
        script=script,
        duration=19.0,
        seed=seed,
        measurement_noise_std=noise_std,
        contact=DEFAULT_CONTACT,
        slave_shape=Sphere(25e-6),
        bodies=(bead,),
        tracked_body="bead",
        target_position=np.array([250e-6, 0.0, 0.0]),
    )


def cell_penetration_config(seed: int = 0) -> ScenarioConfig:
    """Cluster wedged into a cell pair until uptake.

    The 10x4 um cluster (total moment 8e-8 A*m^2) is steered into the
    notch between two anchored cells; the commanded reference then dives
    past the tissue so the integral action winds the press force up to the
    fail-safe cap (4.02e-7 N, within 1% of the 0.4 uN anchor).  Sustained
    tissue force above 4.0e-7 N triggers the engulfment event near the
    20 s mark.
    """
    cell_body = BodyProperties.from_shape(Sphere(10e-6), density=1000.0)
    cells = tuple(
        FreeBody(
            name=f"cell{i}",
            body=cell_body,
            state=RigidBodyState(position=np.array([80e-6, y, 0.0])),
            anchored=True,
            tissue=True,
        )
        for i, y in ((0, 11e-6), (1, -11e-6))
    )
    script = OperatorScript(
        waypoints=(
            Waypoint(0.0, np.zeros(3)),
            Waypoint(12.0, np.array([0.064, 0.0, 0.0])),
            Waypoint(14.0, np.array([0.165, 0.0, 0.0])),
            Waypoint(34.0, np.array([0.165, 0.0, 0.0]), SegmentMode.HOLD),
        )
    )
    return ScenarioConfig(
        kind=ScenarioKind.CELL_PENETRATION,
        script=script,
        duration=34.0,
        seed=seed,
        contact=TISSUE_CONTACT,
        slave_shape=ProlateSpheroid(5e-6, 2e-6),
        bodies=cells,
        tracked_body="slave",
        target_position=np.array([68.9e-6, 0.0, 0.0]),
        position_gains=PositionGains(k_p=1.07e8, k_i=4.2e9, k_d=0.0),
        force_gains=ForceGains(f_max=4.02e-7),
        engulf_threshold=4.0e-7,
        engulf_hold_time=5.0,
    )


def bubble_manipulation_config(seed: int = 0) -> ScenarioConfig:
    """Gas bubble displaced purely through particle contact.

    The bubble is transparent to the field: only the magnetic pusher is
    actuated, and the bubble moves through contact (and the weak Stokeslet
    coupling).  The run is quasi-planar: the interface-trapped bubble is
    modeled with gravity off.
    """
    bubble = FreeBody(
        name="bubble",
        body=BodyProperties.from_shape(Sphere(40e-6), density=1.2),
        state=RigidBodyState(position=np.array([120e-6, 0.0, 0.0])),
    )
    script = OperatorScript(
        waypoints=(
            Waypoint(0.0, np.zeros(3)),
            Waypoint(3.0, np.array([0.055, 0.0, 0.0])),
            Waypoint(9.0, np.array([0.152, 0.0, 0.0])),
            Waypoint(9.3, np.array([0.05, 0.0, 0.0]), SegmentMode.FAST_RETRACT),
            Waypoint(12.0, np.array([0.05, 0.0, 0.0]), SegmentMode.HOLD),
        )
    )
    return ScenarioConfig(
        kind=ScenarioKind.BUBBLE_MANIPULATION,
        script=script,
        duration=12.0,
        seed=seed,
        contact=DEFAULT_CONTACT,
        slave_shape=Sphere(20e-6),
        bodies=(bubble,),
        tracked_body="bubble",
        target_position=np.array([180e-6, 0.0, 0.0]),
        position_gains=PositionGains(k_p=3e5, k_i=0.0, k_d=100.0),
        gravity_enabled=False,
    )


DEFAULT_CONFIGS = {
    ScenarioKind.BEAD_PUSH: bead_push_config,
    ScenarioKind.CELL_PENETRATION: cell_penetration_config,
    ScenarioKind.BUBBLE_MANIPULATION: bubble_manipulation_config,
}
