"""Force observation, force/position control laws, scaling, and the fail-safe.

The force observer recovers the unmeasured contact force from model
residuals: in quasi-static mode the Stokes balance makes the residual
exact and a first-order filter only smooths it; in second-order mode a
momentum observer integrates the known forces and attributes the momentum
error to contact.  The two control laws are the master-side PI force law
(with velocity damping) and the computed-inertia PID position law that
drives the slave reference through the actuation map.  `saturate_force`
is the tissue-protection fail-safe: a direction-preserving clamp whose
flag also freezes the control integrals (anti-windup).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from numpy.typing import NDArray

from .master import MasterTerms
from .slave import BodyProperties, ForceBreakdown, RigidBodyState, StepMode


class ObserverConfigError(ValueError):
    """Raised when the discrete observer update would be unstable."""


def _as_gain_matrix(value: float | NDArray[np.float64], n: int) -> NDArray[np.float64]:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr * np.eye(n)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError(f"gain must be scalar, length-{n} diagonal, or {n}x{n}")
    if np.any(arr < 0.0):
        raise ValueError("gains must be entrywise >= 0")
    return arr


@dataclass(frozen=True)
class ScalingMatrices:
    """Diagonal force (S1, master <- slave) and motion (S2, slave <- master)
    scales.  Defaults: forces up by six orders of magnitude, motion down by
    three (mm of master travel to um of slave travel)."""

    s1: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.full(3, 1e6))
    s2: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.full(3, 1e-3))

    def __post_init__(self) -> None:
        for name in ("s1", "s2"):
            diag = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if np.any(diag <= 0.0):
                raise ValueError(f"{name} diagonal must be positive")
            object.__setattr__(self, name, diag)

    @property
    def S1(self) -> NDArray[np.float64]:
        return np.diag(self.s1)

    @property
    def S2(self) -> NDArray[np.float64]:
        return np.diag(self.s2)


@dataclass
class ForceGains:
    """PI force-law gains and state.

    `f_d` is the desired (safe) interaction force, `f_max` the tissue force
    limit used by the fail-safe.  `integral` and `previous_error` belong to
    the trapezoidal integrator and reset at session start.
    """

    n: int = 3
    k_p: NDArray[np.float64] | float = 0.5
    k_i: NDArray[np.float64] | float = 0.0
    k_damp: NDArray[np.float64] | float = 2e-6
    f_d: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    f_max: float = 1e-5
    integral: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    previous_error: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        self.k_p = _as_gain_matrix(self.k_p, self.n)
        self.k_i = _as_gain_matrix(self.k_i, self.n)
        self.k_damp = _as_gain_matrix(self.k_damp, self.n)
        self.f_d = np.asarray(self.f_d, dtype=np.float64)
        self.integral = np.asarray(self.integral, dtype=np.float64)
        if self.f_max <= 0.0:
            raise ValueError("f_max must be positive")

    def reset(self) -> None:
        self.integral = np.zeros(self.n)
        self.previous_error = None


@dataclass
class PositionGains:
    """PID position-law gains and trapezoidal integral state."""

    n: int = 3
    k_p: NDArray[np.float64] | float = 0.0
    k_i: NDArray[np.float64] | float = 0.0
    k_d: NDArray[np.float64] | float = 0.0
    integral: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    previous_error: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        self.k_p = _as_gain_matrix(self.k_p, self.n)
        self.k_i = _as_gain_matrix(self.k_i, self.n)
        self.k_d = _as_gain_matrix(self.k_d, self.n)
        self.integral = np.asarray(self.integral, dtype=np.float64)

    def reset(self) -> None:
        self.integral = np.zeros(self.n)
        self.previous_error = None


@dataclass
class ObserverState:
    """First-order interaction-force observer.

    The filtered estimate follows the residual with pole `bandwidth`; the
    filter state initializes to its first residual sample so the estimate
    carries no fictitious startup transient.  In second-order mode
    `momentum` tracks the translational momentum integral.
    """

    bandwidth: float = 50.0
    f_predicted: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    momentum: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    initialized: bool = False

    def __post_init__(self) -> None:
        if self.bandwidth <= 0.0:
            raise ValueError("bandwidth must be positive")
        self.f_predicted = np.asarray(self.f_predicted, dtype=np.float64)
        self.momentum = np.asarray(self.momentum, dtype=np.float64)

    def reset(self) -> None:
        self.f_predicted = np.zeros(3)
        self.momentum = np.zeros(3)
        self.initialized = False


def observe_force(
    obs: ObserverState,
    body: BodyProperties,
    state: RigidBodyState,
    known_forces: ForceBreakdown,
    dt: float,
    mode: StepMode = StepMode.QUASI_STATIC,
) -> tuple[ObserverState, NDArray[np.float64]]:
    """Update the contact-force estimate from the known force terms.

    Quasi-static mode low-passes the force-balance residual
    -(F_drag + F_actuation + F_gravity), which the Stokes balance makes
    equal to the contact force; second-order mode runs a momentum observer
    whose correction term converges to the unmodeled (contact) force.
    Updates `obs` in place and returns it with the new estimate.
    """
    if dt <= 0.0:
        raise ObserverConfigError("dt must be positive")
    alpha = obs.bandwidth * dt
    if alpha >= 1.0:
        raise ObserverConfigError(
            f"bandwidth*dt = {alpha:.3f} >= 1 makes the discrete observer unstable"
        )

    if mode is StepMode.QUASI_STATIC:
        residual = -(known_forces.drag[:3] + known_forces.actuation[:3] + known_forces.gravity[:3])
        if not obs.initialized:
            obs.f_predicted = residual.copy()
            obs.initialized = True
        else:
            obs.f_predicted = obs.f_predicted + alpha * (residual - obs.f_predicted)
    else:
        mass = body.mass_matrix[:3, :3]
        momentum_true = mass @ state.velocity
        if not obs.initialized:
            obs.momentum = momentum_true.copy()
            obs.f_predicted = np.zeros(3)
            obs.initialized = True
        known = (
            known_forces.drag[:3] + known_forces.actuation[:3] + known_forces.gravity[:3]
        )
        obs.f_predicted = obs.bandwidth * (momentum_true - obs.momentum)
        obs.momentum = obs.momentum + dt * (known + obs.f_predicted)
    return obs, obs.f_predicted.copy()


def force_control_law(
    terms: MasterTerms,
    gains: ForceGains,
    f_predicted: NDArray[np.float64],
    qd: NDArray[np.float64],
    S1: NDArray[np.float64],
    dt: float,
    freeze_integral: bool = False,
) -> NDArray[np.float64]:
    """Master-side PI force law with velocity damping.

    u = g(q) + S1 J^T (f_d + k_p f_e + k_i int f_e dt - k_damp qd) with
    f_e = f_d - f_predicted and a trapezoidal integral.  The integral is
    frozen while the fail-safe saturation flag is set (anti-windup).
    """
    f_e = gains.f_d - np.asarray(f_predicted, dtype=np.float64)
    if not freeze_integral:
        previous = gains.previous_error if gains.previous_error is not None else f_e
        gains.integral = gains.integral + 0.5 * dt * (previous + f_e)
    gains.previous_error = f_e.copy()
    inner = gains.f_d + gains.k_p @ f_e + gains.k_i @ gains.integral - gains.k_damp @ qd
    return terms.g + S1 @ (terms.J.T @ inner)


def position_control_law(
    M_model: NDArray[np.float64],
    h_model: NDArray[np.float64],
    d_desired: NDArray[np.float64],
    dd_desired: NDArray[np.float64],
    ddd_desired: NDArray[np.float64],
    d_predicted: NDArray[np.float64],
    dd_predicted: NDArray[np.float64],
    gains: PositionGains,
    dt: float,
    freeze_integral: bool = False,
) -> NDArray[np.float64]:
    """Computed-inertia PID tracking law.

    u = M (ddd_desired + k_p d_e + k_i int d_e dt + k_d dd_e) + h with
    d_e = d_desired - d_predicted (the measurement channel supplies
    d_predicted: perfect, noisy, or delayed per scenario) and dd_e the
    velocity error.  Trapezoidal integral, frozen under saturation.
    """
    M_model = np.asarray(M_model, dtype=np.float64)
    d_e = np.asarray(d_desired, float) - np.asarray(d_predicted, float)
    dd_e = np.asarray(dd_desired, float) - np.asarray(dd_predicted, float)
    if not freeze_integral:
        previous = gains.previous_error if gains.previous_error is not None else d_e
        gains.integral = gains.integral + 0.5 * dt * (previous + d_e)
    gains.previous_error = d_e.copy()
    command = (
        np.asarray(ddd_desired, float)
        + gains.k_p @ d_e
        + gains.k_i @ gains.integral
        + gains.k_d @ dd_e
    )
    return M_model @ command + np.asarray(h_model, dtype=np.float64)


def apply_scaling(
    S: ScalingMatrices,
    slave_force: NDArray[np.float64],
    master_motion: tuple[NDArray[np.float64], NDArray[np.float64]],
) -> tuple[NDArray[np.float64], tuple[NDArray[np.float64], NDArray[np.float64]]]:
    """Scale slave force up to the operator and master motion down to the
    slave: master_force = S1 f, slave_reference = (S2 pos, S2 vel)."""
    pos, vel = master_motion
    master_force = S.s1 * np.asarray(slave_force, dtype=np.float64)
    reference = (S.s2 * np.asarray(pos, float), S.s2 * np.asarray(vel, float))
    return master_force, reference


def saturate_force(
    f: NDArray[np.float64], f_max: float
) -> tuple[NDArray[np.float64], bool]:
    """Direction-preserving clamp of the commanded force to `f_max`.

    Returns the (possibly clamped) force and a flag that is True when the
    clamp engaged; the flag drives the anti-windup freeze upstream.
    """
    if f_max <= 0.0:
        raise ValueError("f_max must be positive")
    f = np.asarray(f, dtype=np.float64)
    norm = np.linalg.norm(f)
    if norm <= f_max:
        return f.copy(), False
    return f * (f_max / norm), True
