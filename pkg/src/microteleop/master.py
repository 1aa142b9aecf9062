"""Master-side (haptic / positioning system) generalized dynamics.

Two concrete device models share one equation of motion,

    D(q) qdd + (C(q, qd) + P + T) qd + K q + g(q) = u + S1 J(q)^T F,

where P is electromechanical friction, T the transducer coupling, K a
centering stiffness, and the reflected task force F enters through the
Jacobian transpose scaled by S1.  `PointMass` is the default impedance-type
teleop master; `TwoLink` is a planar arm that exercises the full structure
(configuration-dependent inertia, Christoffel matrix, gravity, Jacobian).

The integrator is semi-implicit Euler with the velocity-coupling terms
(C + P + T) handled implicitly, which keeps the unforced device dissipative
step by step at haptic rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

GRAVITY_ACCEL: float = 9.81

# Central-difference step for Christoffel symbols from D(q)
_CHRISTOFFEL_STEP: float = 1e-6


@dataclass(frozen=True)
class PointMass:
    """Impedance-type device: decoupled axes with constant inertia.

    All vectors are per-axis diagonals of length n (default 3).
    """

    inertia: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.full(3, 0.1)
    )
    friction: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.full(3, 0.5)
    )
    stiffness: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(3))
    transducer: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.full(3, 0.2)
    )

    def __post_init__(self) -> None:
        for name in ("inertia", "friction", "stiffness", "transducer"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.inertia <= 0.0):
            raise ValueError("inertia must be positive")
        for name in ("friction", "stiffness", "transducer"):
            if np.any(getattr(self, name) < 0.0):
                raise ValueError(f"{name} must be entrywise >= 0")

    @property
    def dof(self) -> int:
        return len(self.inertia)


@dataclass(frozen=True)
class TwoLink:
    """Planar two-revolute-joint arm with center of mass at link midpoints."""

    link_lengths: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([0.3, 0.25])
    )
    link_masses: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([1.2, 0.8])
    )
    link_inertias: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([0.012, 0.006])
    )
    friction: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([0.4, 0.3])
    )
    stiffness: NDArray[np.float64] = dataclass_field(default_factory=lambda: np.zeros(2))
    transducer: NDArray[np.float64] = dataclass_field(
        default_factory=lambda: np.array([0.15, 0.1])
    )
    gravity_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("link_lengths", "link_masses", "link_inertias", "friction", "stiffness", "transducer"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.link_lengths <= 0.0) or np.any(self.link_masses <= 0.0):
            raise ValueError("link lengths and masses must be positive")
        if np.any(self.link_inertias <= 0.0):
            raise ValueError("link inertias must be positive")

    @property
    def dof(self) -> int:
        return 2

    def inertia_matrix(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        l1, l2 = self.link_lengths
        m1, m2 = self.link_masses
        i1, i2 = self.link_inertias
        lc1, lc2 = 0.5 * l1, 0.5 * l2
        c2 = np.cos(q[1])
        d11 = m1 * lc1**2 + i1 + i2 + m2 * (l1**2 + lc2**2 + 2.0 * l1 * lc2 * c2)
        d12 = i2 + m2 * (lc2**2 + l1 * lc2 * c2)
        d22 = i2 + m2 * lc2**2
        return np.array([[d11, d12], [d12, d22]])

    def coriolis_analytic(
        self, q: NDArray[np.float64], qd: NDArray[np.float64]
    ) -> NDArray[np.float64]:
        """Closed-form C(q, qd); cross-check for the finite-difference route."""
        l1, l2 = self.link_lengths
        m2 = self.link_masses[1]
        lc2 = 0.5 * l2
        h = -m2 * l1 * lc2 * np.sin(q[1])
        return np.array(
            [[h * qd[1], h * (qd[0] + qd[1])], [-h * qd[0], 0.0]]
        )

    def gravity_vector(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        if not self.gravity_enabled:
            return np.zeros(2)
        l1, l2 = self.link_lengths
        m1, m2 = self.link_masses
        lc1, lc2 = 0.5 * l1, 0.5 * l2
        g = GRAVITY_ACCEL
        c1 = np.cos(q[0])
        c12 = np.cos(q[0] + q[1])
        return np.array(
            [
                (m1 * lc1 + m2 * l1) * g * c1 + m2 * lc2 * g * c12,
                m2 * lc2 * g * c12,
            ]
        )

    def forward_kinematics(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        l1, l2 = self.link_lengths
        return np.array(
            [
                l1 * np.cos(q[0]) + l2 * np.cos(q[0] + q[1]),
                l1 * np.sin(q[0]) + l2 * np.sin(q[0] + q[1]),
            ]
        )

    def jacobian(self, q: NDArray[np.float64]) -> NDArray[np.float64]:
        l1, l2 = self.link_lengths
        s1, c1 = np.sin(q[0]), np.cos(q[0])
        s12, c12 = np.sin(q[0] + q[1]), np.cos(q[0] + q[1])
        return np.array(
            [
                [-l1 * s1 - l2 * s12, -l2 * s12],
                [l1 * c1 + l2 * c12, l2 * c12],
            ]
        )


MasterModel = PointMass | TwoLink


@dataclass(frozen=True)
class MasterState:
    """Generalized coordinates and velocities of the master device."""

    q: NDArray[np.float64]
    qd: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "qd", np.asarray(self.qd, dtype=np.float64))
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise ValueError("master state must be finite")


@dataclass(frozen=True)
class MasterTerms:
    """Assembled equation-of-motion terms at one state."""

    D: NDArray[np.float64]
    C: NDArray[np.float64]
    g: NDArray[np.float64]
    J: NDArray[np.float64]


def wrap_angles(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Wrap joint angles to (-pi, pi]."""
    wrapped = np.mod(-q + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def christoffel_matrix(
    D_of_q: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    q: NDArray[np.float64],
    qd: NDArray[np.float64],
    step: float = _CHRISTOFFEL_STEP,
) -> NDArray[np.float64]:
    """Velocity-coupling matrix from the first-kind Christoffel symbols.

    C_ij = sum_k 0.5 (dD_ij/dq_k + dD_ik/dq_j - dD_jk/dq_i) qd_k with the
    partials taken by central differences of the supplied inertia function.
    """
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    n = len(q)
    if not np.any(qd):
        return np.zeros((n, n))
    dD = np.zeros((n, n, n))  # dD[k] = dD/dq_k
    for k in range(n):
        dq = np.zeros(n)
        dq[k] = step
        dD[k] = (D_of_q(q + dq) - D_of_q(q - dq)) / (2.0 * step)
    C = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            C[i, j] = 0.5 * np.dot(dD[:, i, j] + dD[j, i, :] - dD[i, j, :], qd)
    return C


def master_terms(
    model: MasterModel, q: NDArray[np.float64], qd: NDArray[np.float64]
) -> MasterTerms:
    """Closed-form D, g, J for the model; C from `christoffel_matrix`."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    if isinstance(model, PointMass):
        n = model.dof
        return MasterTerms(
            D=np.diag(model.inertia), C=np.zeros((n, n)), g=np.zeros(n), J=np.eye(n)
        )
    return MasterTerms(
        D=model.inertia_matrix(q),
        C=christoffel_matrix(model.inertia_matrix, q, qd),
        g=model.gravity_vector(q),
        J=model.jacobian(q),
    )


def mechanical_energy(model: MasterModel, state: MasterState) -> float:
    """Kinetic plus spring plus (TwoLink) gravitational potential energy."""
    terms = master_terms(model, state.q, state.qd)
    kinetic = 0.5 * state.qd @ terms.D @ state.qd
    spring = 0.5 * np.sum(_stiffness_of(model) * state.q**2)
    potential = 0.0
    if isinstance(model, TwoLink) and model.gravity_enabled:
        l1, l2 = model.link_lengths
        m1, m2 = model.link_masses
        h1 = 0.5 * l1 * np.sin(state.q[0])
        h2 = l1 * np.sin(state.q[0]) + 0.5 * l2 * np.sin(state.q[0] + state.q[1])
        potential = GRAVITY_ACCEL * (m1 * h1 + m2 * h2)
    return float(kinetic + spring + potential)


def _stiffness_of(model: MasterModel) -> NDArray[np.float64]:
    return model.stiffness


def step_master(
    model: MasterModel,
    state: MasterState,
    u: NDArray[np.float64],
    external_task_force: NDArray[np.float64] | None = None,
    force_scale: NDArray[np.float64] | None = None,
    dt: float = 1e-3,
) -> MasterState:
    """One semi-implicit Euler step of the master equation of motion.

    `external_task_force` is the reflected task-space force F; it enters as
    S1 J^T F with S1 = `force_scale` (identity if None).  The velocity
    update solves (D + dt (C+P+T)) qd' = D qd + dt (u + S1 J^T F - K q - g),
    then q' = q + dt qd' (TwoLink angles wrapped to (-pi, pi]).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=np.float64)

    if isinstance(model, PointMass):
        # Decoupled diagonal dynamics: solve axis by axis
        forcing = u - model.stiffness * state.q
        if external_task_force is not None:
            F = np.asarray(external_task_force, dtype=np.float64)
            forcing = forcing + (F if force_scale is None else np.asarray(force_scale) @ F)
        damping = model.friction + model.transducer
        qd_next = (model.inertia * state.qd + dt * forcing) / (model.inertia + dt * damping)
        q_next = state.q + dt * qd_next
    else:
        terms = master_terms(model, state.q, state.qd)
        forcing = u - _stiffness_of(model) * state.q - terms.g
        if external_task_force is not None:
            F = np.asarray(external_task_force, dtype=np.float64)
            scaled = F if force_scale is None else np.asarray(force_scale) @ F
            forcing = forcing + terms.J.T @ scaled
        coupling = terms.C + np.diag(model.friction + model.transducer)
        qd_next = np.linalg.solve(
            terms.D + dt * coupling, terms.D @ state.qd + dt * forcing
        )
        q_next = wrap_angles(state.q + dt * qd_next)

    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(qd_next))):
        raise RuntimeError(
            f"master integration diverged (q {q_next}, qd {qd_next})"
        )
    return MasterState(q=q_next, qd=qd_next)
