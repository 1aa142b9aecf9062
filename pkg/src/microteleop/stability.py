"""Absolute-stability analysis of the linearized bilateral loop.

The closed loop is reduced, per workspace axis, to a hybrid two-port

    [F_m]   [h11  h12] [v_m]
    [v_s] = [h21  h22] [F_e]

between the operator's hand (force F_m on the master, velocity v_m) and
the remote environment (force F_e on the slave, velocity v_s).  The port
matrices come from central-difference linearization of the session's
one-step map, so they include every controller, observer, and scaling
effect at the sampled rate.  Llewellyn's absolute-stability conditions on
that two-port guarantee bounded behavior for every passive operator and
environment:

    Re h11 >= 0,   Re h22 >= 0,
    2 Re(h11) Re(h22) - |h12 h21| - Re(h12 h21) >= 0   at every frequency.

The margin reported is the worst-case slack of the third condition.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .teleop import NotAnEquilibriumError, OperatorCommand, TeleopSession

_LINEARIZATION_STEP: float = 1e-8


@dataclass(frozen=True)
class HybridTwoPort:
    """Per-axis hybrid parameters sampled on a frequency grid (rad/s)."""

    frequencies: NDArray[np.float64]
    matrices: NDArray[np.complex128]  # (n_freq, 2, 2)

    def __post_init__(self) -> None:
        freq = np.asarray(self.frequencies, dtype=np.float64)
        mats = np.asarray(self.matrices, dtype=np.complex128)
        if freq.ndim != 1 or np.any(np.diff(freq) <= 0.0):
            raise ValueError("frequency grid must be strictly increasing")
        if mats.shape != (len(freq), 2, 2):
            raise ValueError("matrices must have shape (n_freq, 2, 2)")
        if not np.all(np.isfinite(mats.view(np.float64))):
            raise ValueError("hybrid matrices must be finite")
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def ideal_transformer(cls, frequencies: NDArray[np.float64]) -> "HybridTwoPort":
        """Lossless transparent loop: h11 = h22 = 0, h12 h21 = -1."""
        frequencies = np.asarray(frequencies, dtype=np.float64)
        H = np.zeros((len(frequencies), 2, 2), dtype=np.complex128)
        H[:, 0, 1] = -1.0
        H[:, 1, 0] = 1.0
        return cls(frequencies=frequencies, matrices=H)


@dataclass(frozen=True)
class LlewellynResult:
    stable: bool
    margin: float  # min over frequency of the third-condition slack
    min_re_h11: float
    min_re_h22: float


@dataclass(frozen=True)
class LoopLinearization:
    """Discrete-time small-signal model of the one-step session map.

    x' = A x + B w with w = (F_master[3], F_slave[3]); velocity outputs are
    read back through y = C x + D w.
    """

    A: NDArray[np.float64]
    B: NDArray[np.float64]
    C: NDArray[np.float64]
    D: NDArray[np.float64]
    dt: float


def _pack_state(session: TeleopSession) -> NDArray[np.float64]:
    parts = [
        session.master_state.q,
        session.master_state.qd,
        session.slave_state.position,
        session.slave_state.velocity,
        session.observer.f_predicted,
        session.force_gains.integral,
        session.position_gains.integral,
    ]
    return np.concatenate(parts).astype(np.float64)


def _unpack_state(session: TeleopSession, x: NDArray[np.float64]) -> None:
    from dataclasses import replace

    from .master import MasterState

    n = len(session.master_state.q)
    idx = 0

    def take(k: int) -> NDArray[np.float64]:
        nonlocal idx
        out = x[idx : idx + k].copy()
        idx += k
        return out

    q, qd = take(n), take(n)
    session.master_state = MasterState(q=q, qd=qd)
    position, velocity = take(3), take(3)
    session.slave_state = replace(
        session.slave_state, position=position, velocity=velocity
    )
    session.observer.f_predicted = take(3)
    session.observer.initialized = True
    session.force_gains.integral = take(3)
    session.position_gains.integral = take(3)


def _one_step(session: TeleopSession, x, w) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Map (state, ports) through one loop step; returns (x', velocities)."""
    snap = session.snapshot()
    _unpack_state(session, x)
    cmd = OperatorCommand(pose=None, direct_force=w[:3])
    frame = session.step(cmd, external_slave_force=w[3:])
    x_next = _pack_state(session)
    y = np.concatenate([frame.master_qd[:3], frame.slave_dd])
    session.restore(snap)
    return x_next, y


def linearize_loop(
    session: TeleopSession,
    step: float = _LINEARIZATION_STEP,
    equilibrium_tol: float = 1e-12,
) -> LoopLinearization:
    """Central-difference linearization of the one-step map at the current
    session state, which must be a force-balanced equilibrium."""
    x0 = _pack_state(session)
    w0 = np.zeros(6)
    x1, _ = _one_step(session, x0, w0)
    drift = np.linalg.norm(x1 - x0)
    if drift > equilibrium_tol * max(1.0, np.linalg.norm(x0)) + 1e-9:
        raise NotAnEquilibriumError(
            f"state drifts by {drift:.3e} in one step; linearize at equilibrium"
        )

    n, m = len(x0), 6
    A = np.zeros((n, n))
    C = np.zeros((6, n))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = step
        x_plus, y_plus = _one_step(session, x0 + dx, w0)
        x_minus, y_minus = _one_step(session, x0 - dx, w0)
        A[:, i] = (x_plus - x_minus) / (2.0 * step)
        C[:, i] = (y_plus - y_minus) / (2.0 * step)
    B = np.zeros((n, m))
    D = np.zeros((6, m))
    for j in range(m):
        dw = np.zeros(m)
        dw[j] = step
        x_plus, y_plus = _one_step(session, x0, w0 + dw)
        x_minus, y_minus = _one_step(session, x0, w0 - dw)
        B[:, j] = (x_plus - x_minus) / (2.0 * step)
        D[:, j] = (y_plus - y_minus) / (2.0 * step)
    # y was measured after the step: y = C_x x' + D_w w = C_x(Ax + Bw) + ...,
    # i.e. the returned C, D already absorb the one-step advance.
    return LoopLinearization(A=A, B=B, C=C, D=D, dt=session.dt)


def linearize_two_port(
    session: TeleopSession,
    freq_grid: NDArray[np.float64],
    axes: tuple[int, ...] = (0, 1),
    step: float = _LINEARIZATION_STEP,
) -> dict[int, HybridTwoPort]:
    """Hybrid two-port of the loop per workspace axis.

    The admittance transfer (v_m, v_s) = Y(z) (F_m, F_e) is evaluated on
    the grid from the linearized state-space model at z = exp(j w dt),
    then converted to hybrid form per axis.
    """
    freq_grid = np.asarray(freq_grid, dtype=np.float64)
    if np.any(freq_grid * session.dt >= np.pi):
        raise ValueError("frequency grid exceeds the Nyquist rate of the loop")
    lin = linearize_loop(session, step=step)
    n = lin.A.shape[0]
    ports: dict[int, HybridTwoPort] = {}
    identity = np.eye(n)
    for axis in axes:
        matrices = np.empty((len(freq_grid), 2, 2), dtype=np.complex128)
        in_idx = [axis, 3 + axis]  # (F_master, F_slave) for this axis
        out_idx = [axis, 3 + axis]  # (v_master, v_slave)
        B = lin.B[:, in_idx]
        C = lin.C[out_idx, :]
        D = lin.D[np.ix_(out_idx, in_idx)]
        for k, omega in enumerate(freq_grid):
            z = np.exp(1j * omega * lin.dt)
            Y = C @ np.linalg.solve(z * identity - lin.A, B) + D
            matrices[k] = _admittance_to_hybrid(Y)
        ports[axis] = HybridTwoPort(frequencies=freq_grid, matrices=matrices)
    return ports


def _admittance_to_hybrid(Y: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Convert [v_m; v_s] = Y [F_m; F_e] to [F_m; v_s] = H [v_m; F_e]."""
    y11, y12, y21, y22 = Y[0, 0], Y[0, 1], Y[1, 0], Y[1, 1]
    if y11 == 0.0:
        raise ZeroDivisionError("master port admittance is singular")
    h11 = 1.0 / y11
    h12 = -y12 / y11
    h21 = y21 / y11
    h22 = y22 - y12 * y21 / y11
    return np.array([[h11, h12], [h21, h22]])


def llewellyn_margin(port: HybridTwoPort) -> LlewellynResult:
    """Evaluate Llewellyn's absolute-stability conditions over the grid."""
    H = port.matrices
    re_h11 = H[:, 0, 0].real
    re_h22 = H[:, 1, 1].real
    cross = H[:, 0, 1] * H[:, 1, 0]
    slack = 2.0 * re_h11 * re_h22 - np.abs(cross) - cross.real
    margin = float(np.min(slack))
    stable = bool(
        np.all(re_h11 >= 0.0) and np.all(re_h22 >= 0.0) and margin >= 0.0
    )
    return LlewellynResult(
        stable=stable,
        margin=margin,
        min_re_h11=float(np.min(re_h11)),
        min_re_h22=float(np.min(re_h22)),
    )
