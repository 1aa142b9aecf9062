"""Tests for slave force assembly and the fixed-step integrator."""

from __future__ import annotations

import numpy as np
import pytest

from microteleop.hydrodynamics import FluidMedium, ProlateSpheroid, Sphere, stokeslet_velocity
from microteleop.magnetics import MagneticCluster, Saturated
from microteleop.slave import (
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
    gravity_buoyancy,
    step_slave,
    total_force,
)

WATER = FluidMedium(viscosity=1e-3, density=1000.0)


def neutral_sphere(radius: float = 50e-6) -> BodyProperties:
    return BodyProperties.from_shape(Sphere(radius), density=1000.0)


def still_state(position=(0.0, 0.0, 0.0)) -> RigidBodyState:
    return RigidBodyState(position=np.asarray(position, dtype=float))


def constant_force_breakdown(force: np.ndarray) -> ForceBreakdown:
    zeros = np.zeros(6)
    applied = np.concatenate([force, np.zeros(3)])
    return ForceBreakdown(drag=zeros, actuation=applied, contact=zeros, gravity=zeros)


CONTACT = ContactParams(
    stiffness=1e-9,
    decay_length=0.2e-6,
    adhesion_force=5e-10,
    adhesion_range=2e-6,
    breakaway_speed=2e-4,
)


# ---------------------------------------------------------------------------
# Contact law
# ---------------------------------------------------------------------------


class TestContactForce:
    def test_far_out_of_range_vanishes(self) -> None:
        gap = 10.0 * CONTACT.adhesion_range
        f = contact_force(gap, 0.0, CONTACT)
        assert abs(f) <= CONTACT.stiffness * np.exp(-gap / CONTACT.decay_length) + 0.0
        assert f == pytest.approx(0.0, abs=1e-30)

    def test_zero_gap_gives_stiffness(self) -> None:
        assert contact_force(0.0, 0.0, CONTACT) == pytest.approx(CONTACT.stiffness, rel=1e-15)

    def test_fast_separation_drops_adhesion(self) -> None:
        gap = CONTACT.adhesion_range / 2.0
        repulsion_only = CONTACT.stiffness * np.exp(-gap / CONTACT.decay_length)
        fast = contact_force(gap, 2.0 * CONTACT.breakaway_speed, CONTACT)
        slow = contact_force(gap, 0.0, CONTACT)
        assert fast == pytest.approx(repulsion_only, rel=1e-15)
        assert slow == pytest.approx(repulsion_only - CONTACT.adhesion_force, rel=1e-12)

    def test_disarmed_latch_suppresses_adhesion(self) -> None:
        gap = CONTACT.adhesion_range / 2.0
        assert contact_force(gap, 0.0, CONTACT, adhesion_armed=False) == pytest.approx(
            CONTACT.stiffness * np.exp(-gap / CONTACT.decay_length), rel=1e-15
        )

    def test_repulsion_without_adhesion_is_conservative(self) -> None:
        """Work over a closed approach/retract cycle cancels exactly."""
        params = ContactParams(
            stiffness=1e-9,
            decay_length=0.2e-6,
            adhesion_force=1e-30,  # negligible: pure repulsion
            adhesion_range=1e-12,
            breakaway_speed=1.0,
        )
        gaps = np.linspace(5e-6, 0.1e-6, 200)
        work = 0.0
        for a, b in zip(gaps[:-1], gaps[1:]):
            f_mid = 0.5 * (contact_force(a, 0.0, params) + contact_force(b, 0.0, params))
            work += f_mid * (b - a)
        for a, b in zip(gaps[::-1][:-1], gaps[::-1][1:]):
            f_mid = 0.5 * (contact_force(a, 0.0, params) + contact_force(b, 0.0, params))
            work += f_mid * (b - a)
        assert work >= -1e-15
        assert abs(work) <= 1e-18


# ---------------------------------------------------------------------------
# Gravity / buoyancy
# ---------------------------------------------------------------------------


class TestGravityBuoyancy:
    def test_neutral_buoyancy(self) -> None:
        np.testing.assert_allclose(gravity_buoyancy(neutral_sphere(), WATER), np.zeros(3), atol=0.0)

    def test_bubble_rises(self) -> None:
        bubble = BodyProperties.from_shape(Sphere(50e-6), density=1.0)
        force = gravity_buoyancy(bubble, WATER)
        assert force[2] > 0.0

    def test_dense_sphere_value(self) -> None:
        body = BodyProperties.from_shape(Sphere(50e-6), density=2000.0)
        force = gravity_buoyancy(body, WATER)
        expected = 1000.0 * (4.0 / 3.0) * np.pi * (5e-5) ** 3 * 9.81
        assert np.linalg.norm(force) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(5.136e-9, rel=1e-3)


# ---------------------------------------------------------------------------
# Force assembly
# ---------------------------------------------------------------------------


class TestTotalForce:
    def test_quiescent_neutral_body_feels_nothing(self) -> None:
        env = SlaveEnvironment(fluid=WATER)
        forces = total_force(still_state(), neutral_sphere(), env)
        assert np.linalg.norm(forces.total) <= 1e-18

    def test_magnetic_pull_matches_cell_anchor(self) -> None:
        shape = ProlateSpheroid(5e-6, 2e-6)
        cluster = MagneticCluster(
            shape=shape, volume=shape.volume, magnetization=Saturated(8e-8 / shape.volume)
        )
        body = BodyProperties.from_shape(shape, density=1000.0, magnetic=cluster)
        env = SlaveEnvironment(
            fluid=WATER,
            field=np.array([1e-3, 0.0, 0.0]),
            field_gradient=np.diag([5.0, -2.5, -2.5]),
        )
        forces = total_force(still_state(), body, env)
        np.testing.assert_allclose(forces.actuation[:3], [4.0e-7, 0.0, 0.0], rtol=1e-12)
        np.testing.assert_allclose(forces.total, forces.actuation, rtol=1e-12)

    def test_bead_feels_stokeslet_drag_of_microrobot(self) -> None:
        """Two-body coupling composes the published hydrodynamics oracles."""
        robot_force = np.array([2e-9, 1e-9, 0.0])
        robot_position = np.array([-1e-4, 0.0, 0.0])
        bead = neutral_sphere(50e-6)
        env = SlaveEnvironment(
            fluid=WATER,
            neighbors=(
                Neighbor(
                    position=robot_position,
                    velocity=np.zeros(3),
                    shape=Sphere(25e-6),
                    stokeslet_force=robot_force,
                ),
            ),
        )
        forces = total_force(still_state(), bead, env)
        u = stokeslet_velocity(np.zeros(3), robot_position, robot_force, WATER)
        expected = 6.0 * np.pi * WATER.viscosity * 50e-6 * u
        np.testing.assert_allclose(forces.drag[:3], expected, rtol=1e-9)

    def test_contact_force_acts_along_center_line(self) -> None:
        bead_pos = np.array([90e-6, 0.0, 0.0])
        env = SlaveEnvironment(
            fluid=WATER,
            neighbors=(
                Neighbor(position=bead_pos, velocity=np.zeros(3), shape=Sphere(50e-6)),
            ),
            contact=CONTACT,
        )
        slave = neutral_sphere(25e-6)
        forces = total_force(still_state(), slave, env)
        gap = 90e-6 - 75e-6
        expected = contact_force(gap, 0.0, CONTACT)
        np.testing.assert_allclose(forces.contact[:3], [-expected, 0.0, 0.0], rtol=1e-12)


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------


class TestStep:
    def test_quiescent_quasi_static_fixed_point(self) -> None:
        env = SlaveEnvironment(fluid=WATER)
        state = still_state()
        stepped = step_slave(state, neutral_sphere(), env, 1e-3, StepMode.QUASI_STATIC)
        np.testing.assert_allclose(stepped.position, state.position, atol=0.0)
        np.testing.assert_allclose(stepped.velocity, np.zeros(3), atol=0.0)

    def test_quasi_static_terminal_velocity(self) -> None:
        """F / (6 pi mu R) = 1.0e-4 m/s for F = 9.4248e-11 N on a 50 um sphere."""
        body = neutral_sphere(50e-6)
        env = SlaveEnvironment(fluid=WATER)
        forces = constant_force_breakdown(np.array([9.4248e-11, 0.0, 0.0]))
        stepped = advance(still_state(), body, env, 1e-3, StepMode.QUASI_STATIC, forces)
        assert stepped.velocity[0] == pytest.approx(1.0e-4, rel=1e-3)

    def test_second_order_relaxes_to_quasi_static(self) -> None:
        """Momentum decay reaches the Stokes velocity after 10 m/(6 pi mu R)."""
        body = neutral_sphere(50e-6)
        env = SlaveEnvironment(fluid=WATER)
        force = np.array([9.4248e-11, 0.0, 0.0])
        forces = constant_force_breakdown(force)
        mass = body.mass_matrix[0, 0]
        tau = mass / (6.0 * np.pi * WATER.viscosity * 50e-6)
        dt = tau / 100.0
        steps = 1000  # 10 tau
        state = still_state()
        for _ in range(steps):
            state = advance(state, body, env, dt, StepMode.SECOND_ORDER, forces)
        quasi = advance(still_state(), body, env, dt, StepMode.QUASI_STATIC, forces)
        assert np.linalg.norm(state.velocity - quasi.velocity) <= 1e-3 * np.linalg.norm(
            quasi.velocity
        )

    def test_overdamped_consistency_randomized(self) -> None:
        rng = np.random.default_rng(41)
        env = SlaveEnvironment(fluid=WATER)
        for _ in range(10):
            radius = 10.0 ** rng.uniform(-5.5, -4.2)
            body = BodyProperties.from_shape(Sphere(radius), density=rng.uniform(800, 3000))
            force = rng.normal(size=3) * 1e-10
            forces = constant_force_breakdown(force)
            tau = body.mass_matrix[0, 0] / (6.0 * np.pi * WATER.viscosity * radius)
            dt = tau / 50.0
            state = still_state()
            for _ in range(1000):  # 20 tau
                state = advance(state, body, env, dt, StepMode.SECOND_ORDER, forces)
            quasi = advance(still_state(), body, env, dt, StepMode.QUASI_STATIC, forces)
            assert np.linalg.norm(state.velocity - quasi.velocity) <= 1e-3 * np.linalg.norm(
                quasi.velocity
            )

    def test_determinism_bit_identical(self) -> None:
        body = neutral_sphere(25e-6)
        env = SlaveEnvironment(
            fluid=WATER,
            field=np.array([1e-3, 0.0, 0.0]),
            field_gradient=np.diag([2.0, -1.0, -1.0]),
        )
        runs = []
        for _ in range(2):
            state = RigidBodyState(
                position=np.array([1e-4, -2e-4, 0.0]),
                velocity=np.array([1e-5, 0.0, 0.0]),
                angular_velocity=np.array([0.0, 0.2, 0.0]),
            )
            for _ in range(100):
                state = step_slave(state, body, env, 1e-3, StepMode.QUASI_STATIC)
            runs.append(state)
        assert np.array_equal(runs[0].position, runs[1].position)
        assert np.array_equal(runs[0].velocity, runs[1].velocity)
        assert np.array_equal(runs[0].orientation, runs[1].orientation)

    def test_drag_power_never_positive(self) -> None:
        rng = np.random.default_rng(43)
        for _ in range(50):
            state = RigidBodyState(
                position=rng.normal(size=3) * 1e-4,
                velocity=rng.normal(size=3) * 1e-3,
                angular_velocity=rng.normal(size=3),
            )
            forces = total_force(state, neutral_sphere(), SlaveEnvironment(fluid=WATER))
            twist = np.concatenate([state.velocity, state.angular_velocity])
            assert np.dot(forces.drag, twist) <= 0.0

    def test_quaternion_norm_over_many_steps(self) -> None:
        from microteleop import quaternions

        q = quaternions.IDENTITY.copy()
        omega = np.array([3.0, -2.0, 1.5])
        for _ in range(1_000_000):
            q = quaternions.integrate(q, omega, 1e-3)
        assert abs(np.linalg.norm(q) - 1.0) <= 1e-9

    def test_dt_bounds_enforced(self) -> None:
        env = SlaveEnvironment(fluid=WATER)
        with pytest.raises(ValueError, match="dt"):
            step_slave(still_state(), neutral_sphere(), env, 0.0)
        with pytest.raises(ValueError, match="dt"):
            step_slave(still_state(), neutral_sphere(), env, 0.02)

    def test_blowup_guard_raises_with_state(self) -> None:
        body = neutral_sphere()
        env = SlaveEnvironment(fluid=WATER)
        forces = constant_force_breakdown(np.array([np.inf, 0.0, 0.0]))
        with pytest.raises(IntegrationDivergedError) as excinfo:
            advance(still_state(), body, env, 1e-3, StepMode.QUASI_STATIC, forces)
        assert isinstance(excinfo.value.state, RigidBodyState)
