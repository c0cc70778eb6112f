"""Rigid-body model tests.

Oracles: an allocation-matrix mixer, scipy.integrate.solve_ivp for the
ODE, and closed-form ballistic flight for the thrust-free case.
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from tracksim import dynamics as dyn
from .conftest import random_unit_quaternion

P = dyn.QuadrotorParams()


def random_state(rng, spin=2.0):
    x = np.zeros(13)
    x[:3] = rng.uniform(-10, 10, 3)
    x[3:6] = rng.uniform(-5, 5, 3)
    x[6:10] = random_unit_quaternion(rng)
    x[10:13] = rng.uniform(-spin, spin, 3)
    return x


class TestMotorMixing:
    def test_matches_allocation_matrix(self, rng):
        # oracle: [tau; mu] = M @ u^2 with the X-configuration allocation matrix
        kt, l, km = P.k_tau, P.l, P.k_mu
        M = np.array(
            [
                [kt, kt, kt, kt],
                [kt * l, kt * l, -kt * l, -kt * l],
                [-kt * l, kt * l, kt * l, -kt * l],
                [km, -km, km, -km],
            ]
        )
        for _ in range(100):
            u = rng.uniform(P.u_min, P.u_max, 4)
            tau, mu = dyn.motor_mixing(u, P)
            oracle = M @ (u * u)
            assert tau == pytest.approx(oracle[0], rel=1e-12)
            np.testing.assert_allclose(mu, oracle[1:], rtol=1e-12, atol=1e-15)

    def test_hover_input_produces_weight(self):
        tau, mu = dyn.motor_mixing(P.hover_input, P)
        assert tau == pytest.approx(P.m * P.g, rel=1e-12)
        np.testing.assert_allclose(mu, 0.0, atol=1e-12)

    def test_bounds_check(self):
        with pytest.raises(ValueError):
            dyn.check_input_bounds([P.u_max + 1.0] * 4, P)
        dyn.check_input_bounds([P.u_min] * 4, P)  # boundary is legal


class TestContinuousDynamics:
    def test_hover_equilibrium(self):
        xdot = dyn.continuous_dynamics(dyn.hover_state(), P.hover_input, P)
        np.testing.assert_allclose(xdot, 0.0, atol=1e-12)

    def test_scalar_and_batch_paths_agree(self, rng):
        xs = np.stack([random_state(rng) for _ in range(16)])
        us = rng.uniform(P.u_min, P.u_max, (16, 4))
        batch = dyn.continuous_dynamics(xs, us, P)
        for k in range(16):
            np.testing.assert_allclose(
                dyn.continuous_dynamics(xs[k], us[k], P), batch[k], atol=1e-14
            )

    def test_thrust_direction_is_body_z(self, rng):
        from tracksim.geometry import quat_to_matrix

        for _ in range(50):
            x = random_state(rng)
            u = rng.uniform(P.u_min, P.u_max, 4)
            xdot = dyn.continuous_dynamics(x, u, P)
            tau, _ = dyn.motor_mixing(u, P)
            bz = quat_to_matrix(x[6:10])[:, 2]
            np.testing.assert_allclose(
                xdot[3:6], bz * tau / P.m + dyn.G_T, atol=1e-10
            )

    def test_angular_dynamics_euler_equation(self, rng):
        for _ in range(50):
            x = random_state(rng)
            u = rng.uniform(P.u_min, P.u_max, 4)
            xdot = dyn.continuous_dynamics(x, u, P)
            _, mu = dyn.motor_mixing(u, P)
            J = np.diag(P.J)
            w = x[10:13]
            np.testing.assert_allclose(
                J @ xdot[10:13], mu - np.cross(w, J @ w), atol=1e-10
            )


class TestRk4:
    def test_matches_solve_ivp(self, rng):
        for _ in range(10):
            x0 = random_state(rng, spin=1.0)
            # near-hover inputs: large asymmetric torques with J ~ 0.01 make the
            # ODE stiff at this dt and would dominate the comparison error
            u = P.hover_input + rng.uniform(-0.3, 0.3, 4)
            dt = 0.02
            steps = 10
            x = x0.copy()
            for _ in range(steps):
                x = dyn.rk4_step(x, u, dt, P)
            sol = solve_ivp(
                lambda t, s: dyn.continuous_dynamics(s, u, P),
                (0.0, steps * dt), x0, rtol=1e-11, atol=1e-11,
            )
            ref = sol.y[:, -1]
            ref[6:10] /= np.linalg.norm(ref[6:10])
            np.testing.assert_allclose(x, ref, atol=2e-6)

    def test_ballistic_closed_form(self, rng):
        # zero motor speed: pure free fall with quaternion kinematics only
        x0 = np.zeros(13)
        x0[:3] = [1.0, 2.0, 30.0]
        x0[3:6] = [3.0, -1.0, 4.0]
        x0[6] = 1.0
        dt, steps = 0.01, 100
        x = x0.copy()
        for _ in range(steps):
            x = dyn.rk4_step(x, np.zeros(4), dt, P)
        T = dt * steps
        np.testing.assert_allclose(
            x[:3], x0[:3] + x0[3:6] * T + 0.5 * dyn.G_T * T * T, atol=1e-9
        )
        np.testing.assert_allclose(x[3:6], x0[3:6] + dyn.G_T * T, atol=1e-9)

    def test_quaternion_normalized(self, rng):
        x = random_state(rng, spin=10.0)
        u = rng.uniform(P.u_min, P.u_max, 4)
        for _ in range(50):
            x = dyn.rk4_step(x, u, 0.02, P)
        assert np.linalg.norm(x[6:10]) == pytest.approx(1.0, abs=1e-12)

    def test_fourth_order_convergence(self, rng):
        # halving dt must shrink the one-interval error by roughly 2^4
        x0 = random_state(rng, spin=3.0)
        u = rng.uniform(P.u_min, P.u_max, 4)
        T = 0.16

        def endpoint(n):
            x = x0.copy()
            for _ in range(n):
                x = dyn.rk4_step(x, u, T / n, P)
            return x

        ref = endpoint(4096)
        e1 = np.linalg.norm(endpoint(8) - ref)
        e2 = np.linalg.norm(endpoint(16) - ref)
        assert 12.0 <= e1 / e2 <= 20.0

    def test_batched_step_matches_loop(self, rng):
        xs = np.stack([random_state(rng) for _ in range(8)])
        us = rng.uniform(P.u_min, P.u_max, (8, 4))
        batch = dyn.rk4_step(xs, us, 0.05, P)
        for k in range(8):
            np.testing.assert_allclose(
                dyn.rk4_step(xs[k], us[k], 0.05, P), batch[k], atol=1e-13
            )

    def test_dt_validation(self):
        with pytest.raises(ValueError):
            dyn.rk4_step(dyn.hover_state(), P.hover_input, 0.5, P)
        with pytest.raises(ValueError):
            dyn.rk4_step(dyn.hover_state(), P.hover_input, 0.0, P)


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            dyn.QuadrotorParams(m=-1.0)
        with pytest.raises(ValueError):
            dyn.QuadrotorParams(J=(0.0, 0.01, 0.01))
        with pytest.raises(ValueError):
            dyn.QuadrotorParams(u_min=9.0, u_max=8.0)

    def test_thrust_to_weight(self):
        tau, _ = dyn.motor_mixing(np.full(4, P.u_max), P)
        assert tau / (P.m * P.g) == pytest.approx(4.0, rel=1e-12)
