"""Optimal-control tests.

Oracles: central finite differences for every analytic derivative,
scipy.optimize for the box QP, and closed-form hover for the equilibrium
solve.
"""

from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from tracksim import nmpc
from tracksim.dynamics import QuadrotorParams, hover_state, rk4_step
from tracksim.geometry import quat_to_matrix, quat_from_yaw
from tracksim.reference import HorizonReference
from .conftest import random_unit_quaternion

P = QuadrotorParams()
W = nmpc.CostWeights()
CBF = nmpc.CbfConfig()
OCP = nmpc.OcpConfig()


def random_state(rng):
    x = np.zeros(13)
    x[:3] = rng.uniform(-10, 10, 3)
    x[3:6] = rng.uniform(-4, 4, 3)
    x[6:10] = random_unit_quaternion(rng)
    x[10:13] = rng.uniform(-2, 2, 3)
    return x


def central_grad(f, x, eps=1e-6):
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def hover_ref(p=(8.0, 0.0, 0.0), psi=0.0, N=10):
    stage = np.zeros(13)
    stage[:3] = p
    stage[6:10] = quat_from_yaw(psi)
    return HorizonReference(np.tile(stage, (N + 1, 1)))


class TestCostDerivatives:
    def test_lateral_body_velocity_definition(self, rng):
        for _ in range(50):
            x = random_state(rng)
            oracle = float(quat_to_matrix(x[6:10])[:, 1] @ x[3:6])
            assert nmpc.lateral_body_velocity(x) == pytest.approx(oracle, abs=1e-12)

    def test_stage_cost_grad_u_matches_fd(self, rng):
        ref = hover_ref().states[0]
        for _ in range(30):
            x = random_state(rng)
            u = rng.uniform(P.u_min, P.u_max, 4)
            g = nmpc.stage_cost_grad_u(x, u, ref, W)
            fd = central_grad(lambda uu: nmpc.stage_cost(x, uu, ref, W), u)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)

    def test_orbit_residual_jac_matches_fd(self, rng):
        for _ in range(30):
            x = random_state(rng)
            r, g = nmpc._orbit_residual_jac(x, W)
            assert r == pytest.approx(
                np.sqrt(W.orbit_weight) * nmpc.lateral_body_velocity(x), abs=1e-12
            )
            fd = central_grad(
                lambda xx: np.sqrt(W.orbit_weight) * nmpc.lateral_body_velocity(xx), x
            )
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)

    def test_orbit_batch_matches_scalar(self, rng):
        xs = np.stack([random_state(rng) for _ in range(12)])
        rb, gb = nmpc._orbit_residual_jac_batch(xs, W)
        for k in range(12):
            r, g = nmpc._orbit_residual_jac(xs[k], W)
            assert rb[k] == pytest.approx(r, abs=1e-12)
            np.testing.assert_allclose(gb[k], g, atol=1e-12)

    def test_quaternion_hemisphere_alignment(self, rng):
        # cost must be identical for q and -q references
        x = random_state(rng)
        u = rng.uniform(P.u_min, P.u_max, 4)
        ref = hover_ref().states[0]
        ref_neg = ref.copy()
        ref_neg[6:10] = -ref_neg[6:10]
        assert nmpc.stage_cost(x, u, ref, W) == pytest.approx(
            nmpc.stage_cost(x, u, ref_neg, W), rel=1e-12
        )


class TestCbfTerms:
    def test_h_definition(self, rng):
        x = random_state(rng)
        u = rng.uniform(P.u_min, P.u_max, 4)
        s = rng.uniform(-5, 5, 3)
        h, h_dot, h_ddot, res = nmpc.cbf_terms(x, u, s, CBF, P)
        assert h == pytest.approx(
            float(np.sum((x[:3] - s) ** 2)) - CBF.safe_radius**2, rel=1e-12
        )
        assert res == pytest.approx(
            h_ddot + 2 * CBF.gain * h_dot + CBF.gain**2 * h, rel=1e-12
        )

    def test_h_derivatives_match_fd_along_trajectory(self, rng):
        # integrate the true dynamics and difference h(t) numerically
        x = random_state(rng)
        x[10:13] *= 0.1
        u = rng.uniform(P.u_min, P.u_max, 4)
        s = x[:3] + rng.uniform(1.0, 3.0, 3)
        dt = 1e-4
        xs = [x]
        for _ in range(2):
            xs.append(rk4_step(xs[-1], u, dt, P))
        hs = [nmpc.cbf_terms(xx, u, s, CBF, P)[0] for xx in xs]
        h, h_dot, h_ddot, _ = nmpc.cbf_terms(xs[1], u, s, CBF, P)
        fd_dot = (hs[2] - hs[0]) / (2 * dt)
        fd_ddot = (hs[2] - 2 * hs[1] + hs[0]) / (dt * dt)
        assert h_dot == pytest.approx(fd_dot, rel=1e-5, abs=1e-5)
        assert h_ddot == pytest.approx(fd_ddot, rel=1e-3, abs=1e-3)

    def test_residual_jacobians_match_fd(self, rng):
        for _ in range(20):
            x = random_state(rng)
            u = rng.uniform(P.u_min, P.u_max, 4)
            s = rng.uniform(-5, 5, 3)
            res, gx, gu = nmpc._cbf_residual_jac(x, u, s, CBF, P)
            assert res == pytest.approx(nmpc.cbf_terms(x, u, s, CBF, P)[3], rel=1e-12)
            fx = central_grad(lambda xx: nmpc.cbf_terms(xx, u, s, CBF, P)[3], x)
            fu = central_grad(lambda uu: nmpc.cbf_terms(x, uu, s, CBF, P)[3], u)
            np.testing.assert_allclose(gx, fx, rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(gu, fu, rtol=1e-5, atol=1e-6)

    def test_batched_rows_match_scalar(self, rng):
        N = 6
        states = np.stack([random_state(rng) for _ in range(N + 1)])
        inputs = rng.uniform(P.u_min, P.u_max, (N, 4))
        obstacles = [rng.uniform(-5, 5, 3) for _ in range(3)]
        res_b, gx_b, gu_b = nmpc._cbf_rows_batch(states, inputs, obstacles, CBF, P)
        u_ext = np.vstack([inputs, inputs[-1:]])
        for k in range(N + 1):
            for m, s in enumerate(obstacles):
                res, gx, gu = nmpc._cbf_residual_jac(states[k], u_ext[k], s, CBF, P)
                assert res_b[k, m] == pytest.approx(res, rel=1e-12)
                np.testing.assert_allclose(gx_b[k, m], gx, atol=1e-12)
                np.testing.assert_allclose(gu_b[k, m], gu, atol=1e-12)

    def test_residuals_batch_matches_terms(self, rng):
        N = 5
        states = np.stack([random_state(rng) for _ in range(N + 1)])
        inputs = rng.uniform(P.u_min, P.u_max, (N, 4))
        obstacles = [rng.uniform(-5, 5, 3) for _ in range(2)]
        res = nmpc._cbf_residuals(states, inputs, obstacles, CBF, P)
        u_ext = np.vstack([inputs, inputs[-1:]])
        for k in range(N + 1):
            for m, s in enumerate(obstacles):
                assert res[k, m] == pytest.approx(
                    nmpc.cbf_terms(states[k], u_ext[k], s, CBF, P)[3], rel=1e-12
                )


class TestLinearization:
    def test_batched_jacobians_match_per_stage(self, rng):
        N = 5
        states = np.stack([random_state(rng) for _ in range(N + 1)])
        inputs = rng.uniform(P.u_min, P.u_max, (N, 4))
        A, B = nmpc._all_stage_jacobians(states, inputs, OCP.dt, P)
        for k in range(N):
            Ak, Bk, _ = nmpc._stage_jacobians(states[k], inputs[k], OCP.dt, P)
            np.testing.assert_allclose(A[k], Ak, atol=1e-9)
            np.testing.assert_allclose(B[k], Bk, atol=1e-9)

    def test_jacobians_predict_perturbed_rollout(self, rng):
        x = hover_state((10.0, 0, 0))
        u = P.hover_input
        A, B, base = nmpc._stage_jacobians(x, u, OCP.dt, P)
        dx = rng.standard_normal(13) * 1e-4
        du = rng.standard_normal(4) * 1e-4
        pred = base + A @ dx + B @ du
        actual = rk4_step(x + dx, u + du, OCP.dt, P)
        np.testing.assert_allclose(pred, actual, atol=1e-6)


class TestQpHelpers:
    def test_box_qp_matches_scipy(self, rng):
        for _ in range(10):
            n = 6
            A = rng.standard_normal((n, n))
            H = A @ A.T + n * np.eye(n)
            g = rng.standard_normal(n)
            lo, hi = -0.5 * np.ones(n), 0.5 * np.ones(n)
            du = nmpc._box_qp(H, g, lo, hi)
            oracle = minimize(
                lambda z: 0.5 * z @ H @ z + g @ z,
                np.zeros(n), jac=lambda z: H @ z + g,
                bounds=list(zip(lo, hi)), method="L-BFGS-B",
                options={"ftol": 1e-14, "gtol": 1e-12},
            ).x
            np.testing.assert_allclose(du, oracle, atol=1e-5)

    def test_soft_qp_prefers_feasibility_under_big_weight(self, rng):
        # one violated row: with a large slack weight the QP satisfies it
        n = 4
        H = np.eye(n)
        g = np.zeros(n)
        a = np.array([1.0, 0, 0, 0])
        rows = [(a, 0.3)]  # need du[0] >= 0.3
        du = nmpc._soft_qp(H, g, rows, -np.ones(n), np.ones(n), slack_weight=1e6)
        assert du is not None
        assert du[0] >= 0.3 - 1e-6

    def test_soft_qp_hard_rows_respected(self):
        n = 2
        H = np.eye(n)
        g = np.array([1.0, 0.0])  # pulls du[0] to -1
        rows = [(np.array([1.0, 0.0]), -0.2)]  # satisfied row: du[0] >= -0.2
        du = nmpc._soft_qp(H, g, rows, -np.ones(n), np.ones(n), slack_weight=1e6)
        assert du[0] >= -0.2 - 1e-6


class TestSolveOcp:
    def test_hover_is_fixed_point(self):
        x0 = hover_state((8.0, 0.0, 0.0))
        refs = hover_ref((8.0, 0.0, 0.0))
        sol = nmpc.solve_ocp(x0, refs, [], W, CBF, OCP, P)
        assert sol.status == "converged"
        # inputs stay close to hover, states close to the reference; the final
        # input only enters through the weak input penalty, so it is excluded
        np.testing.assert_allclose(
            sol.inputs[:-1], np.tile(P.hover_input, (OCP.N - 1, 1)), atol=0.05
        )
        np.testing.assert_allclose(
            sol.states[:-1, :3], np.tile([8.0, 0.0, 0.0], (OCP.N, 1)), atol=0.05
        )

    def test_inputs_within_bounds_under_aggressive_reference(self):
        x0 = hover_state((30.0, 0.0, 0.0))
        refs = hover_ref((8.0, 0.0, 0.0))
        sol = nmpc.solve_ocp(x0, refs, [], W, CBF, OCP, P)
        assert np.all(sol.inputs >= P.u_min - 1e-9)
        assert np.all(sol.inputs <= P.u_max + 1e-9)

    def test_solution_is_exact_rollout(self):
        x0 = hover_state((12.0, 1.0, 0.5))
        refs = hover_ref((8.0, 0.0, 0.0))
        sol = nmpc.solve_ocp(x0, refs, [], W, CBF, OCP, P)
        xs = nmpc._rollout(x0, sol.inputs, OCP.dt, P)
        np.testing.assert_allclose(sol.states, xs, atol=1e-12)

    def test_stationarity_at_solution(self):
        # projected-gradient check of the reported optimum
        x0 = hover_state((10.0, 0.0, 0.0))
        refs = hover_ref((8.0, 0.0, 0.0))
        # the default tolerances stop on cost stagnation; tighten them so the
        # iterates actually reach a stationary point before checking it
        tight = replace(OCP, max_iter=200, step_tol=1e-9, cost_tol=1e-10)
        sol = nmpc.solve_ocp(x0, refs, [], W, CBF, tight, P)
        u_flat = sol.inputs.ravel()

        def f(z):
            xs = nmpc._rollout(x0, z.reshape(-1, 4), tight.dt, P)
            return nmpc.total_cost(xs, z.reshape(-1, 4), refs, W)

        g = central_grad(f, u_flat, eps=1e-5)
        # gradient components must vanish except where the input bound binds
        interior = (u_flat > P.u_min + 1e-6) & (u_flat < P.u_max - 1e-6)
        assert np.max(np.abs(g[interior])) / max(1.0, abs(sol.cost)) < 1e-4

    def test_cbf_steers_clear_of_obstacle(self):
        # heading straight at a point; the solution must not predict contact
        x0 = hover_state((12.0, 0.0, 0.0))
        x0[3] = -2.0  # flying toward the target/obstacle
        refs = hover_ref((8.0, 0.0, 0.0))
        obstacle = np.array([10.0, 0.0, 0.0])
        sol = nmpc.solve_ocp(x0, refs, [obstacle], W, CBF, OCP, P)
        d = np.linalg.norm(sol.states[:, :3] - obstacle, axis=1)
        assert d.min() >= CBF.safe_radius - 1e-6

    def test_warm_start_converges_fast(self):
        x0 = hover_state((12.0, 0.0, 0.0))
        refs = hover_ref((8.0, 0.0, 0.0))
        cold = nmpc.solve_ocp(x0, refs, [], W, CBF, OCP, P)
        warm = nmpc.solve_ocp(x0, refs, [], W, CBF, OCP, P, warm_start=cold)
        assert warm.iterations <= cold.iterations
        assert warm.cost <= cold.cost * (1 + 1e-6)

    def test_nonfinite_state_rejected(self):
        x0 = hover_state()
        x0[0] = np.nan
        with pytest.raises(ValueError):
            nmpc.solve_ocp(x0, hover_ref(), [], W, CBF, OCP, P)

    def test_obstacle_cap(self):
        # more obstacles than max_constraints must not blow up the solve
        x0 = hover_state((12.0, 0.0, 0.0))
        refs = hover_ref((8.0, 0.0, 0.0))
        obs = [np.array([30.0 + k, 50.0, 0.0]) for k in range(25)]
        sol = nmpc.solve_ocp(x0, refs, obs, W, CBF, OCP, P)
        assert sol.status in ("converged", "max_iter")


class TestController:
    def test_first_call_cold_start(self):
        ctl = nmpc.NmpcController(W, CBF, OCP, P)
        sol = ctl.control(hover_state((10.0, 0, 0)), hover_ref((8.0, 0, 0)), [], t=0.0)
        assert ctl.previous is sol

    def test_warm_start_shifts_by_whole_stages(self):
        ctl = nmpc.NmpcController(W, CBF, OCP, P)
        x0 = hover_state((10.0, 0, 0))
        refs = hover_ref((8.0, 0, 0))
        ctl.control(x0, refs, [], t=0.0)
        anchor0 = ctl._horizon_anchor
        # sub-stage ticks must not advance the anchor
        ctl.control(x0, refs, [], t=0.02)
        assert ctl._horizon_anchor == anchor0
        # a full stage of elapsed time advances it by exactly one stage
        ctl.control(x0, refs, [], t=OCP.dt + 0.01)
        assert ctl._horizon_anchor == pytest.approx(anchor0 + OCP.dt)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            nmpc.OcpConfig(N=0)
        with pytest.raises(ValueError):
            nmpc.CbfConfig(safe_radius=0.0)
        with pytest.raises(ValueError):
            nmpc.CostWeights(state_weight=(1.0,) * 12)
