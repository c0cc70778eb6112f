"""Receding-horizon optimal control: quadratic tracking cost with an
orbit-suppression term, second-order CBF obstacle constraints, and a
direct multiple-shooting SQP solve.

Transcription: states and inputs over N stages, RK4 shooting defects,
Gauss-Newton Hessian, condensed QP per iteration (cvxopt). CBF and state
bound constraints carry slack variables under an exact L1 penalty so the
solver always returns a best-effort trajectory; input bounds are hard box
constraints on the QP step plus projection.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix, solvers

from .dynamics import QuadrotorParams, rk4_step
from .reference import HorizonReference

solvers.options["show_progress"] = False

_DEFAULT_STATE_WEIGHT = (150, 100, 150, 15, 15, 15, 50, 15, 15, 50, 5, 5, 5)
_DEFAULT_X_MIN = (-999, -999, -999, -25, -25, -25, -10, -10, -10, -10, -40, -40, -40)
_DEFAULT_X_MAX = (999, 999, 999, 25, 25, 25, 10, 10, 10, 10, 40, 40, 40)


@dataclass(frozen=True)
class CostWeights:
    state_weight: tuple = _DEFAULT_STATE_WEIGHT
    input_weight: tuple = (1.0, 1.0, 1.0, 1.0)
    orbit_weight: float = 20.0

    def __post_init__(self):
        if len(self.state_weight) != 13 or len(self.input_weight) != 4:
            raise ValueError("expected 13 state weights and 4 input weights")
        if any(w < 0 for w in self.state_weight) or any(
            w < 0 for w in self.input_weight
        ) or self.orbit_weight < 0:
            raise ValueError("weights must be non-negative")


@dataclass(frozen=True)
class CbfConfig:
    safe_radius: float = 0.3  # m, Q_max
    gain: float = 2.0  # 1/s, lambda
    max_constraints: int = 10

    def __post_init__(self):
        if not (self.safe_radius > 0 and self.gain > 0):
            raise ValueError("safe_radius and gain must be positive")


@dataclass(frozen=True)
class OcpConfig:
    N: int = 10
    dt: float = 0.2
    x_min: tuple = _DEFAULT_X_MIN
    x_max: tuple = _DEFAULT_X_MAX
    max_iter: int = 20
    step_tol: float = 1e-4
    cost_tol: float = 1e-4  # relative merit improvement declaring convergence
    violation_tol: float = 1e-6
    slack_weight: float = 1e5
    du_max: float = 2.0  # trust region on the per-motor input step

    def __post_init__(self):
        if self.N < 1 or self.dt <= 0:
            raise ValueError("N >= 1 and dt > 0 required")
        if np.any(np.asarray(self.x_min) >= np.asarray(self.x_max)):
            raise ValueError("state bounds must be ordered")


@dataclass
class OcpSolution:
    states: np.ndarray  # (N+1, 13)
    inputs: np.ndarray  # (N, 4)
    cost: float
    max_cbf_violation: float
    iterations: int
    status: str  # converged | max_iter | infeasible-relaxed


def _align_quat_ref(ref: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Flip the reference quaternion into the hemisphere of the state's."""
    ref = ref.copy()
    if np.dot(ref[6:10], x[6:10]) < 0:
        ref[6:10] = -ref[6:10]
    return ref


def _body_y_column(q):
    """Second column of R(q): body y axis in the target frame."""
    w, x, y, z = q
    return np.array([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)])


def lateral_body_velocity(x) -> float:
    """v_y^B: lateral component of the velocity in body axes."""
    return float(_body_y_column(x[6:10]) @ x[3:6])


def stage_cost(x, u, ref, w: CostWeights) -> float:
    """Weighted quadratic tracking cost plus orbit suppression."""
    x = np.asarray(x, dtype=float)
    ref = _align_quat_ref(np.asarray(ref, dtype=float), x)
    dx = x - ref
    du = np.asarray(u, dtype=float)  # reference inputs are zero
    vy = lateral_body_velocity(x)
    return float(
        dx @ (np.asarray(w.state_weight) * dx)
        + du @ (np.asarray(w.input_weight) * du)
        + w.orbit_weight * vy * vy
    )


def stage_cost_grad_u(x, u, ref, w: CostWeights) -> np.ndarray:
    """Analytic gradient of stage_cost with respect to the input."""
    return 2.0 * np.asarray(w.input_weight) * np.asarray(u, dtype=float)


def _orbit_residual_jac(x, w: CostWeights):
    """(residual, d residual / d x) for the orbit term sqrt(Qo) * v_y^B."""
    s = np.sqrt(w.orbit_weight)
    q = x[6:10]
    v = x[3:6]
    col = _body_y_column(q)
    r = s * float(col @ v)
    g = np.zeros(13)
    g[3:6] = s * col
    qw, qx, qy, qz = q
    dcol = np.array(
        [
            [-2 * qz, 0.0, 2 * qx],  # d/dw
            [2 * qy, -4 * qx, 2 * qw],  # d/dx
            [2 * qx, 0.0, 2 * qz],  # d/dy
            [-2 * qw, -4 * qz, 2 * qy],  # d/dz
        ]
    )
    g[6:10] = s * (dcol @ v)
    return r, g


def _orbit_residual_jac_batch(states, w: CostWeights):
    """Stage-wise (residual, d residual / d x) of sqrt(Qo) * v_y^B, batched."""
    s = np.sqrt(w.orbit_weight)
    v = states[:, 3:6]
    qw, qx, qy, qz = states[:, 6], states[:, 7], states[:, 8], states[:, 9]
    col = np.stack(
        [2 * (qx * qy - qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz + qw * qx)],
        axis=-1,
    )
    r = s * np.sum(col * v, axis=-1)
    g = np.zeros((states.shape[0], 13))
    g[:, 3:6] = s * col
    vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
    g[:, 6] = s * (-2 * qz * vx + 2 * qx * vz)
    g[:, 7] = s * (2 * qy * vx - 4 * qx * vy + 2 * qw * vz)
    g[:, 8] = s * (2 * qx * vx + 2 * qz * vz)
    g[:, 9] = s * (-2 * qw * vx - 4 * qz * vy + 2 * qy * vz)
    return r, g


def _cbf_rows_batch(states, inputs, obstacles, cfg: CbfConfig, p: QuadrotorParams):
    """Residuals and Jacobians for every (stage, obstacle) CBF constraint.

    Returns res (K, M), gx (K, M, 13), gu (K, M, 4) with K = N+1 stages; the
    terminal stage reuses the last input, matching _cbf_residuals.
    """
    lam = cfg.gain
    s = np.asarray(obstacles, dtype=float)  # (M, 3)
    u = np.vstack([inputs, inputs[-1:]])  # (K, 4)
    pos = states[:, :3]
    v = states[:, 3:6]
    qw, qx, qy, qz = states[:, 6], states[:, 7], states[:, 8], states[:, 9]
    bz = np.stack(
        [2 * (qx * qz + qw * qy), 2 * (qy * qz - qw * qx), 1 - 2 * (qx**2 + qy**2)],
        axis=-1,
    )
    # dbz[k, i, :] = d bz / d q_i at stage k
    K = states.shape[0]
    dbz = np.empty((K, 4, 3))
    dbz[:, 0] = np.stack([2 * qy, -2 * qx, np.zeros(K)], axis=-1)
    dbz[:, 1] = np.stack([2 * qz, -2 * qw, -4 * qx], axis=-1)
    dbz[:, 2] = np.stack([2 * qw, 2 * qz, -4 * qy], axis=-1)
    dbz[:, 3] = np.stack([2 * qx, 2 * qy, np.zeros(K)], axis=-1)
    tau = p.k_tau * np.sum(u * u, axis=1)
    a = bz * (tau / p.m)[:, None]
    a[:, 2] -= p.g

    e = pos[:, None, :] - s[None, :, :]  # (K, M, 3)
    h = np.sum(e * e, axis=-1) - cfg.safe_radius**2
    h_dot = 2.0 * np.sum(e * v[:, None, :], axis=-1)
    h_ddot = 2.0 * np.sum(v * v, axis=1)[:, None] + 2.0 * np.sum(
        e * a[:, None, :], axis=-1
    )
    res = h_ddot + 2.0 * lam * h_dot + lam * lam * h

    M = s.shape[0]
    gx = np.zeros((K, M, 13))
    gx[:, :, :3] = 2.0 * a[:, None, :] + 4.0 * lam * v[:, None, :] + 2.0 * lam * lam * e
    gx[:, :, 3:6] = 4.0 * v[:, None, :] + 4.0 * lam * e
    gx[:, :, 6:10] = 2.0 * (tau / p.m)[:, None, None] * np.einsum(
        "kqc,kmc->kmq", dbz, e
    )
    gu = (4.0 * p.k_tau / p.m) * np.sum(bz[:, None, :] * e, axis=-1)[:, :, None] * u[
        :, None, :
    ]
    return res, gx, gu


def _thrust_axis(q):
    """Third column of R(q) and its derivative w.r.t. quaternion components."""
    w, x, y, z = q
    bz = np.array([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)])
    dbz = np.array(
        [
            [2 * y, -2 * x, 0.0],  # d/dw
            [2 * z, -2 * w, -4 * x],  # d/dx
            [2 * w, 2 * z, -4 * y],  # d/dy
            [2 * x, 2 * y, 0.0],  # d/dz
        ]
    )
    return bz, dbz


def cbf_terms(x, u, s_point, cfg: CbfConfig, p: QuadrotorParams):
    """Barrier value, its first two time derivatives, and the CBF residual.

    h = ||s - p||^2 - Q_max^2 with the obstacle point held fixed; the
    derivatives follow the chain rule along the closed-loop dynamics
    (h_dot = 2 (p - s)^T v), so they match finite differences of h along a
    trajectory.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s_point, dtype=float)
    e = x[:3] - s
    v = x[3:6]
    h = float(e @ e) - cfg.safe_radius**2
    h_dot = 2.0 * float(e @ v)
    bz, _ = _thrust_axis(x[6:10])
    tau = p.k_tau * float(np.sum(np.square(u)))
    a = bz * (tau / p.m) + np.array([0.0, 0.0, -p.g])
    h_ddot = 2.0 * float(v @ v) + 2.0 * float(e @ a)
    residual = h_ddot + 2.0 * cfg.gain * h_dot + cfg.gain**2 * h
    return h, h_dot, h_ddot, residual


def _cbf_residual_jac(x, u, s_point, cfg: CbfConfig, p: QuadrotorParams):
    """(residual, d/dx (13,), d/du (4,)) of the CBF residual."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = np.asarray(s_point, dtype=float)
    lam = cfg.gain
    e = x[:3] - s
    v = x[3:6]
    q = x[6:10]
    bz, dbz = _thrust_axis(q)
    tau = p.k_tau * float(np.sum(np.square(u)))
    a = bz * (tau / p.m) + np.array([0.0, 0.0, -p.g])

    h = float(e @ e) - cfg.safe_radius**2
    h_dot = 2.0 * float(e @ v)
    h_ddot = 2.0 * float(v @ v) + 2.0 * float(e @ a)
    res = h_ddot + 2.0 * lam * h_dot + lam * lam * h

    gx = np.zeros(13)
    gx[:3] = 2.0 * a + 4.0 * lam * v + 2.0 * lam * lam * e
    gx[3:6] = 4.0 * v + 4.0 * lam * e
    gx[6:10] = 2.0 * (tau / p.m) * (dbz @ e)
    gu = (2.0 * p.k_tau / p.m) * float(bz @ e) * 2.0 * u
    return res, gx, gu


def _cbf_residuals(states, inputs, obstacles, cfg: CbfConfig, p: QuadrotorParams):
    """CBF residuals for every (stage, obstacle) pair, shape (N+1, M).

    The terminal stage reuses the last input (no input is applied there but
    the constraint still screens the predicted terminal state).
    """
    M = len(obstacles)
    if M == 0:
        return np.zeros((states.shape[0], 0))
    s = np.asarray(obstacles, dtype=float)  # (M, 3)
    u = np.vstack([inputs, inputs[-1:]])  # (N+1, 4)
    pos = states[:, :3]
    v = states[:, 3:6]
    qw, qx, qy, qz = states[:, 6], states[:, 7], states[:, 8], states[:, 9]
    bz = np.stack(
        [2 * (qx * qz + qw * qy), 2 * (qy * qz - qw * qx), 1 - 2 * (qx**2 + qy**2)],
        axis=-1,
    )
    tau = p.k_tau * np.sum(u * u, axis=1)
    a = bz * (tau / p.m)[:, None]
    a[:, 2] -= p.g  # (N+1, 3)

    e = pos[:, None, :] - s[None, :, :]  # (N+1, M, 3)
    h = np.sum(e * e, axis=-1) - cfg.safe_radius**2
    h_dot = 2.0 * np.sum(e * v[:, None, :], axis=-1)
    h_ddot = 2.0 * np.sum(v * v, axis=1)[:, None] + 2.0 * np.sum(
        e * a[:, None, :], axis=-1
    )
    return h_ddot + 2.0 * cfg.gain * h_dot + cfg.gain**2 * h


def _rollout(x0, inputs, dt, p):
    N = inputs.shape[0]
    xs = np.zeros((N + 1, 13))
    xs[0] = x0
    for k in range(N):
        xs[k + 1] = rk4_step(xs[k], inputs[k], dt, p)
    return xs


def _rollout_batch(x0, inputs, dt, p):
    """Exact rollouts for a batch of input plans: (A, N, 4) -> (A, N+1, 13)."""
    A, N, _ = inputs.shape
    xs = np.zeros((A, N + 1, 13))
    xs[:, 0] = x0
    # overly long trial steps may overflow; NaN/inf merits are simply rejected
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            xs[:, k + 1] = rk4_step(xs[:, k], inputs[:, k], dt, p)
    return xs


def total_cost(states, inputs, refs: HorizonReference, w: CostWeights) -> float:
    N = inputs.shape[0]
    c = 0.0
    for k in range(N):
        c += stage_cost(states[k], inputs[k], refs.states[k], w)
    c += stage_cost(states[N], np.zeros(4), refs.states[N], w)
    return c


def _stage_jacobians(x, u, dt, p, eps=1e-6):
    """Forward-difference sensitivities of the RK4 step: A (13x13), B (13x4)."""
    base = rk4_step(x, u, dt, p)
    xp = np.tile(x, (13, 1)) + np.eye(13) * eps
    up = np.tile(u, (13, 1))
    fx = rk4_step(xp, up, dt, p)
    A = (fx - base).T / eps
    xq = np.tile(x, (4, 1))
    uq = np.tile(u, (4, 1)) + np.eye(4) * eps
    fu = rk4_step(xq, uq, dt, p)
    B = (fu - base).T / eps
    return A, B, base


def _all_stage_jacobians(states, inputs, dt, p, eps=1e-6):
    """Forward-difference A, B for every stage in one batched RK4 call."""
    N = inputs.shape[0]
    xs = states[:N]
    # per stage: 1 base point, 13 state perturbations, 4 input perturbations
    xb = np.empty((N, 18, 13))
    ub = np.empty((N, 18, 4))
    xb[:] = xs[:, None, :]
    ub[:] = inputs[:, None, :]
    xb[:, 1:14] += np.eye(13)[None] * eps
    ub[:, 14:] += np.eye(4)[None] * eps
    f = rk4_step(xb.reshape(-1, 13), ub.reshape(-1, 4), dt, p).reshape(N, 18, 13)
    base = f[:, 0]
    A = np.transpose(f[:, 1:14] - base[:, None, :], (0, 2, 1)) / eps
    B = np.transpose(f[:, 14:] - base[:, None, :], (0, 2, 1)) / eps
    return A, B


def _merit(states, inputs, refs, obstacles, w, cbf_cfg, cfg, p):
    """L1 exact-penalty merit: cost + slack_weight * violations.

    Iterates are exact rollouts, so dynamics defects carry no penalty term.
    """
    cost = total_cost(states, inputs, refs, w)
    xmin = np.asarray(cfg.x_min)
    xmax = np.asarray(cfg.x_max)
    pen = float(
        np.sum(np.maximum(states - xmax, 0.0)) + np.sum(np.maximum(xmin - states, 0.0))
    )
    res = _cbf_residuals(states, inputs, obstacles, cbf_cfg, p)
    pen += float(np.sum(np.maximum(-res, 0.0)))
    return cost + cfg.slack_weight * pen


def _max_violation(states, inputs, obstacles, cbf_cfg, cfg, p):
    """(max dynamics defect, max CBF violation, max state-bound violation).

    Defects are zero by construction on exact rollouts.
    """
    res = _cbf_residuals(states, inputs, obstacles, cbf_cfg, p)
    cbf_v = float(np.max(np.maximum(-res, 0.0), initial=0.0))
    xmin = np.asarray(cfg.x_min)
    xmax = np.asarray(cfg.x_max)
    bv = max(
        float(np.max(np.maximum(states - xmax, 0.0), initial=0.0)),
        float(np.max(np.maximum(xmin - states, 0.0), initial=0.0)),
    )
    return 0.0, cbf_v, bv


def _box_qp(H, g, lo, hi):
    """min 1/2 du'H du + g'du subject to lo <= du <= hi."""
    nu = g.shape[0]
    P = matrix(H)
    qv = matrix(g)
    G = matrix(np.vstack([np.eye(nu), -np.eye(nu)]))
    h = matrix(np.concatenate([hi, -lo]))
    sol = solvers.qp(P, qv, G, h)
    if sol["x"] is None:
        return np.zeros(nu)
    return np.asarray(sol["x"]).ravel()


def _soft_qp(H, g, rows, lo, hi, slack_weight):
    """Box QP with L1-penalized soft rows a_row @ du + s >= rhs, s >= 0.

    Satisfied rows (rhs <= 0) are imposed hard: du = 0 already meets them and
    lies in the box, so feasibility is never at risk and the QP stays small.
    Only violated rows carry slack variables. Returns the du block, or None
    if the QP solver fails outright.
    """
    nu = g.shape[0]
    A = np.array([a for a, _ in rows])
    rhs = np.array([r for _, r in rows])
    viol = rhs > 0.0
    Av, rv = A[viol], rhs[viol]
    As, rs = A[~viol], rhs[~viol]
    mv = Av.shape[0]
    ms = As.shape[0]
    nz = nu + mv
    P = np.zeros((nz, nz))
    P[:nu, :nu] = H
    P[nu:, nu:] = 1e-9 * np.eye(mv)
    qv = np.concatenate([g, np.full(mv, slack_weight)])

    # G z <= h rows: slacked rows, slack positivity, hard rows, box on du
    nrow = 2 * mv + ms + 2 * nu
    Gmat = np.zeros((nrow, nz))
    hvec = np.zeros(nrow)
    Gmat[:mv, :nu] = -Av
    Gmat[:mv, nu:] = -np.eye(mv)
    hvec[:mv] = -rv
    Gmat[mv : 2 * mv, nu:] = -np.eye(mv)
    r0 = 2 * mv
    Gmat[r0 : r0 + ms, :nu] = -As
    hvec[r0 : r0 + ms] = -rs
    r0 += ms
    Gmat[r0 : r0 + nu, :nu] = np.eye(nu)
    hvec[r0 : r0 + nu] = hi
    Gmat[r0 + nu :, :nu] = -np.eye(nu)
    hvec[r0 + nu :] = -lo

    try:
        sol = solvers.qp(matrix(P), matrix(qv), matrix(Gmat), matrix(hvec))
    except (ValueError, ArithmeticError):
        return None
    if sol["x"] is None:
        return None
    return np.asarray(sol["x"]).ravel()[:nu]


def solve_ocp(
    x0,
    refs: HorizonReference,
    obstacles,
    weights: CostWeights,
    cbf_cfg: CbfConfig,
    cfg: OcpConfig,
    params: QuadrotorParams,
    warm_start: OcpSolution | None = None,
) -> OcpSolution:
    """Gauss-Newton SQP over the multiple-shooting variables.

    Returns a best-effort trajectory on iteration exhaustion or relaxed
    constraints; never raises for solver-side reasons.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite initial state")
    N = cfg.N
    nu = 4 * N
    p = params
    obstacles = [np.asarray(s, dtype=float) for s in obstacles][: cbf_cfg.max_constraints]
    sqrt_qx = np.sqrt(np.asarray(weights.state_weight, dtype=float))
    sqrt_qu = np.sqrt(np.asarray(weights.input_weight, dtype=float))
    xmin = np.asarray(cfg.x_min, dtype=float)
    xmax = np.asarray(cfg.x_max, dtype=float)

    if warm_start is not None:
        inputs = np.asarray(warm_start.inputs, dtype=float).copy()
    else:
        inputs = np.tile(p.hover_input, (N, 1))
    inputs = np.clip(inputs, p.u_min, p.u_max)
    # iterates stay on exact rollouts: shooting defects are zero throughout
    states = _rollout(x0, inputs, cfg.dt, p)

    refs_aligned = np.array(
        [_align_quat_ref(refs.states[k], states[min(k, N)]) for k in range(N + 1)]
    )

    status = "max_iter"
    iterations = 0
    merit_prev = _merit(states, inputs, refs, obstacles, weights, cbf_cfg, cfg, p)
    delta = cfg.du_max  # trust region, shrunk when the QP step is rejected

    for it in range(cfg.max_iter):
        iterations = it + 1
        # --- linearize the rollout dynamics
        A, B = _all_stage_jacobians(states, inputs, cfg.dt, p)

        # --- condense: dx_k = E[k] @ du  (du stacked over stages)
        E = np.zeros((N + 1, 13, nu))
        for k in range(N):
            E[k + 1] = A[k] @ E[k]
            E[k + 1][:, 4 * k : 4 * k + 4] += B[k]

        # --- Gauss-Newton cost over du
        H = np.zeros((nu, nu))
        g = np.zeros(nu)
        Jx = (sqrt_qx[None, :, None] * E).reshape(-1, nu)  # stacked sqrt(Q) E_k
        rx = (sqrt_qx * (states - refs_aligned)).ravel()
        ro, go = _orbit_residual_jac_batch(states, weights)
        Jo = np.einsum("ki,kin->kn", go, E)
        H += 2.0 * (Jx.T @ Jx + Jo.T @ Jo)
        g += 2.0 * (Jx.T @ rx + ro @ Jo)
        qu = sqrt_qu**2
        H[np.arange(nu), np.arange(nu)] += 2.0 * np.tile(qu, N)
        g += 2.0 * (qu * inputs).ravel()
        # Levenberg damping scaled to the problem: tames steps along the
        # nearly-flat directions of the GN Hessian
        H += (1e-6 * np.trace(H) / nu + 1e-9) * np.eye(nu)

        # --- soft constraint rows (CBF + violated state bounds), slack L1
        rows = []  # (a_row over du, rhs) meaning a_row @ du + s >= rhs
        if obstacles:
            res_b, gx_b, gu_b = _cbf_rows_batch(states, inputs, obstacles, cbf_cfg, p)
            a_rows = np.einsum("kmi,kin->kmn", gx_b, E)
            for k in range(N + 1):
                ku = min(k, N - 1)
                a_rows[k, :, 4 * ku : 4 * ku + 4] += gu_b[k]
            # keep a row only if the step radius could make it active:
            # res - delta * ||a_row||_1 <= 0 is reachable within the box
            reach = delta * np.sum(np.abs(a_rows), axis=-1)
            keep = res_b <= reach
            for k, j in np.argwhere(keep):
                rows.append((a_rows[k, j], -res_b[k, j]))
        for k, idx in np.argwhere(states > xmax):
            rows.append((-E[k][idx], states[k, idx] - xmax[idx]))
        for k, idx in np.argwhere(states < xmin):
            rows.append((E[k][idx], xmin[idx] - states[k, idx]))

        m = len(rows)
        du_lo = np.maximum((p.u_min - inputs).ravel(), -delta)
        du_hi = np.minimum((p.u_max - inputs).ravel(), delta)
        if m == 0:
            # no active soft constraints: try the unconstrained Newton step,
            # exact whenever it already respects the box
            du_free = -np.linalg.solve(H, g)
            if np.all(du_free > du_lo) and np.all(du_free < du_hi):
                du = du_free
            else:
                du = _box_qp(H, g, du_lo, du_hi)
        else:
            du = _soft_qp(H, g, rows, du_lo, du_hi, cfg.slack_weight)
            if du is None:
                break
        # stationarity: a vanishing QP step on a feasible iterate is optimal
        if float(np.max(np.abs(du))) < cfg.step_tol:
            dmax, cbf_v, bv = _max_violation(states, inputs, obstacles, cbf_cfg, cfg, p)
            if max(dmax, cbf_v, bv) < cfg.violation_tol:
                status = "converged"
                break

        # --- backtracking line search on the L1 merit; the full step usually
        # wins, so try it alone first and batch the backtracks only on reject
        du_mat = du.reshape(N, 4)
        alpha = 1.0
        u_new = np.clip(inputs + du_mat, p.u_min, p.u_max)
        x_new = _rollout(x0, u_new, cfg.dt, p)
        merit_new = _merit(x_new, u_new, refs, obstacles, weights, cbf_cfg, cfg, p)
        step_taken = merit_new <= merit_prev + 1e-12
        if not step_taken:
            alphas = (0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125)
            u_cand = np.clip(
                inputs[None] + np.asarray(alphas)[:, None, None] * du_mat,
                p.u_min,
                p.u_max,
            )
            x_cand = _rollout_batch(x0, u_cand, cfg.dt, p)
            for a_idx, alpha in enumerate(alphas):
                u_new = u_cand[a_idx]
                x_new = x_cand[a_idx]
                merit_new = _merit(
                    x_new, u_new, refs, obstacles, weights, cbf_cfg, cfg, p
                )
                if merit_new <= merit_prev + 1e-12:
                    step_taken = True
                    break
        if not step_taken:
            # linearization not trusted at this radius; shrink and retry
            delta *= 0.25
            if delta < 1e-3:
                break
            continue
        if alpha == 1.0:
            delta = min(2.0 * delta, cfg.du_max)
        step_norm = float(np.max(np.abs(u_new - inputs)))
        improvement = merit_prev - merit_new
        states, inputs, merit_prev = x_new, u_new, merit_new

        dmax, cbf_v, bv = _max_violation(states, inputs, obstacles, cbf_cfg, cfg, p)
        small_step = step_norm < cfg.step_tol
        flat = improvement <= cfg.cost_tol * (1.0 + abs(merit_new))
        if (small_step or flat) and max(dmax, cbf_v, bv) < cfg.violation_tol:
            status = "converged"
            break

    dmax, cbf_v, bv = _max_violation(states, inputs, obstacles, cbf_cfg, cfg, p)
    if status != "converged" and max(cbf_v, bv) > cfg.violation_tol:
        status = "infeasible-relaxed"
    cost = total_cost(states, inputs, refs, weights)
    return OcpSolution(
        states=states,
        inputs=inputs,
        cost=cost,
        max_cbf_violation=cbf_v,
        iterations=iterations,
        status=status,
    )


class NmpcController:
    """Stateful wrapper: warm starts each solve from the previous solution
    (hover on the first call) and returns the first input.

    The control rate usually exceeds the horizon stage rate, so the warm
    start is shifted by one stage only once a full stage of simulated time
    has elapsed, not on every call."""

    def __init__(
        self,
        weights: CostWeights,
        cbf_cfg: CbfConfig,
        ocp_cfg: OcpConfig,
        params: QuadrotorParams,
    ):
        self.weights = weights
        self.cbf_cfg = cbf_cfg
        self.ocp_cfg = ocp_cfg
        self.params = params
        self.previous: OcpSolution | None = None
        self._horizon_anchor = 0.0

    def control(
        self, x0, refs: HorizonReference, obstacles, t: float = 0.0
    ) -> OcpSolution:
        warm = self.previous
        if warm is None:
            self._horizon_anchor = t
        else:
            shift = int((t - self._horizon_anchor) / self.ocp_cfg.dt)
            if shift > 0:
                u = np.asarray(warm.inputs)
                u = np.vstack([u[shift:], np.tile(u[-1:], (min(shift, len(u)), 1))])
                warm = dataclasses.replace(warm, inputs=u)
                self._horizon_anchor += shift * self.ocp_cfg.dt
        sol = solve_ocp(
            x0,
            refs,
            obstacles,
            self.weights,
            self.cbf_cfg,
            self.ocp_cfg,
            self.params,
            warm_start=warm,
        )
        self.previous = sol
        return sol
