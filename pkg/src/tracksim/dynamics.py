"""Quadrotor rigid-body model in the target frame, motor mixing, and RK4 stepping.

State layout (13): p (0:3), v (3:6), q as w,x,y,z (6:10), omega body (10:13).
Motor commands are rotor-speed units: thrust and torques are quadratic in u.

All dynamics functions accept batched arrays (leading dimensions broadcast),
which keeps finite-difference sensitivity evaluation in the solver cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81
G_T = np.array([0.0, 0.0, -GRAVITY])


@dataclass(frozen=True)
class QuadrotorParams:
    m: float = 1.3
    J: tuple = (0.01, 0.01, 0.02)
    # u = u_max on all motors gives thrust-to-weight 4: k_tau = 4*m*g / (4*u_max^2)
    k_tau: float = 4.0 * 1.3 * GRAVITY / (4.0 * 8.0**2)
    k_mu: float = 0.003
    l: float = 0.125
    u_min: float = 0.05
    u_max: float = 8.0
    g: float = GRAVITY

    def __post_init__(self):
        if self.m <= 0 or self.l <= 0 or self.k_tau <= 0 or self.k_mu <= 0:
            raise ValueError("physical parameters must be positive")
        if any(j <= 0 for j in self.J):
            raise ValueError("inertia must be positive")
        if not self.u_min < self.u_max:
            raise ValueError("motor bounds must be ordered")

    @property
    def hover_input(self) -> np.ndarray:
        """Per-motor command producing thrust m*g with zero torque."""
        u = np.sqrt(self.m * self.g / (4.0 * self.k_tau))
        return np.full(4, u)


def check_input_bounds(u, p: QuadrotorParams):
    u = np.asarray(u, dtype=float)
    if np.any(u < p.u_min - 1e-12) or np.any(u > p.u_max + 1e-12):
        raise ValueError(f"motor command outside [{p.u_min}, {p.u_max}]")
    return u


def motor_mixing(u, p: QuadrotorParams):
    """Motor commands -> (collective thrust, body torque). X configuration."""
    u = np.asarray(u, dtype=float)
    u2 = u * u
    s0, s1, s2, s3 = u2[..., 0], u2[..., 1], u2[..., 2], u2[..., 3]
    tau = p.k_tau * (s0 + s1 + s2 + s3)
    mu = np.stack(
        [
            p.k_tau * p.l * (s0 + s1 - s2 - s3),
            p.k_tau * p.l * (-s0 + s1 + s2 - s3),
            p.k_mu * (s0 - s1 + s2 - s3),
        ],
        axis=-1,
    )
    return tau, mu


def _continuous_dynamics_scalar(x, u, p: QuadrotorParams) -> np.ndarray:
    """Single-state fast path: plain float arithmetic beats tiny-array numpy."""
    _, _, _, vx, vy, vz, qw, qx, qy, qz, wx, wy, wz = (float(c) for c in x)
    s0, s1, s2, s3 = (float(c) * float(c) for c in u)
    tau_m = p.k_tau * (s0 + s1 + s2 + s3) / p.m
    jx, jy, jz = p.J
    ktl = p.k_tau * p.l
    return np.array(
        [
            vx,
            vy,
            vz,
            2.0 * (qx * qz + qw * qy) * tau_m,
            2.0 * (qy * qz - qw * qx) * tau_m,
            (1.0 - 2.0 * (qx * qx + qy * qy)) * tau_m - GRAVITY,
            0.5 * (-qx * wx - qy * wy - qz * wz),
            0.5 * (qw * wx + qy * wz - qz * wy),
            0.5 * (qw * wy - qx * wz + qz * wx),
            0.5 * (qw * wz + qx * wy - qy * wx),
            (ktl * (s0 + s1 - s2 - s3) - (wy * jz * wz - wz * jy * wy)) / jx,
            (ktl * (-s0 + s1 + s2 - s3) - (wz * jx * wx - wx * jz * wz)) / jy,
            (p.k_mu * (s0 - s1 + s2 - s3) - (wx * jy * wy - wy * jx * wx)) / jz,
        ]
    )


def continuous_dynamics(x, u, p: QuadrotorParams) -> np.ndarray:
    """Time derivative of the 13-state. Batched over leading dimensions."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1:
        return _continuous_dynamics_scalar(x, u, p)
    v = x[..., 3:6]
    qw, qx, qy, qz = x[..., 6], x[..., 7], x[..., 8], x[..., 9]
    w = x[..., 10:13]

    u2 = u * u
    s0, s1, s2, s3 = u2[..., 0], u2[..., 1], u2[..., 2], u2[..., 3]
    tau_m = p.k_tau * (s0 + s1 + s2 + s3) / p.m
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    jx, jy, jz = p.J

    out = np.empty(x.shape)
    out[..., 0:3] = v
    # v_dot = b_z * tau/m + g with b_z the third column of R(q)
    out[..., 3] = 2.0 * (qx * qz + qw * qy) * tau_m
    out[..., 4] = 2.0 * (qy * qz - qw * qx) * tau_m
    out[..., 5] = (1.0 - 2.0 * (qx * qx + qy * qy)) * tau_m - GRAVITY
    out[..., 6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[..., 7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[..., 8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[..., 9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    # J w_dot = mu - w x (J w)
    ktl = p.k_tau * p.l
    out[..., 10] = (ktl * (s0 + s1 - s2 - s3) - (wy * jz * wz - wz * jy * wy)) / jx
    out[..., 11] = (ktl * (-s0 + s1 + s2 - s3) - (wz * jx * wx - wx * jz * wz)) / jy
    out[..., 12] = (p.k_mu * (s0 - s1 + s2 - s3) - (wx * jy * wy - wy * jx * wx)) / jz
    return out


def rk4_step(x, u, dt: float, p: QuadrotorParams) -> np.ndarray:
    """Classic RK4 step; quaternion renormalized afterwards. Batched."""
    if not 0.0 < dt <= 0.2:
        raise ValueError("dt must be in (0, 0.2]")
    x = np.asarray(x, dtype=float)
    k1 = continuous_dynamics(x, u, p)
    k2 = continuous_dynamics(x + 0.5 * dt * k1, u, p)
    k3 = continuous_dynamics(x + 0.5 * dt * k2, u, p)
    k4 = continuous_dynamics(x + dt * k3, u, p)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    q = xn[..., 6:10]
    xn[..., 6:10] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return xn


def hover_state(p_T=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(13)
    x[:3] = p_T
    x[6] = 1.0
    return x
