"""Error-state unscented Kalman filter fusing high-rate IMU prediction with
asynchronous target-relative vision updates.

Estimated: position, velocity, attitude (target frame), accelerometer and
gyroscope biases. The error state is 15-dimensional with the attitude error
as a body-side tangent perturbation, so the nominal quaternion stays unit
norm. Angular velocity is passed through from the bias-corrected gyro.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import quat_mul, quat_normalize

G_T = np.array([0.0, 0.0, -9.81])

# scaled unscented transform parameters
UT_ALPHA = 1e-3
UT_BETA = 2.0
UT_KAPPA = 0.0

ERR_DIM = 15  # [dp, dv, dtheta, db_accel, db_gyro]

GATE_QUANTILE = 0.997
_GATE_THRESHOLD = float(chi2.ppf(GATE_QUANTILE, df=6))
# covariance growth applied on each gated rejection so that a persistently
# rejecting filter widens its own gate instead of dead-reckoning forever
GATE_REJECT_INFLATION = 1.5


class CovarianceError(RuntimeError):
    """Covariance could not be reconditioned to positive definite."""


@dataclass(frozen=True)
class UkfNoiseConfig:
    sigma_accel: tuple = (0.1, 0.1, 1.0)  # m/s^2, body axes
    sigma_gyro: tuple = (0.2, 0.2, 0.2)  # rad/s
    sigma_bias_accel: tuple = (0.1, 0.1, 0.1)  # m/s^2 / sqrt(s)
    sigma_bias_gyro: tuple = (0.1, 0.1, 0.1)  # rad/s / sqrt(s)
    sigma_meas_pos: tuple = (0.01, 0.01, 0.001)  # m
    sigma_meas_quat: float = 0.0001  # per quaternion component

    def __post_init__(self):
        vals = (
            list(self.sigma_accel)
            + list(self.sigma_gyro)
            + list(self.sigma_bias_accel)
            + list(self.sigma_bias_gyro)
            + list(self.sigma_meas_pos)
            + [self.sigma_meas_quat]
        )
        if any(v <= 0 for v in vals):
            raise ValueError("all noise parameters must be strictly positive")

    @property
    def sigma_meas_tangent(self) -> float:
        # a small quaternion component perturbation of eps corresponds to a
        # rotation-vector perturbation of 2*eps
        return 2.0 * self.sigma_meas_quat


@dataclass
class ImuSample:
    accel: np.ndarray  # specific force, body, m/s^2
    gyro: np.ndarray  # rad/s
    timestamp: float


@dataclass
class VisionMeasurement:
    p_T_meas: np.ndarray
    q_meas: np.ndarray  # wxyz
    timestamp: float


@dataclass
class EstimatorState:
    p_T: np.ndarray
    v_T: np.ndarray
    q_TB: np.ndarray
    omega_B: np.ndarray
    bias_accel: np.ndarray
    bias_gyro: np.ndarray
    covariance: np.ndarray  # 15 x 15

    def copy(self) -> "EstimatorState":
        return EstimatorState(
            self.p_T.copy(),
            self.v_T.copy(),
            self.q_TB.copy(),
            self.omega_B.copy(),
            self.bias_accel.copy(),
            self.bias_gyro.copy(),
            self.covariance.copy(),
        )

    def state13(self) -> np.ndarray:
        return np.concatenate([self.p_T, self.v_T, self.q_TB, self.omega_B])


def initial_state(p_T, v_T=(0, 0, 0), q_TB=(1, 0, 0, 0), p0=None) -> EstimatorState:
    if p0 is None:
        p0 = np.diag(
            np.concatenate(
                [np.full(3, 0.1), np.full(3, 0.1), np.full(3, 0.05), np.full(6, 0.01)]
            )
        )
    return EstimatorState(
        p_T=np.asarray(p_T, dtype=float).copy(),
        v_T=np.asarray(v_T, dtype=float).copy(),
        q_TB=quat_normalize(q_TB),
        omega_B=np.zeros(3),
        bias_accel=np.zeros(3),
        bias_gyro=np.zeros(3),
        covariance=np.asarray(p0, dtype=float).copy(),
    )


# ---- batched quaternion helpers (arrays of shape (..., 4), wxyz) ----


def _bq_mul(q1, q2):
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def _bq_exp(theta):
    a = np.linalg.norm(theta, axis=-1, keepdims=True)
    small = a < 1e-12
    safe = np.where(small, 1.0, a)
    axis = theta / safe
    q = np.concatenate([np.cos(0.5 * a), np.sin(0.5 * a) * axis], axis=-1)
    q0 = np.concatenate([np.ones_like(a), 0.5 * theta], axis=-1)
    q = np.where(small, q0, q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _bq_log(q):
    q = np.where(q[..., :1] < 0, -q, q)
    vn = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(vn, q[..., :1])
    small = vn < 1e-12
    safe = np.where(small, 1.0, vn)
    return np.where(small, 2.0 * q[..., 1:], angle * q[..., 1:] / safe)


def _bq_rotate(q, v):
    w = q[..., :1]
    qv = q[..., 1:]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def _bq_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


# ---- unscented transform machinery ----


def _ut_weights(n: int):
    lam = UT_ALPHA**2 * (n + UT_KAPPA) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1.0 - UT_ALPHA**2 + UT_BETA)
    return lam, wm, wc


def _ensure_spd(P: np.ndarray) -> np.ndarray:
    """Symmetrize; add escalating jitter until Cholesky succeeds."""
    P = 0.5 * (P + P.T)
    jitter = 1e-9
    for _ in range(8):
        try:
            np.linalg.cholesky(P)
            return P
        except np.linalg.LinAlgError:
            P = P + jitter * np.eye(P.shape[0])
            jitter *= 10.0
    raise CovarianceError("covariance reconditioning failed")


def _sigma_points(P: np.ndarray, lam: float):
    n = P.shape[0]
    S = np.linalg.cholesky((n + lam) * P)
    pts = np.zeros((2 * n + 1, n))
    pts[1 : n + 1] = S.T
    pts[n + 1 :] = -S.T
    return pts


def _inject(state: EstimatorState, err: np.ndarray):
    """Apply error-state sigma points (M, 15) to the nominal state."""
    p = state.p_T + err[:, 0:3]
    v = state.v_T + err[:, 3:6]
    q = _bq_mul(np.broadcast_to(state.q_TB, (err.shape[0], 4)), _bq_exp(err[:, 6:9]))
    ba = state.bias_accel + err[:, 9:12]
    bg = state.bias_gyro + err[:, 12:15]
    return p, v, q, ba, bg


def _process_noise(q_TB, noise: UkfNoiseConfig, dt: float) -> np.ndarray:
    """Discrete process covariance: IMU noise through the strapdown model
    plus bias random walks."""
    from .geometry import quat_to_matrix

    R = quat_to_matrix(q_TB)
    Sa = R @ np.diag(np.square(noise.sigma_accel)) @ R.T
    Q = np.zeros((ERR_DIM, ERR_DIM))
    Q[0:3, 0:3] = 0.25 * dt**4 * Sa
    Q[0:3, 3:6] = 0.5 * dt**3 * Sa
    Q[3:6, 0:3] = 0.5 * dt**3 * Sa
    Q[3:6, 3:6] = dt**2 * Sa
    Q[6:9, 6:9] = dt**2 * np.diag(np.square(noise.sigma_gyro))
    Q[9:12, 9:12] = dt * np.diag(np.square(noise.sigma_bias_accel))
    Q[12:15, 12:15] = dt * np.diag(np.square(noise.sigma_bias_gyro))
    return Q


def predict(
    state: EstimatorState, imu: ImuSample, dt: float, noise: UkfNoiseConfig
) -> EstimatorState:
    """Propagate mean and covariance through the strapdown model."""
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must be in (0, 0.1]")
    P = _ensure_spd(state.covariance)
    lam, wm, wc = _ut_weights(ERR_DIM)
    pts = _sigma_points(P, lam)

    p, v, q, ba, bg = _inject(state, pts)
    accel = np.asarray(imu.accel, dtype=float)
    gyro = np.asarray(imu.gyro, dtype=float)

    a_T = _bq_rotate(q, accel - ba) + G_T
    p_n = p + v * dt + 0.5 * a_T * dt * dt
    v_n = v + a_T * dt
    q_n = _bq_mul(q, _bq_exp((gyro - bg) * dt))

    # retract about the propagated central point
    q_ref = q_n[0]
    dq = _bq_mul(np.broadcast_to(_bq_conj(q_ref), q_n.shape), q_n)
    err = np.concatenate(
        [p_n - p_n[0], v_n - v_n[0], _bq_log(dq), ba - ba[0], bg - bg[0]], axis=1
    )
    mean_err = wm @ err
    d = err - mean_err
    P_new = (wc[:, None] * d).T @ d + _process_noise(state.q_TB, noise, dt)
    P_new = 0.5 * (P_new + P_new.T)

    out = state.copy()
    out.p_T = p_n[0] + mean_err[0:3]
    out.v_T = v_n[0] + mean_err[3:6]
    out.q_TB = quat_normalize(quat_mul(q_ref, _bq_exp(mean_err[None, 6:9])[0]))
    out.bias_accel = ba[0] + mean_err[9:12]
    out.bias_gyro = bg[0] + mean_err[12:15]
    out.omega_B = gyro - out.bias_gyro
    out.covariance = P_new
    return out


def update_vision(
    state: EstimatorState, meas: VisionMeasurement, noise: UkfNoiseConfig
) -> tuple[EstimatorState, bool]:
    """Unscented measurement update with h(x) = (position, attitude).

    Returns (state, accepted). Measurements beyond the chi-square gate are
    rejected; each rejection inflates the covariance so the gate reopens
    after a run of rejections rather than locking the filter out.
    """
    p_meas = np.asarray(meas.p_T_meas, dtype=float)
    q_meas = quat_normalize(meas.q_meas)
    if not np.all(np.isfinite(p_meas)):
        raise ValueError("non-finite measurement")

    P = _ensure_spd(state.covariance)
    lam, wm, wc = _ut_weights(ERR_DIM)
    pts = _sigma_points(P, lam)
    p, v, q, ba, bg = _inject(state, pts)

    # predicted measurement in (position, tangent about the nominal attitude)
    dq = _bq_mul(np.broadcast_to(_bq_conj(state.q_TB), q.shape), q)
    Z = np.concatenate([p, _bq_log(dq)], axis=1)  # (M, 6)
    z_pred = wm @ Z
    dz = Z - z_pred

    R_meas = np.diag(
        np.concatenate(
            [
                np.square(noise.sigma_meas_pos),
                np.full(3, noise.sigma_meas_tangent**2),
            ]
        )
    )
    S = (wc[:, None] * dz).T @ dz + R_meas
    Pxz = (wc[:, None] * pts).T @ dz

    z_obs = np.concatenate(
        [p_meas, _bq_log(quat_mul(_bq_conj(state.q_TB), q_meas)[None])[0]]
    )
    innov = z_obs - z_pred
    S_inv = np.linalg.inv(S)
    if float(innov @ S_inv @ innov) > _GATE_THRESHOLD:
        out = state.copy()
        out.covariance = GATE_REJECT_INFLATION * P
        return out, False

    K = Pxz @ S_inv
    corr = K @ innov
    P_new = P - K @ S @ K.T
    P_new = _ensure_spd(P_new)

    out = state.copy()
    out.p_T = state.p_T + corr[0:3]
    out.v_T = state.v_T + corr[3:6]
    out.q_TB = quat_normalize(quat_mul(state.q_TB, _bq_exp(corr[None, 6:9])[0]))
    out.bias_accel = state.bias_accel + corr[9:12]
    out.bias_gyro = state.bias_gyro + corr[12:15]
    out.covariance = P_new
    return out, True


def measurement_from_detection(det_box, z_est, k, ext, att_imu, timestamp=0.0):
    """Compose back-projection with the frame chain into a vision measurement.

    det_box: full-frame BBox of the detection; z_est: TargetDepthEstimate.
    Returns None when the depth estimate is degenerate.
    """
    from .geometry import back_project, body_to_target, camera_to_body, UnitQuaternion

    if z_est is None or z_est.z <= 0:
        return None
    p_c = back_project((det_box.x, det_box.y), z_est.z, k)
    p_b = camera_to_body(p_c, ext)
    att = att_imu if isinstance(att_imu, UnitQuaternion) else UnitQuaternion(att_imu)
    p_t = body_to_target(p_b, att)
    return VisionMeasurement(
        p_T_meas=p_t.coords, q_meas=att.wxyz.copy(), timestamp=timestamp
    )
