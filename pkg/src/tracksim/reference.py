"""Reference generation: goal shifting onto the safety cylinder, ramp
blending from the engage position, yaw centering, and horizon assembly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, quat_from_yaw

HORIZONTAL_EPS = 1e-6


class DegenerateDirectionError(ValueError):
    """Robot is (numerically) directly above the target; the horizontal
    line-of-sight direction is undefined."""


@dataclass(frozen=True)
class ReferenceConfig:
    d_safe: float = 8.0  # m, lateral standoff radius
    ramp_duration: float = 1.0  # s

    def __post_init__(self):
        if not (self.d_safe > 0 and self.ramp_duration > 0):
            raise ValueError("d_safe and ramp_duration must be positive")


@dataclass(frozen=True)
class HorizonReference:
    """N identical stage references plus a terminal one (N+1 states of 13)."""

    states: np.ndarray  # (N+1, 13)

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1


def shift_goal(p_T, cfg: ReferenceConfig) -> np.ndarray:
    """Project the line-of-sight direction onto the d_safe cylinder (z = 0)."""
    p = np.asarray(p_T, dtype=float)
    r = float(np.hypot(p[0], p[1]))
    if r < HORIZONTAL_EPS:
        raise DegenerateDirectionError("robot is directly above the target")
    return np.array([cfg.d_safe * p[0] / r, cfg.d_safe * p[1] / r, 0.0])


def ramp_alpha(t: float, cfg: ReferenceConfig) -> tuple[float, float]:
    """(horizontal, vertical) blend weights: quadratic and linear decay."""
    s = np.clip(t / cfg.ramp_duration, 0.0, 1.0)
    return float((1.0 - s) ** 2), float(1.0 - s)


def blend_ramp(goal, current, t: float, cfg: ReferenceConfig) -> np.ndarray:
    """Blend from the engage position toward the shifted goal over the ramp."""
    if t < 0:
        raise ValueError("time since engage must be >= 0")
    goal = np.asarray(goal, dtype=float)
    current = np.asarray(current, dtype=float)
    ah, av = ramp_alpha(t, cfg)
    a = np.array([ah, ah, av])
    return a * current + (1.0 - a) * goal


def yaw_reference(psi: float, det_x: float, k: CameraIntrinsics):
    """Yaw that would center the target column det_x, plus its quaternion."""
    psi_bar = psi - float(np.arctan((det_x - k.cx) / k.fx))
    return psi_bar, quat_from_yaw(psi_bar)


class ReferenceGenerator:
    """Stateful assembly of the horizon reference.

    Holds the last valid reference through degenerate directions and
    detection gaps; at startup with no history the direction defaults to +x.
    """

    def __init__(self, cfg: ReferenceConfig, k: CameraIntrinsics, N: int = 10):
        if N < 1:
            raise ValueError("horizon length must be >= 1")
        self.cfg = cfg
        self.k = k
        self.N = N
        self.engage_position = None
        self.engage_time = None
        self._last_goal = None
        self._last_yaw_q = None  # held yaw; current yaw until first detection

    def build(self, p_T, psi: float, det_x: float | None, t: float) -> HorizonReference:
        """Reference for the current tick.

        det_x is the detected target column in full-frame pixels, or None on
        a miss (the previous yaw reference is then held).
        """
        p = np.asarray(p_T, dtype=float)
        if self.engage_position is None:
            self.engage_position = p.copy()
            self.engage_time = t
        try:
            goal = shift_goal(p, self.cfg)
            self._last_goal = goal
        except DegenerateDirectionError:
            if self._last_goal is None:
                goal = np.array([self.cfg.d_safe, 0.0, 0.0])
                self._last_goal = goal
            else:
                goal = self._last_goal

        pos_ref = blend_ramp(goal, self.engage_position, t - self.engage_time, self.cfg)

        if det_x is not None:
            _, q_yaw = yaw_reference(psi, det_x, self.k)
            self._last_yaw_q = q_yaw
        elif float(np.hypot(p[0], p[1])) >= HORIZONTAL_EPS:
            # no detection: point the camera along the estimated bearing so
            # the target re-enters the frame instead of staying just outside
            self._last_yaw_q = quat_from_yaw(float(np.arctan2(-p[1], -p[0])))
        elif self._last_yaw_q is None:
            self._last_yaw_q = quat_from_yaw(psi)
        q_yaw = self._last_yaw_q

        stage = np.zeros(13)
        stage[:3] = pos_ref
        stage[6:10] = q_yaw
        return HorizonReference(np.tile(stage, (self.N + 1, 1)))
