"""Time-to-collision obstacle map and high-risk collision point selection.

Pixels are (i, j) = (column/x, row/y). The selection pipeline is
grid-cell minima -> corridor filter -> top-K lowest TTC, then the surviving
pixels are lifted into the target frame for the CBF constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import DepthFrame
from .geometry import (
    TARGET,
    CameraIntrinsics,
    FramedPoint,
    RigidTransform,
    UnitQuaternion,
    pixel_rays,
)

V_FLOOR = 0.05  # m/s closing-speed floor; below it TTC is undefined


@dataclass
class TtcMap:
    values: np.ndarray  # H x W, seconds
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ObstaclePoint:
    position: FramedPoint  # target frame
    ttc: float
    source_pixel: tuple

    def __post_init__(self):
        self.position.require(TARGET)
        if not self.ttc > 0:
            raise ValueError("ttc must be positive")


@dataclass(frozen=True)
class RobotExtent:
    width: float = 0.4  # m, horizontal span
    height: float = 0.2  # m, vertical span

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("robot extent must be positive")

    @property
    def clearance_radius(self) -> float:
        return max(self.width, self.height)


def compute_ttc_map(
    d: DepthFrame, v_cam, k: CameraIntrinsics, v_floor: float = V_FLOOR
) -> TtcMap:
    """TTC per pixel: depth over the speed projected on the viewing ray."""
    rays = pixel_rays(k)
    closing = np.abs(rays @ np.asarray(v_cam, dtype=float))
    valid = d.valid & (closing >= v_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(valid, d.values / np.maximum(closing, 1e-30), np.inf)
    return TtcMap(ttc, valid)


def grid_min_select(t: TtcMap, cell: int) -> list[tuple[int, int]]:
    """One pixel per non-overlapping cell: the per-cell TTC argmin.

    Ties break to the row-major first occurrence. Returns (i, j) pairs in
    cell scan order.
    """
    if cell < 1:
        raise ValueError("cell size must be >= 1")
    H, W = t.shape
    vals = np.where(t.valid, t.values, np.inf)
    out = []
    for y0 in range(0, H, cell):
        for x0 in range(0, W, cell):
            block = vals[y0 : y0 + cell, x0 : x0 + cell]
            if not np.isfinite(block).any():
                continue
            flat = int(np.argmin(block))  # first minimum in row-major order
            by, bx = divmod(flat, block.shape[1])
            out.append((x0 + bx, y0 + by))
    return out


def corridor_filter(
    pixels, d: DepthFrame, k: CameraIntrinsics, ext: RobotExtent
) -> list[tuple[int, int]]:
    """Keep pixels whose offset from the principal point lies inside the
    robot's projected extent at that pixel's depth."""
    out = []
    for i, j in pixels:
        z = d.values[j, i]
        if z <= 0:
            out.append((i, j))  # zero depth: threshold diverges, keep
            continue
        if abs(i - k.cx) <= ext.width * k.fx / (2.0 * z) and abs(
            j - k.cy
        ) <= ext.height * k.fy / (2.0 * z):
            out.append((i, j))
    return out


def top_k(pixels, t: TtcMap, K: int) -> list[tuple[int, int]]:
    """The K pixels with the smallest TTC; ties prefer row-major order."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ranked = sorted(pixels, key=lambda p: (t.values[p[1], p[0]], p[1], p[0]))
    return ranked[:K]


def lift_points(
    pixels,
    d: DepthFrame,
    k: CameraIntrinsics,
    ext_cam_body: RigidTransform,
    att: UnitQuaternion,
    robot_p_t=None,
    ttc_map: TtcMap | None = None,
) -> list[ObstaclePoint]:
    """Back-project pixels and carry them through the camera->body->target chain.

    The chain q_TB (*) (q_BC (*) s_C + t_BC) yields the obstacle position
    relative to the robot expressed in target-frame axes; anchoring it at the
    target (the convention of the robot state p_T) additionally requires the
    robot position, passed as robot_p_t. Without it the returned points are
    robot-relative.
    """
    offset = np.zeros(3) if robot_p_t is None else np.asarray(robot_p_t, dtype=float)
    out = []
    for i, j in pixels:
        z = float(d.values[j, i])
        s_c = np.array([(i - k.cx) * z / k.fx, (j - k.cy) * z / k.fy, z])
        s_b = ext_cam_body.apply(s_c)
        s_t = att.rotate(s_b) + offset
        ttc = float(ttc_map.values[j, i]) if ttc_map is not None else np.inf
        out.append(
            ObstaclePoint(FramedPoint(s_t, TARGET), ttc=ttc, source_pixel=(i, j))
        )
    return out


def select_obstacles(
    d: DepthFrame,
    v_cam,
    k: CameraIntrinsics,
    ext: RobotExtent,
    ext_cam_body: RigidTransform,
    att: UnitQuaternion,
    robot_p_t,
    *,
    cell: int = 17,
    K: int = 10,
    exclude_box=None,
    v_floor: float = V_FLOOR,
) -> list[ObstaclePoint]:
    """Full selection pipeline for one frame.

    exclude_box (the current target detection) masks out the tracked target
    so it is never treated as an obstacle.
    """
    dvals = d.values
    dvalid = d.valid
    if exclude_box is not None:
        H, W = d.shape
        x0 = max(int(np.floor(exclude_box.x - exclude_box.w / 2)), 0)
        x1 = min(int(np.ceil(exclude_box.x + exclude_box.w / 2)), W)
        y0 = max(int(np.floor(exclude_box.y - exclude_box.h / 2)), 0)
        y1 = min(int(np.ceil(exclude_box.y + exclude_box.h / 2)), H)
        dvalid = dvalid.copy()
        dvalid[y0:y1, x0:x1] = False
        d = DepthFrame(dvals, dvalid)

    tmap = compute_ttc_map(d, v_cam, k, v_floor=v_floor)
    pixels = grid_min_select(tmap, cell)
    pixels = corridor_filter(pixels, d, k, ext)
    pixels = top_k(pixels, tmap, K)
    return lift_points(pixels, d, k, ext_cam_body, att, robot_p_t, ttc_map=tmap)
