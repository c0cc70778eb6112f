"""Scenario files: TOML in, validated `world.Scenario` out.

Every validation failure raises ScenarioError naming the offending key so
the CLI can exit with a actionable message (exit code 1).
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path

import numpy as np

from . import nmpc, reference, zoom
from .depth import StereoGeometry
from .dynamics import QuadrotorParams
from .geometry import CameraIntrinsics, T_BC, RigidTransform
from .obstacles import RobotExtent
from .ukf import UkfNoiseConfig
from .world import (
    Box,
    Cylinder,
    Scenario,
    SensorNoise,
    TargetModel,
    TargetScript,
    WorldModel,
)

# base intrinsics: 640 x 480 calibration, scaled to the render resolution
BASE_INTRINSICS = CameraIntrinsics(
    fx=325.2, fy=430.9, cx=323.1, cy=246.9, width=640, height=480
)
DEFAULT_BASELINE = 0.095  # m


class ScenarioError(ValueError):
    """Configuration problem; message names the offending key."""


def _get(tbl: dict, key: str, typ, default=None, *, where: str = ""):
    path = f"{where}.{key}" if where else key
    if key not in tbl:
        if default is not None or default == 0 or default is False:
            return default
        raise ScenarioError(f"missing required key '{path}'")
    v = tbl[key]
    if typ is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, typ):
        raise ScenarioError(f"key '{path}' must be {typ.__name__}, got {type(v).__name__}")
    return v


def _vec(tbl: dict, key: str, n: int, default=None, *, where: str = ""):
    path = f"{where}.{key}" if where else key
    if key not in tbl:
        if default is not None:
            return np.asarray(default, dtype=float)
        raise ScenarioError(f"missing required key '{path}'")
    v = tbl[key]
    if not isinstance(v, list) or len(v) != n or not all(
        isinstance(x, (int, float)) for x in v
    ):
        raise ScenarioError(f"key '{path}' must be a list of {n} numbers")
    return np.asarray(v, dtype=float)


def _build(cls, tbl: dict, where: str, **fixed):
    try:
        return cls(**fixed, **tbl)
    except TypeError as e:
        raise ScenarioError(f"section [{where}]: {e}") from None
    except ValueError as e:
        raise ScenarioError(f"section [{where}]: {e}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(f"{path}: invalid TOML: {e}") from None
    try:
        return scenario_from_dict(raw, name=path.stem)
    except ScenarioError as e:
        raise ScenarioError(f"{path}: {e}") from None


def scenario_from_dict(raw: dict, name: str = "scenario") -> Scenario:
    run = raw.get("run", {})
    duration = _get(run, "duration", float, 10.0, where="run")
    if duration <= 0:
        raise ScenarioError("key 'run.duration' must be positive")
    seed = _get(run, "seed", int, 0, where="run")

    # ---- world
    wtbl = raw.get("world", {})
    boxes = []
    for i, b in enumerate(wtbl.get("boxes", [])):
        boxes.append(
            Box(
                tuple(_vec(b, "center", 3, where=f"world.boxes[{i}]")),
                tuple(_vec(b, "size", 3, where=f"world.boxes[{i}]")),
            )
        )
    cylinders = []
    for i, c in enumerate(wtbl.get("cylinders", [])):
        w = f"world.cylinders[{i}]"
        cx, cy = _vec(c, "center", 2, where=w)
        cylinders.append(
            Cylinder(
                (float(cx), float(cy)),
                _get(c, "radius", float, where=w),
                _get(c, "zmin", float, 0.0, where=w),
                _get(c, "zmax", float, 10.0, where=w),
            )
        )
    world = WorldModel(
        tuple(boxes), tuple(cylinders), _get(wtbl, "ground", bool, True, where="world")
    )

    # ---- target
    ttbl = raw.get("target", {})
    if "waypoints" in ttbl:
        wp = ttbl["waypoints"]
        if not isinstance(wp, list) or any(
            not isinstance(r, list) or len(r) != 4 for r in wp
        ):
            raise ScenarioError("key 'target.waypoints' must be a list of [t, x, y, z] rows")
        arr = np.asarray(wp, dtype=float)
        try:
            script = TargetScript(arr[:, 0], arr[:, 1:])
        except ValueError as e:
            raise ScenarioError(f"key 'target.waypoints': {e}") from None
    else:
        script = TargetScript.stationary(_vec(ttbl, "position", 3, where="target"))
    tmodel = TargetModel(
        _get(ttbl, "width", float, 0.8, where="target"),
        _get(ttbl, "height", float, 1.6, where="target"),
    )

    # ---- camera / stereo
    ctbl = raw.get("camera", {})
    width = _get(ctbl, "width", int, 160, where="camera")
    height = _get(ctbl, "height", int, 120, where="camera")
    try:
        k = BASE_INTRINSICS.scaled(width, height)
    except ValueError as e:
        raise ScenarioError(f"section [camera]: {e}") from None
    stbl = raw.get("stereo", {})
    stereo = StereoGeometry(
        f=k.fx, B=_get(stbl, "baseline", float, DEFAULT_BASELINE, where="stereo")
    )

    # ---- noise
    ntbl = dict(raw.get("noise", {}))
    imu_tbl = ntbl.pop("imu", {})
    imu = _build(UkfNoiseConfig, _tupleize(imu_tbl), "noise.imu")
    noise = _build(SensorNoise, ntbl, "noise", imu=imu)

    # ---- robot
    rtbl = raw.get("robot", {})
    start = _vec(rtbl, "start", 3, where="robot")
    yaw = rtbl.get("yaw")
    if yaw is not None and not isinstance(yaw, (int, float)):
        raise ScenarioError("key 'robot.yaw' must be a number")
    params = _build(
        QuadrotorParams, _tupleize(rtbl.get("params", {})), "robot.params"
    )

    # ---- controller / estimator configs
    weights = _build(nmpc.CostWeights, _tupleize(raw.get("weights", {})), "weights")
    cbf = _build(nmpc.CbfConfig, raw.get("cbf", {}), "cbf")
    ocp = _build(nmpc.OcpConfig, _tupleize(raw.get("ocp", {})), "ocp")
    ref_cfg = _build(reference.ReferenceConfig, raw.get("reference", {}), "reference")
    ztbl = dict(raw.get("zoom", {}))
    zoom_enabled = bool(ztbl.pop("enabled", True))
    zoom_cfg = _build(zoom.ZoomConfig, ztbl, "zoom")
    extent = RobotExtent(
        _get(raw.get("robot_extent", {}), "width", float, 0.4, where="robot_extent"),
        _get(raw.get("robot_extent", {}), "height", float, 0.2, where="robot_extent"),
    )

    ptbl = raw.get("perception", {})
    align = tuple(_vec(ptbl, "disparity_align", 3, default=[0.0, 1.0, 0.0], where="perception"))
    depth_filter = _get(ptbl, "depth_filter", str, "mode", where="perception")
    if depth_filter not in ("mode", "mean", "center"):
        raise ScenarioError("key 'perception.depth_filter' must be mode, mean, or center")

    rates = raw.get("rates", {})
    sc = Scenario(
        duration=duration,
        seed=seed,
        world=world,
        target_script=script,
        target_model=tmodel,
        noise=noise,
        camera=k,
        stereo=stereo,
        extrinsics=T_BC,
        params=params,
        weights=weights,
        cbf=cbf,
        ocp=ocp,
        ref_cfg=ref_cfg,
        zoom_cfg=zoom_cfg,
        extent=extent,
        disparity_align=align,
        robot_start=start,
        robot_yaw=None if yaw is None else float(yaw),
        bin_width=_get(ptbl, "bin_width", float, 0.15, where="perception"),
        cell=_get(ptbl, "cell", int, 17, where="perception"),
        top_k=_get(ptbl, "top_k", int, 10, where="perception"),
        zoom_enabled=zoom_enabled,
        control_enabled=_get(run, "control", bool, True, where="run"),
        depth_filter=depth_filter,
        rate_physics=_get(rates, "physics", int, 1000, where="rates"),
        rate_imu=_get(rates, "imu", int, 200, where="rates"),
        rate_perception=_get(rates, "perception", int, 30, where="rates"),
        rate_control=_get(rates, "control", int, 50, where="rates"),
        name=name,
    )
    for r, key in (
        (sc.rate_physics, "rates.physics"),
        (sc.rate_imu, "rates.imu"),
        (sc.rate_perception, "rates.perception"),
        (sc.rate_control, "rates.control"),
    ):
        if r <= 0:
            raise ScenarioError(f"key '{key}' must be positive")
    if sc.rate_physics < sc.rate_imu:
        raise ScenarioError("key 'rates.physics' must be >= 'rates.imu'")
    return sc


def _tupleize(tbl: dict) -> dict:
    """TOML arrays arrive as lists; config dataclasses store tuples."""
    return {k: tuple(v) if isinstance(v, list) else v for k, v in tbl.items()}
