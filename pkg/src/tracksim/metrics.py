"""Run-level summary metrics computed from a RunLog.

Pure functions of the log; the same log always yields the same numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dynamics import G_T, QuadrotorParams
from .geometry import pitch_of, quat_to_matrix
from .world import RunLog

MPS_TO_KMH = 3.6


@dataclass(frozen=True)
class RunMetrics:
    duration: float  # s
    mean_speed_kmh: float
    max_speed_kmh: float
    mean_accel: float  # commanded net acceleration magnitude, m/s^2
    max_accel: float
    mean_pitch_deg: float
    max_pitch_deg: float
    mean_rel_dist: float  # m
    min_rel_dist: float
    d_safe: float  # m, configured standoff
    detection_rate_pct: float  # accepted detections / perception ticks, %
    min_clearance: float  # m, to obstacle surfaces
    cbf_violations: int  # physics ticks with clearance < safe radius
    mean_solve_ms: float
    max_solve_ms: float
    nmpc_converged_rate: float

    def __post_init__(self):
        if not 0.0 <= self.detection_rate_pct <= 100.0:
            raise ValueError("detection rate must be a percentage")
        if self.min_rel_dist > self.mean_rel_dist + 1e-9:
            raise ValueError("min relative distance cannot exceed the mean")


def _commanded_accel(q: np.ndarray, u: np.ndarray, params: QuadrotorParams) -> np.ndarray:
    """|thrust/m * b_z + g| per tick: the net acceleration the commanded
    motor inputs ask for at the logged attitude."""
    tau = params.k_tau * np.sum(u * u, axis=1)
    bz = np.stack([quat_to_matrix(qi)[:, 2] for qi in q])
    a = bz * (tau / params.m)[:, None] + G_T
    return np.linalg.norm(a, axis=1)


def compute_metrics(
    log: RunLog,
    params: QuadrotorParams | None = None,
    d_safe: float = 8.0,
    safe_radius: float = 0.3,
) -> RunMetrics:
    if not log.truth:
        raise ValueError("empty run log")
    params = params or QuadrotorParams()
    truth = np.asarray(log.truth, dtype=float)
    t = truth[:, 0]
    v = truth[:, 4:7]
    speed = np.linalg.norm(v, axis=1)
    q = truth[:, 7:11]
    u = truth[:, 20:24]
    pitch = np.abs(np.degrees([pitch_of(qi) for qi in q]))
    rel = truth[:, 17]
    clearance = truth[:, 19]
    accel = _commanded_accel(q, u, params)

    if log.perception:
        detected = np.array([float(r[1]) for r in log.perception])
        det_rate = 100.0 * float(np.mean(detected))
    else:
        det_rate = 0.0

    if log.control:
        wall = np.array([float(r[5]) for r in log.control])
        conv = float(np.mean([1.0 if r[3] == "converged" else 0.0 for r in log.control]))
        mean_ms, max_ms = float(np.mean(wall)), float(np.max(wall))
    else:
        mean_ms = max_ms = conv = 0.0

    return RunMetrics(
        duration=float(t[-1] - t[0]),
        mean_speed_kmh=float(np.mean(speed)) * MPS_TO_KMH,
        max_speed_kmh=float(np.max(speed)) * MPS_TO_KMH,
        mean_accel=float(np.mean(accel)),
        max_accel=float(np.max(accel)),
        mean_pitch_deg=float(np.mean(pitch)),
        max_pitch_deg=float(np.max(pitch)),
        mean_rel_dist=float(np.mean(rel)),
        min_rel_dist=float(np.min(rel)),
        d_safe=d_safe,
        detection_rate_pct=det_rate,
        min_clearance=float(np.min(clearance)),
        cbf_violations=int(np.sum(clearance < safe_radius)),
        mean_solve_ms=mean_ms,
        max_solve_ms=max_ms,
        nmpc_converged_rate=conv,
    )


def metrics_row(m: RunMetrics) -> dict:
    return {f.name: getattr(m, f.name) for f in fields(RunMetrics)}


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Deterministic CSV: fixed column order and float formatting so the
    same run writes byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt_cell(v) for v in row])


def write_run_logs(log: RunLog, outdir) -> None:
    outdir = Path(outdir)
    write_csv(outdir / "truth.csv", RunLog.TRUTH_COLUMNS, log.truth)
    write_csv(outdir / "estimator.csv", RunLog.ESTIMATOR_COLUMNS, log.estimator)
    write_csv(outdir / "perception.csv", RunLog.PERCEPTION_COLUMNS, log.perception)
    write_csv(outdir / "control.csv", RunLog.CONTROL_COLUMNS, log.control)
    write_csv(outdir / "obstacles.csv", RunLog.OBSTACLE_COLUMNS, log.obstacle_points)


def write_metrics(m: RunMetrics, path) -> None:
    row = metrics_row(m)
    write_csv(path, list(row.keys()), [list(row.values())])
