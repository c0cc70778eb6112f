"""Command-line entry point: run scenarios, sweep parameters, plot runs.

Exit codes: 0 nominal, 1 configuration error, 2 safety violation
(clearance below the CBF safe radius), 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__, metrics as metmod, scenario as scmod, world as worldmod

OUTPUT_ROOT_ENV = "TRACKSIM_OUT"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SAFETY = 2
EXIT_NUMERICAL = 3

# CLI paths into the scenario TOML that cmd_sweep knows how to vary
SWEEP_PARAMS = {
    "depth_filter": ("perception", "depth_filter", str),
    "zoom": ("zoom", "enabled", lambda s: s.lower() in ("on", "true", "1")),
    "orbit_weight": ("weights", "orbit_weight", float),
    "d_safe": ("reference", "d_safe", float),
    "seed": ("run", "seed", int),
    "duration": ("run", "duration", float),
}


def _output_dir(arg: str | None, name: str) -> Path:
    if arg:
        return Path(arg)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / name


def _load(path, overrides: dict | None = None):
    tomllib = scmod.tomllib

    p = Path(path)
    if not p.exists():
        raise scmod.ScenarioError(f"scenario file not found: {p}")
    try:
        with open(p, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise scmod.ScenarioError(f"{p}: invalid TOML: {e}") from None
    for (section, key), value in (overrides or {}).items():
        raw.setdefault(section, {})[key] = value
    try:
        return scmod.scenario_from_dict(raw, name=p.stem)
    except scmod.ScenarioError as e:
        raise scmod.ScenarioError(f"{p}: {e}") from None


def _execute(sc, outdir: Path) -> int:
    """Run one scenario, write logs + summary, map outcome to an exit code."""
    try:
        log = worldmod.step_scenario(sc)
    except worldmod.NumericalAbort as e:
        outdir.mkdir(parents=True, exist_ok=True)
        metmod.write_csv(
            outdir / "abort_history.csv", worldmod.RunLog.TRUTH_COLUMNS, e.recent_rows
        )
        print(f"numerical abort: {e} (last ticks in {outdir/'abort_history.csv'})",
              file=sys.stderr)
        return EXIT_NUMERICAL
    m = metmod.compute_metrics(
        log, sc.params, d_safe=sc.ref_cfg.d_safe, safe_radius=sc.cbf.safe_radius
    )
    metmod.write_run_logs(log, outdir)
    metmod.write_metrics(m, outdir / "metrics.csv")
    print(f"run '{sc.name}': min clearance {m.min_clearance:.3f} m, "
          f"mean distance {m.mean_rel_dist:.2f} m, "
          f"detection rate {m.detection_rate_pct:.1f}%  -> {outdir}")
    if m.min_clearance < sc.cbf.safe_radius:
        print(f"safety violation: clearance {m.min_clearance:.3f} < "
              f"{sc.cbf.safe_radius}", file=sys.stderr)
        return EXIT_SAFETY
    return EXIT_OK


def cmd_run(scenario_path, seed: int | None = None, out: str | None = None) -> int:
    try:
        overrides = {("run", "seed"): seed} if seed is not None else None
        sc = _load(scenario_path, overrides)
    except scmod.ScenarioError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return _execute(sc, _output_dir(out, sc.name))


def cmd_sweep(scenario_path, param: str, values: list[str], out: str | None = None) -> int:
    if not values:
        print("config error: empty value list", file=sys.stderr)
        return EXIT_CONFIG
    if param not in SWEEP_PARAMS:
        print(f"config error: unknown sweep parameter '{param}' "
              f"(known: {', '.join(sorted(SWEEP_PARAMS))})", file=sys.stderr)
        return EXIT_CONFIG
    section, key, conv = SWEEP_PARAMS[param]
    rows = []
    worst = EXIT_OK
    for i, raw_value in enumerate(values):
        try:
            value = conv(raw_value)
            sc = _load(scenario_path, {(section, key): value})
        except (scmod.ScenarioError, ValueError) as e:
            print(f"config error: value '{raw_value}': {e}", file=sys.stderr)
            return EXIT_CONFIG
        sc.name = f"{sc.name}-{param}-{raw_value}"
        outdir = _output_dir(out, sc.name)
        code = _execute(sc, outdir)
        worst = max(worst, code)
        if code != EXIT_NUMERICAL:
            m = _read_metrics(outdir / "metrics.csv")
            rows.append([param, raw_value, *m])
    if rows:
        root = _output_dir(out, "sweep")
        header = ["param", "value"] + _metrics_columns()
        metmod.write_csv(root / f"sweep_{param}.csv", header, rows)
        print(f"sweep written to {root / f'sweep_{param}.csv'}")
    return worst


def _metrics_columns() -> list[str]:
    from dataclasses import fields

    return [f.name for f in fields(metmod.RunMetrics)]


def _read_metrics(path: Path) -> list[str]:
    import csv

    with open(path) as f:
        r = list(csv.reader(f))
    return r[1]


def cmd_plot(run_dir) -> int:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    truth_path = run_dir / "truth.csv"
    if not truth_path.exists():
        print(f"config error: no run log at {truth_path}", file=sys.stderr)
        return EXIT_CONFIG
    with open(truth_path) as f:
        rows = list(csv.DictReader(f))
    t = [float(r["t"]) for r in rows]
    dist = [float(r["rel_dist"]) for r in rows]
    speed = [
        (float(r["vx"]) ** 2 + float(r["vy"]) ** 2 + float(r["vz"]) ** 2) ** 0.5
        for r in rows
    ]
    clear = [float(r["clearance"]) for r in rows]

    for name, series, ylabel in (
        ("distance", dist, "relative distance [m]"),
        ("speed", speed, "speed [m/s]"),
        ("clearance", clear, "obstacle clearance [m]"),
    ):
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(t, series)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(run_dir / f"{name}.png", dpi=120)
        plt.close(fig)
    print(f"wrote distance.png, speed.png, clearance.png in {run_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tracksim", description="closed-loop target-tracking simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)

    p_sweep = sub.add_parser("sweep", help="run a scenario across parameter values")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out", default=None)

    p_plot = sub.add_parser("plot", help="plot a finished run directory")
    p_plot.add_argument("run_dir")

    sub.add_parser("version", help="print the package version")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.scenario, args.seed, args.out)
    if args.command == "sweep":
        values = [v for v in args.values.split(",") if v != ""]
        return cmd_sweep(args.scenario, args.param, values, args.out)
    if args.command == "plot":
        return cmd_plot(args.run_dir)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
