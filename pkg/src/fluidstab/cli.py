"""fluidstab command line: analyze | nyquist | simulate | sweep <config>."""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .equilibrium import EquilibriumError
from .linear import FrequencyGrid, LinearizationError, NarrowGridWarning, Verdict, nyquist_scan, unit_loop
from .scenarios import AXES, ScenarioError, analyze, cross_validate, make_rng, sweep
from .simulate import (SimulationConfig, SimulationError, classify_trajectory, default_config,
                       simulate)

EXIT_HOLDS, EXIT_ERROR, EXIT_VIOLATED = 0, 1, 2


class CliError(Exception):
    pass


def parse_grid(text: str) -> list[float]:
    """'start:stop:step' (stop inclusive) or a comma list."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [start + i * step for i in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad --grid {text!r}: use start:stop:step or a comma list") from None


def _out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get("FLUIDSTAB_OUT_DIR") or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _analysis_opts(args, doc) -> dict:
    ana = dict(doc.analysis) if doc else {}
    for key, flag in (("omega_lo", args.omega_lo), ("omega_hi", args.omega_hi),
                      ("n_freq", args.n_freq), ("tolerance", args.tol)):
        if flag is not None:
            ana[key] = flag
    return ana


def _grid(ana: dict) -> FrequencyGrid:
    return FrequencyGrid(ana.get("omega_lo"), ana.get("omega_hi"), int(ana.get("n_freq", 10_000)))


def _print_equilibrium(res) -> None:
    topo, eq = res.topology, res.eq
    print(f"equilibrium (residual {eq.residual:.2e})")
    for j, s in enumerate(topo.sources):
        print(f"  source {s.id:>8}  w*={eq.w_star[j]:.6g}  x*={eq.x_star[j]:.6g}  q*={eq.q_star[j]:.6g}")
    for l, link in enumerate(topo.links):
        print(f"  link   {link.id:>8}  y*={eq.y_star[l]:.6g}  p*={eq.p_star[l]:.6g}  C={link.capacity:g}")


def cmd_analyze(args) -> int:
    doc = load_config(args.config)
    ana = _analysis_opts(args, doc)
    res = analyze(doc.topology, tol=float(ana.get("tolerance", 1e-10)))
    _print_equilibrium(res)
    print("conditions")
    for r in res.report.rows:
        print(f"  {r.source:>8}  {r.variant:<15} {r.label:<34} N_j={r.n_bottlenecks}  "
              f"value={r.value:.6g}  threshold={r.threshold:.6g}  margin={r.margin:.4f}  "
              f"a_j={r.a:.4g}{'' if r.necessary_ok else '  (a_j <= 0)'}")
    print(f"verdict: {res.report.verdict.value}")
    out = _out_dir(args) / "report.json"
    payload = res.report.to_dict()
    payload["equilibrium"] = {
        "w_star": res.eq.w_star.tolist(), "x_star": res.eq.x_star.tolist(),
        "y_star": res.eq.y_star.tolist(), "p_star": res.eq.p_star.tolist(),
        "q_star": res.eq.q_star.tolist(), "residual": res.eq.residual,
    }
    out.write_text(json.dumps(payload, indent=2))
    return EXIT_HOLDS if res.report.verdict is Verdict.HOLDS else EXIT_VIOLATED


def cmd_nyquist(args) -> int:
    if args.unit_loop is not None:
        doc, linsys = None, unit_loop(args.unit_loop)
    else:
        if args.config is None:
            raise CliError("nyquist needs a config path or --unit-loop T")
        doc = load_config(args.config)
        res = analyze(doc.topology, tol=float(_analysis_opts(args, doc).get("tolerance", 1e-10)))
        bad = [r.source for r in res.report.rows if not r.necessary_ok]
        if bad:
            raise CliError("necessary condition a_j > 0 fails for: " + ", ".join(bad))
        linsys = res.linsys
    ana = _analysis_opts(args, doc)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NarrowGridWarning)
        scan = nyquist_scan(linsys, _grid(ana))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    path = _out_dir(args) / "nyquist.csv"
    scan.write_csv(path)
    print(f"encirclements: {scan.encirclements}")
    for c in scan.crossings:
        print(f"  crossing locus {c.locus} at omega={c.omega:.8g}: {c.value.real:.9f}")
    left = scan.leftmost_crossing()
    if left is not None:
        print(f"leftmost real-axis crossing: {left.value.real:.9f}")
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    doc = load_config(args.config)
    topo = doc.topology
    res = analyze(topo, tol=float(_analysis_opts(args, doc).get("tolerance", 1e-10)))
    sim = doc.simulation
    delta = float(sim.get("perturbation", 0.05))
    seed = args.seed if args.seed is not None else sim.get("seed")
    if seed is not None:
        signs = make_rng(int(seed)).choice([-1.0, 1.0], size=len(res.topology.sources))
        delta = tuple(float(v) for v in delta * signs)
    base = default_config(res.topology, perturbation=delta)
    cfg = SimulationConfig(float(sim.get("step_s", base.step)), float(sim.get("horizon_s", base.horizon)),
                           delta, base.history_init, base.record_stride)
    problems = cfg.check(res.topology)
    if problems:
        raise SimulationError("; ".join(problems))
    traj = simulate(res.topology, res.eq, cfg)
    path = _out_dir(args) / "trajectory.csv"
    traj.write_csv(path)
    if traj.aborted_at is not None:
        print(f"error: NonFinite state, run aborted at t={traj.aborted_at:.6g} s", file=sys.stderr)
        return EXIT_ERROR
    if traj.floor_fraction > 0.01:
        print(f"warning: rates pinned at the floor for {100 * traj.floor_fraction:.1f}% of steps",
              file=sys.stderr)
    cls = classify_trajectory(traj)
    extra = " (limit-cycle-like)" if cls.limit_cycle_like else ""
    print(f"classification: {cls.kind.value}{extra}")
    print(f"envelope ratio (final/initial): {cls.envelope_ratio:.6g}")
    print(f"max |u| over final window: {traj.u[traj.t >= traj.t[-1] - 5 * traj.max_rtt].max():.3g}")
    print(f"wrote {path}")
    return 0


def cmd_sweep(args) -> int:
    if args.axis is None or args.grid is None:
        raise CliError("sweep needs --axis and --grid")
    if args.axis not in AXES:
        raise CliError(f"unknown axis {args.axis!r}; available axes: {', '.join(AXES)}")
    grid_values = parse_grid(args.grid)
    doc = load_config(args.config)
    ana = _analysis_opts(args, doc)
    freq = FrequencyGrid(ana.get("omega_lo"), ana.get("omega_hi"), int(ana.get("n_freq", 2000)))
    result = sweep(doc.topology, args.axis, grid_values,
                   evaluate=lambda topo: cross_validate(topo, grid=freq))
    out = _out_dir(args)
    result.write_csv(out / "sweep.csv")
    summary = result.summary()
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2))
    for p in result.points:
        r = p.record
        margin = "" if r.max_margin is None else f"{r.max_margin:.4f}"
        print(f"  {args.axis}={p.value:<10g} {r.verdict or '-':<19} margin={margin:<8} "
              f"enc={r.encirclements}  {r.trajectory or '-':<11} {r.flag.value}"
              + (f"  [{r.error}]" if r.error else ""))
    print(json.dumps(summary))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # exit status 2 is reserved for "sufficient condition violated"
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluidstab", description=__doc__)
    parser.add_argument("command", choices=("analyze", "nyquist", "simulate", "sweep"))
    parser.add_argument("config", nargs="?", help="TOML topology config")
    parser.add_argument("--tol", type=float, help="equilibrium residual tolerance")
    parser.add_argument("--omega-lo", type=float)
    parser.add_argument("--omega-hi", type=float)
    parser.add_argument("--n-freq", type=int)
    parser.add_argument("--axis", help="sweep axis: " + ", ".join(AXES))
    parser.add_argument("--grid", help="start:stop:step or v1,v2,...")
    parser.add_argument("--out-dir", help="output directory (default $FLUIDSTAB_OUT_DIR or .)")
    parser.add_argument("--seed", type=int, help="randomizes perturbation signs in simulate")
    parser.add_argument("--unit-loop", type=float, metavar="T",
                        help="nyquist only: scan the reference loop e^{-sT}/(sT)")
    return parser


COMMANDS = {"analyze": cmd_analyze, "nyquist": cmd_nyquist, "simulate": cmd_simulate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config is None and not (args.command == "nyquist" and args.unit_loop is not None):
        print(f"error: {args.command} needs a config path", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, EquilibriumError, LinearizationError, ScenarioError,
            SimulationError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
