"""Canonical topologies, the analysis pipeline, cross-validation and sweeps."""

from __future__ import annotations

import csv
import enum
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .equilibrium import EquilibriumError, EquilibriumPoint, solve_equilibrium
from .linear import (FrequencyGrid, LinearizedSystem, NarrowGridWarning, StabilityReport, Verdict,
                     linearize, nyquist_scan, sufficient_condition)
from .network import Link, Regime, Source, Topology, reduce_tandem, validate_topology
from .protocols import make_variant
from .simulate import (Classification, HistoryInit, SimulationConfig, TrajectoryClass,
                       classify_trajectory, default_config, simulate)


class ScenarioKind(str, enum.Enum):
    SINGLE = "single_bottleneck"
    TANDEM = "tandem"
    EDGE_CORE = "edge_core"
    MESH = "arbitrary_mesh"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class FlowGroup:
    count: int
    variant: str = "reno"
    params: tuple[tuple[str, float], ...] = ()
    rtt_range: tuple[float, float] = (0.05, 0.2)
    edge: int = 0


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind
    groups: tuple[FlowGroup, ...]
    capacities: tuple[float, ...] = (1000.0,)
    buffer: float = 20.0
    regime: Regime = Regime.SMALL_SMOOTH
    burst: float = 1.0
    tandem_delay: float = 0.002
    max_route: int = 3

    def problems(self) -> list[str]:
        out = []
        if not self.groups or any(g.count < 1 for g in self.groups):
            out.append("need at least one flow per group")
        for g in self.groups:
            lo, hi = g.rtt_range
            if not 0 < lo <= hi:
                out.append(f"bad RTT range {g.rtt_range}")
        need = {ScenarioKind.SINGLE: 1, ScenarioKind.TANDEM: 2, ScenarioKind.EDGE_CORE: 3}
        if self.kind in need and len(self.capacities) != need[self.kind]:
            out.append(f"{self.kind.value} needs {need[self.kind]} capacities")
        if self.kind is ScenarioKind.EDGE_CORE and {g.edge for g in self.groups} != {0, 1}:
            out.append("edge_core needs flow groups on both edge routers (edge 0 and 1)")
        if self.kind is ScenarioKind.MESH and len(self.capacities) < 2:
            out.append("arbitrary_mesh needs at least two links")
        if self.kind is ScenarioKind.TANDEM:
            if min(g.rtt_range[0] for g in self.groups) / 2 <= self.tandem_delay:
                out.append("tandem delay must be below half the smallest RTT")
        return out


def make_rng(seed: int) -> np.random.Generator:
    # counter-based bit generator: streams are reproducible across platforms
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _forward_delays(rng, rtt, n):
    upper = [rtt * (i + 1) / n / 2.0 for i in range(n)]
    return tuple(np.maximum.accumulate([rng.uniform(0.0, u) for u in upper]))


def builtin_scenario(spec: ScenarioSpec, seed: int = 0) -> Topology:
    problems = spec.problems()
    if problems:
        raise ScenarioError("; ".join(problems))
    rng = make_rng(seed)

    def link(i, cap):
        return Link(f"l{i}", float(cap), float(spec.buffer), spec.regime, float(spec.burst))

    links = [link(i, c) for i, c in enumerate(spec.capacities)]
    flows = []
    for g in spec.groups:
        policy = make_variant(g.variant, dict(g.params))
        for _ in range(g.count):
            flows.append((g, policy, float(rng.uniform(*g.rtt_range))))

    sources = []
    for j, (g, policy, rtt) in enumerate(flows):
        sid = f"s{j}"
        if spec.kind is ScenarioKind.SINGLE:
            route = ("l0",)
            fwd = _forward_delays(rng, rtt, 1)
        elif spec.kind is ScenarioKind.TANDEM:
            route = ("l0", "l1")
            t1 = rng.uniform(0.0, rtt / 2 - spec.tandem_delay)
            fwd = (t1, t1 + spec.tandem_delay)
        elif spec.kind is ScenarioKind.EDGE_CORE:
            route = (f"l{g.edge}", "l2")
            fwd = _forward_delays(rng, rtt, 2)
        else:
            n = int(rng.integers(1, min(spec.max_route, len(links)) + 1))
            route = tuple(f"l{i}" for i in rng.permutation(len(links))[:n])
            fwd = _forward_delays(rng, rtt, n)
        sources.append(Source(sid, policy, rtt, route, fwd))

    if spec.kind is ScenarioKind.MESH:
        used = {lid for s in sources for lid in s.route}
        for i, lk in enumerate(links):
            if lk.id not in used:
                j = int(rng.integers(len(sources)))
                s = sources[j]
                route = s.route + (lk.id,)
                sources[j] = replace(s, route=route, forward_delays=_forward_delays(rng, s.rtt, len(route)))
                used.add(lk.id)
        links = [replace(lk, capacity=lk.capacity * float(rng.uniform(0.5, 1.5))) for lk in links]
    delta = spec.tandem_delay if spec.kind is ScenarioKind.TANDEM else 0.0
    topo = Topology(tuple(sources), tuple(links), delta)
    problems = validate_topology(topo)
    if problems:
        raise ScenarioError("; ".join(problems))
    return topo


# ---------------------------------------------------------------- analysis pipeline

@dataclass
class Analysis:
    topology: Topology          # after tandem reduction
    eq: EquilibriumPoint
    linsys: LinearizedSystem
    report: StabilityReport


def analyze(topology: Topology, tol: float = 1e-10) -> Analysis:
    """Tandem reduction, equilibrium, linearization and the condition table."""
    problems = validate_topology(topology)
    if problems:
        raise ScenarioError("; ".join(problems))
    reduced = reduce_tandem(topology)
    eq = solve_equilibrium(reduced, tol=tol)
    linsys = linearize(reduced, eq)
    return Analysis(reduced, eq, linsys, sufficient_condition(linsys))


def local_perturbation(topology: Topology, eq: EquilibriumPoint, cap: float = 0.05) -> float:
    """Relative rate offset small enough that drop laws stay near-linear (B * delta ~ 0.1)."""
    sens = []
    for l, link in enumerate(topology.links):
        if link.is_small:
            sens.append(link.effective_buffer)
        elif eq.p_star[l] > 0:
            sens.append((1.0 - eq.p_star[l]) / eq.p_star[l])
    return float(min(cap, 0.1 / max(sens + [1.0])))


class Flag(str, enum.Enum):
    CONSISTENT = "CONSISTENT"
    CONSERVATIVE = "CONSERVATIVE"
    UNSTABLE = "UNSTABLE"
    INCONSISTENT = "INCONSISTENT"
    ERROR = "ERROR"


@dataclass
class ConsistencyRecord:
    flag: Flag
    verdict: str | None = None
    necessary_ok: bool | None = None
    max_margin: float | None = None
    margins: tuple[float, ...] = ()
    n_bottlenecks: tuple[int, ...] = ()
    encirclements: int | None = None
    trajectory: str | None = None
    envelope_ratio: float | None = None
    horizon_rtts: float | None = None
    error: str | None = None

    def same_as(self, other: "ConsistencyRecord", tol: float = 1e-9) -> bool:
        if (self.flag, self.verdict, self.necessary_ok, self.encirclements, self.trajectory,
                self.n_bottlenecks) != (other.flag, other.verdict, other.necessary_ok,
                                        other.encirclements, other.trajectory, other.n_bottlenecks):
            return False
        return np.allclose(self.margins, other.margins, rtol=0, atol=tol)


def _simulate_until_settled(topo, eq, perturbation, horizon_rtts, max_horizon_rtts):
    """Simulate; if the envelope is still shrinking, rerun long enough to reach a tenth.

    The rerun horizon is extrapolated from the decay rate over the last two
    classification windows, with 25% slack, and capped at `max_horizon_rtts`.
    """
    for _ in range(3):
        cfg = default_config(topo, perturbation=perturbation, horizon_rtts=horizon_rtts)
        cls = classify_trajectory(simulate(topo, eq, cfg))
        r = cls.last_window_ratio
        if cls.kind is not TrajectoryClass.OSCILLATING or not 0 < r < 0.999 or horizon_rtts >= max_horizon_rtts:
            break
        windows = np.log(0.1 / cls.envelope_ratio) / np.log(r)
        horizon_rtts = float(min(max_horizon_rtts, horizon_rtts + 1.25 * 5.0 * windows + 10.0))
    return cls, horizon_rtts


def cross_validate(topology: Topology, grid: FrequencyGrid | None = None, simulate_dynamics: bool = True,
                   horizon_rtts: float = 30.0, max_horizon_rtts: float = 3000.0,
                   violated_horizon_rtts: float = 300.0) -> ConsistencyRecord:
    """Condition table vs. Nyquist scan vs. nonlinear simulation on one topology."""
    import warnings

    try:
        res = analyze(topology)
    except (EquilibriumError, ScenarioError, ValueError) as exc:
        return ConsistencyRecord(Flag.ERROR, error=f"{type(exc).__name__}: {exc}")
    rep = res.report
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NarrowGridWarning)
        scan = nyquist_scan(res.linsys, grid or FrequencyGrid(n=2000), refine_crossings=False)
    rec = ConsistencyRecord(
        Flag.ERROR, rep.verdict.value, rep.necessary_ok, float(np.max(rep.margins)),
        tuple(float(m) for m in rep.margins), tuple(int(n) for n in rep.n_bottlenecks),
        scan.encirclements)
    stable = scan.encirclements == 0
    if simulate_dynamics:
        delta = local_perturbation(res.topology, res.eq)
        # a long rerun only matters when the linear scan predicts decay; past the
        # condition boundary it can only move a point between CONSERVATIVE and UNSTABLE
        holds = rep.verdict is Verdict.HOLDS and rep.necessary_ok
        cap = horizon_rtts if not stable else max_horizon_rtts if holds else violated_horizon_rtts
        cls, used = _simulate_until_settled(res.topology, res.eq, delta, horizon_rtts, cap)
        rec.trajectory = cls.kind.value
        rec.envelope_ratio = float(cls.envelope_ratio)
        rec.horizon_rtts = used
        stable = stable and cls.kind is TrajectoryClass.CONVERGING
    holds = rep.verdict is Verdict.HOLDS and rep.necessary_ok
    if holds:
        rec.flag = Flag.CONSISTENT if stable else Flag.INCONSISTENT
    else:
        rec.flag = Flag.CONSERVATIVE if stable else Flag.UNSTABLE
    return rec


# ---------------------------------------------------------------- sweeps

POLICY_AXES = ("a", "alpha", "beta", "k", "m", "n")
AXES = ("buffer", "capacity", "capacity_scale", "rtt_scale", "burst") + POLICY_AXES


def apply_axis(topology: Topology, axis: str, value: float) -> Topology:
    value = float(value)
    if axis not in AXES:
        raise ScenarioError(f"unknown axis {axis!r}; available: {', '.join(AXES)}")
    links, sources = topology.links, topology.sources
    if axis == "buffer":
        links = tuple(replace(l, buffer=value) for l in links)
    elif axis == "capacity":
        links = tuple(replace(l, capacity=value) for l in links)
    elif axis == "capacity_scale":
        links = tuple(replace(l, capacity=l.capacity * value) for l in links)
    elif axis == "burst":
        links = tuple(replace(l, regime=Regime.SMALL_BURSTY, burst=value) if l.is_small else l
                      for l in links)
    elif axis == "rtt_scale":
        sources = tuple(replace(s, rtt=s.rtt * value,
                                forward_delays=tuple(t * value for t in s.forward_delays))
                        for s in sources)
    else:
        out = []
        for s in sources:
            if axis in s.policy.params:
                params = dict(s.policy.params)
                params[axis] = value
                s = replace(s, policy=make_variant(s.policy.kind, params))
            out.append(s)
        sources = tuple(out)
    return Topology(sources, links, topology.tandem_delay)


@dataclass
class SweepPoint:
    value: float
    record: ConsistencyRecord


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint] = field(default_factory=list)

    def flags(self) -> list[Flag]:
        return [p.record.flag for p in self.points]

    def verdicts(self) -> list[str | None]:
        return [p.record.verdict for p in self.points]

    def summary(self) -> dict:
        counts: dict[str, int] = {}
        for f in self.flags():
            counts[f.value] = counts.get(f.value, 0) + 1
        return {"axis": self.axis, "points": len(self.points), "flags": counts}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow([self.axis, "verdict", "necessary_ok", "max_margin", "encirclements",
                          "trajectory", "envelope_ratio", "flag", "error"])
            for p in self.points:
                r = p.record
                out.writerow([repr(p.value), r.verdict or "", "" if r.necessary_ok is None else r.necessary_ok,
                              "" if r.max_margin is None else repr(r.max_margin),
                              "" if r.encirclements is None else r.encirclements,
                              r.trajectory or "",
                              "" if r.envelope_ratio is None else repr(r.envelope_ratio),
                              r.flag.value, r.error or ""])


def sweep(base: ScenarioSpec | Topology, axis: str, grid: Sequence[float], seed: int = 0,
          evaluate: Callable[[Topology], ConsistencyRecord] | None = None) -> SweepResult:
    """Cross-validate at every grid value of `axis`; failures are recorded per point."""
    if axis not in AXES:
        raise ScenarioError(f"unknown axis {axis!r}; available: {', '.join(AXES)}")
    topo = builtin_scenario(base, seed) if isinstance(base, ScenarioSpec) else base
    evaluate = evaluate or cross_validate
    result = SweepResult(axis)
    for value in grid:
        try:
            rec = evaluate(apply_axis(topo, axis, value))
        except Exception as exc:  # isolate per-point failures
            rec = ConsistencyRecord(Flag.ERROR, error=f"{type(exc).__name__}: {exc}")
        result.points.append(SweepPoint(float(value), rec))
    return result


def builtin_sweep_suite() -> list[tuple[str, ScenarioSpec, str, tuple[float, ...], int]]:
    """(name, spec, axis, grid, seed) tuples covering every scenario kind and regime.

    Grids are placed so that each sweep crosses its stability threshold.
    """
    reno = FlowGroup(3, "reno", rtt_range=(0.08, 0.12))
    compound = FlowGroup(2, "compound", rtt_range=(0.08, 0.12))
    scalable = FlowGroup(2, "scalable", rtt_range=(0.08, 0.12))
    mixed = (reno, compound, scalable)

    def span(lo, hi, n=30):
        return tuple(float(v) for v in np.linspace(lo, hi, n))

    def single(group, **kw):
        return ScenarioSpec(ScenarioKind.SINGLE, (group,), capacities=(1000.0,), **kw)

    suite = [
        ("single-scalable-buffer", single(replace(scalable, count=3)), "buffer", span(5, 295), 1),
        ("single-reno-buffer", single(reno), "buffer", span(2, 60), 2),
        ("single-compound-buffer", single(replace(compound, count=3)), "buffer", span(2, 60), 3),
        ("single-mixed-buffer",
         ScenarioSpec(ScenarioKind.SINGLE, mixed, capacities=(1000.0,)), "buffer", span(1, 30), 4),
        ("single-mixed-bursty",
         ScenarioSpec(ScenarioKind.SINGLE, mixed, capacities=(1000.0,), buffer=30.0),
         "burst", span(1, 15), 5),
        ("single-scalable-a", single(replace(scalable, count=3), buffer=60.0),
         "a", span(0.002, 0.06), 6),
        ("single-mixed-intermediate-capacity",
         ScenarioSpec(ScenarioKind.SINGLE, mixed, capacities=(1000.0,), regime=Regime.INTERMEDIATE),
         "capacity", tuple(float(c) for c in np.geomspace(20, 2000, 30)), 7),
        ("tandem-mixed-buffer",
         ScenarioSpec(ScenarioKind.TANDEM, mixed, capacities=(1200.0, 1000.0)), "buffer", span(1, 30), 8),
        ("edge-core-mixed-buffer",
         ScenarioSpec(ScenarioKind.EDGE_CORE,
                      (replace(reno, edge=0), replace(compound, edge=0), replace(scalable, edge=1),
                       replace(reno, edge=1)), capacities=(600.0, 600.0, 1000.0)),
         "buffer", span(1, 30), 9),
        ("edge-core-intermediate-rtt",
         ScenarioSpec(ScenarioKind.EDGE_CORE,
                      (replace(reno, edge=0), replace(scalable, edge=1)),
                      capacities=(60.0, 60.0, 100.0), regime=Regime.INTERMEDIATE),
         "rtt_scale", tuple(float(s) for s in np.geomspace(0.2, 5.0, 30)), 10),
        ("mesh-mixed-buffer",
         ScenarioSpec(ScenarioKind.MESH, mixed, capacities=(800.0, 1000.0, 1200.0, 900.0)),
         "buffer", span(1, 30), 11),
        ("mesh-mixed-capacity",
         ScenarioSpec(ScenarioKind.MESH, mixed, capacities=(800.0, 1000.0, 1200.0), buffer=15.0),
         "capacity_scale", tuple(float(s) for s in np.geomspace(0.25, 4.0, 30)), 12),
        ("mesh-reno-rtt",
         ScenarioSpec(ScenarioKind.MESH, (FlowGroup(4, "reno", rtt_range=(0.08, 0.12)),),
                      capacities=(500.0, 700.0, 600.0), buffer=40.0),
         "rtt_scale", tuple(float(s) for s in np.geomspace(0.2, 5.0, 30)), 13),
        ("single-powerlaw-buffer",
         single(FlowGroup(3, "powerlaw", (("alpha", 1.0), ("m", 0.5), ("beta", 0.5), ("n", 1.0)),
                          rtt_range=(0.08, 0.12))), "buffer", span(1, 15), 14),
        ("mesh-mixed-burst",
         ScenarioSpec(ScenarioKind.MESH, mixed, capacities=(800.0, 1000.0, 1200.0), buffer=15.0),
         "burst", span(1, 15), 15),
        ("edge-core-compound-k",
         ScenarioSpec(ScenarioKind.EDGE_CORE,
                      (FlowGroup(3, "compound", rtt_range=(0.08, 0.12), edge=0),
                       FlowGroup(3, "compound", rtt_range=(0.08, 0.12), edge=1)),
                      capacities=(600.0, 600.0, 1000.0), buffer=80.0),
         "k", span(0.05, 0.95), 16),
        ("single-reno-beta", single(reno, buffer=43.0), "beta", span(0.05, 0.95), 17),
    ]
    return suite


def run_suite(suite=None, progress: Callable[[str, SweepResult, float], None] | None = None):
    results = []
    for name, spec, axis, grid, seed in (suite or builtin_sweep_suite()):
        start = time.perf_counter()
        res = sweep(spec, axis, grid, seed)
        results.append((name, res))
        if progress:
            progress(name, res, time.perf_counter() - start)
    return results
