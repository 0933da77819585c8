import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluidstab.linear import Verdict
from fluidstab.network import Link, Regime, Source, Topology, reduce_tandem
from fluidstab.protocols import make_variant
from fluidstab.scenarios import (AXES, Flag, FlowGroup, ScenarioError, ScenarioKind, ScenarioSpec, analyze,
                                 apply_axis, builtin_scenario, builtin_sweep_suite, cross_validate,
                                 make_rng, sweep)


def analysis_only(topo):
    return cross_validate(topo, simulate_dynamics=False)


def scalable_single(B=100.0, a=0.01):
    src = Source("s", make_variant("scalable", {"a": a}), 1.0, ("l",), (0.5,))
    return Topology((src,), (Link("l", 100.0, B),))


def test_rng_stream_is_fixed():
    assert make_rng(42).uniform(size=3).tolist() == pytest.approx(
        [0.8201981478608876, 0.18924562408645496, 0.8676608148821462], abs=0)


def test_single_bottleneck_shape():
    spec = ScenarioSpec(ScenarioKind.SINGLE, tuple(FlowGroup(1, "reno", rtt_range=(0.05, 0.2)) for _ in range(3)))
    topo = builtin_scenario(spec, 0)
    assert len(topo.links) == 1 and len(topo.sources) == 3
    assert all(0.05 <= s.rtt <= 0.2 for s in topo.sources)


def test_edge_core_two_bottlenecks_each():
    spec = ScenarioSpec(ScenarioKind.EDGE_CORE,
                        (FlowGroup(2, "reno", edge=0), FlowGroup(2, "compound", edge=0),
                         FlowGroup(2, "reno", edge=1), FlowGroup(1, "compound", edge=1)),
                        capacities=(20.0, 20.0, 30.0), regime=Regime.INTERMEDIATE)
    topo = builtin_scenario(spec, 5)
    assert all(len(s.route) == 2 for s in topo.sources)
    rep = analyze(topo).report
    assert list(rep.n_bottlenecks) == [2] * 7
    assert all(r.threshold == pytest.approx(math.pi / 4) for r in rep.rows)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(ScenarioKind)), st.integers(0, 2**31 - 1))
def test_same_seed_same_topology(kind, seed):
    caps = {ScenarioKind.SINGLE: (1000.0,), ScenarioKind.TANDEM: (900.0, 1000.0),
            ScenarioKind.EDGE_CORE: (500.0, 500.0, 800.0)}.get(kind, (500.0, 700.0, 900.0))
    spec = ScenarioSpec(kind, (FlowGroup(2, "reno", edge=0), FlowGroup(2, "scalable", edge=1)), capacities=caps)
    assert builtin_scenario(spec, seed) == builtin_scenario(spec, seed)


def test_different_seeds_differ():
    spec = ScenarioSpec(ScenarioKind.MESH, (FlowGroup(5, "reno"),), capacities=(500.0, 700.0, 900.0))
    assert builtin_scenario(spec, 1) != builtin_scenario(spec, 2)


@pytest.mark.parametrize("spec", [
    ScenarioSpec(ScenarioKind.SINGLE, (), capacities=(100.0,)),
    ScenarioSpec(ScenarioKind.TANDEM, (FlowGroup(1),), capacities=(100.0,)),
    ScenarioSpec(ScenarioKind.EDGE_CORE, (FlowGroup(1, edge=0),), capacities=(1.0, 1.0, 2.0)),
    ScenarioSpec(ScenarioKind.SINGLE, (FlowGroup(1, rtt_range=(0.2, 0.1)),)),
])
def test_bad_specs(spec):
    with pytest.raises(ScenarioError):
        builtin_scenario(spec, 0)


def test_scalable_consistent():
    rec = cross_validate(scalable_single(100.0))
    assert rec.verdict == Verdict.HOLDS.value
    assert rec.encirclements == 0
    assert rec.trajectory == "Converging"
    assert rec.flag is Flag.CONSISTENT


def test_strongly_violated_reno_never_inconsistent():
    # B = 3 pi w*/2 puts the Reno margin at 3
    w = 20.0
    B = 3 * math.pi * w / 2
    C = w * (2 / (2 + w * w)) ** (-1 / B)
    topo = Topology((Source("s", make_variant("reno"), 1.0, ("l",), (0.5,)),), (Link("l", C, B),))
    rec = cross_validate(topo)
    assert rec.max_margin == pytest.approx(3.0, rel=1e-6)
    assert rec.encirclements > 0
    assert rec.flag in (Flag.UNSTABLE, Flag.CONSERVATIVE)


def test_tandem_matches_reduced():
    spec = ScenarioSpec(ScenarioKind.TANDEM, (FlowGroup(2, "reno"), FlowGroup(2, "scalable")),
                        capacities=(1000.0, 800.0), buffer=10.0)
    topo = builtin_scenario(spec, 3)
    assert cross_validate(topo).same_as(cross_validate(reduce_tandem(topo)))


def test_scalable_buffer_flip():
    res = sweep(scalable_single(), "buffer", np.arange(150, 166), evaluate=analysis_only)
    holds = {p.value: p.record.verdict == Verdict.HOLDS.value for p in res.points}
    assert holds[157.0] and not holds[158.0]
    assert all(holds[b] for b in range(150, 158)) and not any(holds[b] for b in range(158, 166))


def test_reno_flip_at_window_threshold():
    topo = Topology((Source("s", make_variant("reno"), 1.0, ("l",), (0.5,)),), (Link("l", 100.0, 20.0),))
    grid = np.arange(80.0, 200.0, 1.0)
    res = sweep(topo, "buffer", grid, evaluate=analysis_only)
    verdicts = [p.record.verdict == Verdict.HOLDS.value for p in res.points]
    flip = verdicts.index(False)
    w_flip = analyze(apply_axis(topo, "buffer", grid[flip])).eq.w_star[0]
    # w* = 2B/pi lies between the last holding and first violating buffer
    assert abs(w_flip * math.pi / 2 - grid[flip]) <= 1.0


def test_bursty_m1_matches_smooth():
    spec = ScenarioSpec(ScenarioKind.MESH, (FlowGroup(3, "reno"), FlowGroup(2, "compound")),
                        capacities=(500.0, 700.0), buffer=25.0)
    topo = builtin_scenario(spec, 4)
    a = analysis_only(topo)
    b = analysis_only(apply_axis(topo, "burst", 1.0))
    assert a.same_as(b, tol=0.0)


def test_axis_errors():
    with pytest.raises(ScenarioError, match="available"):
        apply_axis(scalable_single(), "bufer", 1.0)
    res = sweep(scalable_single(), "buffer", [0.5, 100.0], evaluate=analysis_only)
    assert res.points[0].record.flag is Flag.ERROR
    assert res.points[1].record.flag is Flag.CONSISTENT


@pytest.mark.parametrize("axis", AXES)
def test_every_axis_applies(axis):
    topo = builtin_scenario(ScenarioSpec(ScenarioKind.SINGLE, (FlowGroup(1, "powerlaw", (
        ("alpha", 1.0), ("m", 0.5), ("beta", 0.5), ("n", 1.0))), FlowGroup(1, "scalable"),
        FlowGroup(1, "compound"))), 0)
    out = apply_axis(topo, axis, 0.6)
    assert out != topo


def test_sweep_csv(tmp_path):
    res = sweep(scalable_single(), "a", [0.005, 0.02], evaluate=analysis_only)
    res.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("a,verdict,necessary_ok,max_margin")
    assert len(lines) == 3
    assert res.summary() == {"axis": "a", "points": 2, "flags": {"CONSISTENT": 1, "UNSTABLE": 1}}


def test_suite_shape():
    suite = builtin_sweep_suite()
    assert sum(len(grid) for *_, grid, _ in suite) >= 500
    assert {spec.kind for _, spec, *_ in suite} == set(ScenarioKind)
    assert {spec.regime for _, spec, *_ in suite} >= {Regime.SMALL_SMOOTH, Regime.INTERMEDIATE}
    assert any(axis == "burst" for _, _, axis, *_ in suite)
