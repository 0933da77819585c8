from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluidstab.equilibrium import (EquilibriumPoint, NoLossEquilibrium, equilibrium_residual,
                                   solve_equilibrium, solve_single_link)
from fluidstab.network import Link, Regime, Source, Topology
from fluidstab.protocols import make_variant
from fluidstab.scenarios import FlowGroup, ScenarioKind, ScenarioSpec, builtin_scenario

# bisection oracles computed once, independently of the solver, and frozen
RENO_W = 67.8979149
SCALABLE_W = 71.2040788


def bisect(f, lo, hi, n=200):
    for _ in range(n):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
    return 0.5 * (lo + hi)


def single(policy, C=100.0, T=1.0, B=20.0, regime=Regime.SMALL_SMOOTH):
    return Topology((Source("s", policy, T, ("l",), (T / 2,)),), (Link("l", C, B, regime),))


def test_reno_oracle_bisection():
    w = bisect(lambda w: 2 / (2 + w * w) - (w / 100) ** 20, 1.0, 100.0)
    assert w == pytest.approx(RENO_W, abs=1e-7)


def test_reno_single_bottleneck():
    eq = solve_equilibrium(single(make_variant("reno")))
    assert eq.w_star[0] == pytest.approx(RENO_W, rel=1e-8)
    assert eq.p_star[0] == pytest.approx(2 / (2 + RENO_W**2), rel=1e-6)
    assert eq.q_star[0] == pytest.approx(eq.p_star[0], rel=1e-12)
    assert eq.p_star[0] == pytest.approx(4.34e-4, rel=1e-3)
    assert eq.residual <= 1e-10


def test_scalable_single_bottleneck():
    w = bisect(lambda w: 0.01 / (0.01 + 0.125 * w) - (w / 100) ** 20, 1.0, 100.0)
    assert w == pytest.approx(SCALABLE_W, abs=1e-6)
    eq = solve_equilibrium(single(make_variant("scalable", {"a": 0.01, "beta": 0.125})))
    assert eq.w_star[0] == pytest.approx(SCALABLE_W, rel=1e-8)


@pytest.mark.parametrize("kind", ["reno", "scalable", "compound"])
def test_single_link_bisection_agrees(kind):
    policy = make_variant(kind)
    link = Link("l", 100.0, 20.0)
    w, p = solve_single_link(policy, 1.0, link)
    eq = solve_equilibrium(single(policy))
    assert eq.w_star[0] == pytest.approx(w, rel=1e-9)
    assert eq.p_star[0] == pytest.approx(p, rel=1e-8)


@pytest.mark.parametrize("B,T", [(20.0, 1.0), (5.0, 0.1), (80.0, 0.3)])
def test_symmetric_policy_gives_half_loss(B, T):
    # i(w) = d(w) exactly at w = 1; the link is sized so p(1/T) = 1/2
    policy = make_variant("powerlaw", {"alpha": 0.7, "m": 1.0, "beta": 0.7, "n": 1.0})
    eq = solve_equilibrium(single(policy, C=2 ** (1 / B) / T, T=T, B=B))
    assert eq.q_star[0] == pytest.approx(0.5, rel=1e-9)
    assert eq.w_star[0] == pytest.approx(1.0, rel=1e-9)


def two_reno(C=100.0):
    srcs = tuple(Source(f"s{j}", make_variant("reno"), 1.0, ("l",), (0.5,)) for j in range(2))
    return Topology(srcs, (Link("l", C, 20.0),))


def test_two_identical_flows_split_evenly():
    eq = solve_equilibrium(two_reno())
    assert eq.x_star[0] == pytest.approx(eq.x_star[1], rel=1e-12)
    assert eq.x_star[0] == pytest.approx(eq.y_star[0] / 2, rel=1e-12)
    assert eq.residual <= 1e-10


def test_hand_built_two_flow_point():
    # two equal flows on C behave like one flow on C/2
    w, _ = solve_single_link(make_variant("reno"), 1.0, Link("half", 50.0, 20.0))
    x = np.array([w, w])
    y = np.array([2 * w])
    p = (y / 100.0) ** 20
    built = EquilibriumPoint(x, x.copy(), y, p, np.array([p[0], p[0]]), 0.0)
    topo = two_reno()
    solved = solve_equilibrium(topo)
    assert solved.w_star == pytest.approx(x, rel=1e-9)
    assert equilibrium_residual(topo, built) == pytest.approx(solved.residual, abs=1e-12)


def test_residual_detects_perturbation():
    topo = two_reno()
    eq = solve_equilibrium(topo)
    bumped = replace(eq, x_star=eq.x_star * np.array([1.01, 1.0]),
                     w_star=eq.w_star * np.array([1.01, 1.0]))
    assert equilibrium_residual(topo, bumped) > 1e-4


def test_no_loss_when_loss_cannot_balance_growth():
    policy = make_variant("powerlaw", {"alpha": 1.0, "m": 1e-3, "beta": 1e-9, "n": 1.0})
    with pytest.raises(NoLossEquilibrium):
        solve_single_link(policy, 1.0, Link("l", 100.0, 20.0, Regime.INTERMEDIATE))


def test_intermediate_below_capacity_carries_no_loss():
    # the wide link never reaches capacity: it stays loss-free and off the bottleneck list
    links = (Link("wide", 1e6, 20.0, Regime.INTERMEDIATE), Link("narrow", 100.0, 20.0))
    srcs = (Source("s", make_variant("reno"), 0.5, ("wide", "narrow"), (0.1, 0.2)),)
    eq = solve_equilibrium(Topology(srcs, links))
    assert eq.p_star[0] == 0.0
    assert eq.y_star[0] < 1e6
    assert eq.p_star[1] > 0


variants = st.sampled_from(["reno", "compound", "scalable"])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(ScenarioKind)), st.sampled_from(list(Regime)),
       st.lists(variants, min_size=1, max_size=3), st.integers(0, 10_000),
       st.floats(10.0, 200.0))
def test_random_equilibria_satisfy_balance(kind, regime, kinds, seed, B):
    groups = tuple(FlowGroup(1, k, rtt_range=(0.05, 0.2), edge=e) for k in kinds for e in (0, 1))
    caps = {ScenarioKind.SINGLE: (1000.0,), ScenarioKind.TANDEM: (1200.0, 1000.0),
            ScenarioKind.EDGE_CORE: (600.0, 600.0, 1000.0)}.get(kind, (800.0, 1000.0, 1200.0))
    spec = ScenarioSpec(kind, groups, capacities=caps, buffer=B, regime=regime, burst=2.0)
    topo = builtin_scenario(spec, seed)
    eq = solve_equilibrium(topo)
    assert eq.residual <= 1e-10
    assert np.all(eq.x_star > 0) and np.all((eq.q_star > 0) & (eq.q_star < 1))
    caps = np.array([l.capacity for l in topo.links])
    if regime is Regime.INTERMEDIATE:
        assert np.all(eq.y_star[eq.p_star > 0] > caps[eq.p_star > 0])
    else:
        assert np.all(eq.y_star < caps)
