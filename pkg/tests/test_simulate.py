import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluidstab.equilibrium import solve_equilibrium
from fluidstab.linear import FrequencyGrid, linearize, nyquist_scan, sufficient_condition
from fluidstab.network import Link, Source, Topology
from fluidstab.protocols import make_variant
from fluidstab.simulate import (HistoryInit, SimulationConfig, SimulationError, Trajectory, TrajectoryClass,
                                classify_trajectory, default_config, perturbation_norm, simulate)

from oracles import random_topology


def reno_half_margin():
    # B = 15 and w* = 60/pi put 1/w* at half of pi/(2B)
    w = 60 / math.pi
    C = w * (2 / (2 + w * w)) ** (-1 / 15)
    topo = Topology((Source("s", make_variant("reno"), 1.0, ("l",), (0.5,)),), (Link("l", C, 15.0),))
    return topo, solve_equilibrium(topo)


def scalable_oscillating():
    topo = Topology((Source("s", make_variant("scalable"), 1.0, ("l",), (0.5,)),), (Link("l", 100.0, 200.0),))
    return topo, solve_equilibrium(topo)


@pytest.fixture(scope="module")
def decay_runs():
    topo, eq = reno_half_margin()
    coarse = simulate(topo, eq, SimulationConfig(0.025, 60.0, 0.01))
    fine = simulate(topo, eq, SimulationConfig(0.0125, 60.0, 0.01))
    return topo, eq, coarse, fine


def test_decay_setup_has_half_margin(decay_runs):
    topo, eq, _, _ = decay_runs
    assert sufficient_condition(linearize(topo, eq)).rows[0].margin == pytest.approx(0.5, rel=1e-9)


def test_decay_ratio(decay_runs):
    _, _, traj, _ = decay_runs
    i50 = np.searchsorted(traj.t, 50.0)
    assert traj.u[i50] / traj.u[0] <= 0.1
    assert classify_trajectory(traj).kind is TrajectoryClass.CONVERGING


def test_decay_envelope_monotone(decay_runs):
    _, _, traj, _ = decay_runs
    env = perturbation_norm(traj, 5.0)
    tail = env[traj.t >= 5.0]
    assert np.all(np.diff(tail) <= 1e-15)


def test_step_halving_agrees(decay_runs):
    _, _, coarse, fine = decay_runs
    assert np.max(np.abs(fine.x[::2] - coarse.x) / coarse.x) <= 1e-4


def test_encirclement_gives_sustained_oscillation():
    topo, eq = scalable_oscillating()
    assert nyquist_scan(linearize(topo, eq), FrequencyGrid(1e-3, 1e4, 4000)).encirclements > 0
    traj = simulate(topo, eq, SimulationConfig(0.025, 200.0, 0.01))
    t, u = traj.t, traj.u
    last = u[t >= t[-1] - 10].max()
    prev = u[(t >= t[-1] - 20) & (t < t[-1] - 10)].max()
    assert last / prev >= 0.95
    cls = classify_trajectory(traj)
    assert cls.kind is TrajectoryClass.OSCILLATING
    assert cls.limit_cycle_like


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_equilibrium_start_stays_put(seed):
    topo = random_topology(np.random.default_rng(seed), max_sources=8)
    eq = solve_equilibrium(topo)
    cfg = default_config(topo)
    cfg.history_init = HistoryInit.EQUILIBRIUM
    traj = simulate(topo, eq, cfg)
    assert traj.u.max() <= 1e-8
    assert classify_trajectory(traj).kind is TrajectoryClass.CONVERGING


def test_config_checks():
    topo, _ = reno_half_margin()
    assert SimulationConfig(0.025, 60.0, 0.01).check(topo) == []
    problems = SimulationConfig(0.1, 10.0, 0.3).check(topo)
    assert len(problems) == 3
    with pytest.raises(SimulationError):
        simulate(topo, solve_equilibrium(topo), SimulationConfig(0.1, 60.0))


def test_default_config_respects_delays():
    topo = random_topology(np.random.default_rng(3))
    assert default_config(topo).check(topo) == []


def synthetic(u, dt=0.1):
    t = np.arange(len(u)) * dt
    x = (1 + u)[:, None]
    return Trajectory(t, x, np.zeros((len(u), 1)), np.zeros((len(u), 1)), np.asarray(u, float),
                      np.ones(1), np.zeros((len(u), 1)), 1.0)


def test_envelope_constant():
    env = perturbation_norm(synthetic(np.full(100, 0.3)), 1.0)
    assert np.all(env == 0.3)


def test_envelope_of_decay_strictly_decreasing():
    traj = synthetic(np.exp(-0.05 * np.arange(200)))
    env = perturbation_norm(traj, 1.0)
    # the first window still sees u(0)
    assert np.all(np.diff(env[traj.t >= 1.0]) < 0)


def test_envelope_of_fixed_oscillation():
    t = np.arange(400) * 0.1
    env = perturbation_norm(synthetic(np.abs(np.sin(2 * np.pi * t / 0.8))), 1.0)
    after = env[t >= 1.0]
    assert np.ptp(after) <= 1e-2 * after.max()


@pytest.mark.parametrize("u,kind", [
    (np.exp(-0.1 * np.arange(400)), TrajectoryClass.CONVERGING),
    (np.exp(0.05 * np.arange(400)) * 1e-3, TrajectoryClass.DIVERGING),
    (0.1 + 0.05 * np.abs(np.sin(np.arange(400))), TrajectoryClass.OSCILLATING),
    (np.zeros(400), TrajectoryClass.CONVERGING),
])
def test_classification(u, kind):
    assert classify_trajectory(synthetic(u)).kind is kind


def test_trajectory_csv(tmp_path, decay_runs):
    _, _, traj, _ = decay_runs
    path = tmp_path / "traj.csv"
    traj.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "x_0", "p_0", "q_0", "envelope"]
    assert len(rows) == len(traj.t) + 1
    assert float(rows[1][1]) == pytest.approx(traj.x[0, 0])
