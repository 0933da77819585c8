"""Single Reno flow on a B = 15 link: how fast perturbations die out as the margin grows.

For each target margin the capacity is chosen so that 1/w* = margin * pi/(2B);
the run reports the envelope ratio after 60 RTTs and the Nyquist encirclements.
"""

import argparse
import math

import numpy as np

from fluidstab.linear import FrequencyGrid, nyquist_scan
from fluidstab.network import Link, Source, Topology
from fluidstab.protocols import make_variant
from fluidstab.scenarios import analyze
from fluidstab.simulate import SimulationConfig, classify_trajectory, simulate


def reno_topology(margin, B=15.0):
    w = 2 * B / (math.pi * margin)
    C = w * (2 / (2 + w * w)) ** (-1 / B)
    return Topology((Source("s", make_variant("reno"), 1.0, ("l",), (0.5,)),), (Link("l", C, B),))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--margins", type=float, nargs="+", default=list(np.arange(0.25, 2.01, 0.25)))
    parser.add_argument("--horizon", type=float, default=60.0)
    args = parser.parse_args()
    print(f"{'margin':>7} {'w*':>8} {'enc':>4} {'ratio':>10}  class")
    for margin in args.margins:
        res = analyze(reno_topology(margin))
        scan = nyquist_scan(res.linsys, FrequencyGrid(1e-3, 1e4, 5000))
        traj = simulate(res.topology, res.eq, SimulationConfig(0.025, args.horizon, 0.005))
        cls = classify_trajectory(traj)
        print(f"{margin:>7.2f} {res.eq.w_star[0]:>8.3f} {scan.encirclements:>4d} "
              f"{cls.envelope_ratio:>10.3g}  {cls.kind.value}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
