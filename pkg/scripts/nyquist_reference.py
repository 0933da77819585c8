"""Reference loop g e^{-sT}/(sT): first real-axis crossing and encirclements vs gain.

The crossing sits at -2g/pi for every T, so the loop is stable exactly for g < pi/2.
"""

import argparse
import math

from fluidstab.linear import FrequencyGrid, nyquist_scan, unit_loop


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--T", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    parser.add_argument("--gains", type=float, nargs="+",
                        default=[0.5, 1.0, 1.5, 1.57, 1.58, 2.0, 5.0])
    args = parser.parse_args()

    print(f"{'T':>6} {'omega*T':>10} {'crossing':>14} {'-2/pi':>12}")
    for T in args.T:
        scan = nyquist_scan(unit_loop(T), FrequencyGrid(1e-2 / T, 1e3 / T, 4000))
        c = scan.leftmost_crossing()
        print(f"{T:>6g} {c.omega * T:>10.7f} {c.value.real:>14.10f} {-2 / math.pi:>12.9f}")

    print(f"\n{'gain':>6} {'crossing':>12} {'encirclements':>14}")
    for g in args.gains:
        scan = nyquist_scan(unit_loop(1.0, g), FrequencyGrid(1e-3, 1e4, 5000))
        c = scan.leftmost_crossing()
        print(f"{g:>6g} {c.value.real:>12.6f} {scan.encirclements:>14d}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
