"""Run the built-in sweep suite and write one CSV per sweep plus a summary.

    python scripts/run_sweep_suite.py --out-dir results/suite [--only mesh]
"""

import argparse
import json
import time
from pathlib import Path

from fluidstab.scenarios import builtin_sweep_suite, run_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="results/suite")
    parser.add_argument("--only", help="substring filter on sweep names")
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    suite = [s for s in builtin_sweep_suite() if not args.only or args.only in s[0]]

    def progress(name, res, dt):
        res.write_csv(out / f"{name}.csv")
        print(f"{name:<38} {dt:6.1f}s  {res.summary()['flags']}", flush=True)

    start = time.perf_counter()
    results = run_suite(suite, progress=progress)
    total = {}
    for _, res in results:
        for flag, count in res.summary()["flags"].items():
            total[flag] = total.get(flag, 0) + count
    summary = {"sweeps": len(results), "points": sum(total.values()), "flags": total,
               "seconds": round(time.perf_counter() - start, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 1 if total.get("INCONSISTENT") else 0


if __name__ == "__main__":
    raise SystemExit(main())
