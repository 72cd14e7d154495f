"""Run ``convexflow all`` on every library problem and print the headline numbers.

Usage: python3 scripts/run_suite.py [OUT_ROOT]
"""

import sys
from pathlib import Path

from convexflow.cli import main
from convexflow.io import read_json
from convexflow.problems import PROBLEMS

SUITE = ("double_well_1d", "asymmetric_quartic_1d", "radial_double_well_2d")


def _summary(out: Path) -> str:
    m = read_json(out / "manifest.json")
    rates = read_json(out / "rates" / "rates.json")
    flow = read_json(out / "flow" / "summary.json")
    sup = rates.get("sup", {})
    lam = f"{sup['lambda']:.4g}" if "lambda" in sup else sup.get("error", "-")
    gap = max(t["final_env_gap"] for t in flow["trajectories"])
    return f"exit={m['exit_code']} lambda={lam} worst flow gap={gap:.2e} failures={m['failures'] or 'none'}"


def run_suite(root: Path, problems=SUITE) -> dict[str, int]:
    codes = {}
    for name in problems:
        if name not in PROBLEMS:
            raise SystemExit(f"unknown problem {name}")
        out = root / name
        codes[name] = main(["all", "--problem", name, "--out", str(out)])
        print(f"{name:24s} {_summary(out)}", flush=True)
    return codes


if __name__ == "__main__":
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("suite_out")
    codes = run_suite(root)
    sys.exit(max(codes.values()))
