"""Desk-scale end-to-end run: data, ML images, critic, reconstruction, metrics.

    python3 scripts/desk_scale.py --output runs/desk --seed 0

Uses the default configuration unless ``--config`` is given and prints the
evaluation summary, including wins against the ML baseline.
"""
import argparse
import json
import sys
from pathlib import Path

from elastinv.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--output", default="runs/desk")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--config")
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    argv = ["run", "--output", args.output, "--seed", args.seed, "--jobs", args.jobs]
    if args.config:
        argv += ["--config", args.config]
    code = cli_main(argv)
    summary = Path(args.output) / "eval" / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        base = s.get("baseline", {})
        print(f"adversarial mean rel L2 {s['aggregate']['rel_l2']:.4f}, "
              f"ML {base.get('aggregate', {}).get('rel_l2', float('nan')):.4f}, "
              f"wins {base.get('wins')}/{s['count']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
