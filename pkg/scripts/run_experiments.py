"""Run every config in configs/ through the CLI and print one headline per run.

    python scripts/run_experiments.py                 # all configs, outputs under runs/
    python scripts/run_experiments.py collab attack_exact --out /tmp/runs
"""

import argparse
import json
import sys
from pathlib import Path

from keyward.cli import main as keyward

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="config stems (default: all)")
    ap.add_argument("--out", default=str(ROOT / "runs"))
    args = ap.parse_args()

    configs = sorted((ROOT / "configs").glob("*.json"))
    if args.names:
        configs = [c for c in configs if c.stem in args.names]
    failed = 0
    for path in configs:
        cfg = json.loads(path.read_text())
        out = Path(args.out) / path.stem
        code = keyward([cfg["experiment"], "--config", str(path), "--set", f"out_dir={out}",
                        "--set", f"data_dir={ROOT / 'data' / 'mnist'}"])
        if code:
            failed += 1
            print(f"{path.stem}: exit {code}", file=sys.stderr)
            continue
        s = json.loads((out / "summary.json").read_text())
        print(f"{path.stem:22s} {s['headline_name']} = {s['headline_value']}  ({s['runtime_s']:.1f}s)")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
