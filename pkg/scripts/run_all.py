"""Run every subcommand from its shipped config and tabulate the exit codes.

    python scripts/run_all.py [--out results] [--only tradeoff ablation]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from rankward.expcli import cli
from rankward.expcli.config import KINDS

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    ap.add_argument("--only", nargs="*", choices=KINDS, default=list(KINDS))
    args = ap.parse_args()
    worst = 0
    rows = []
    for kind in args.only:
        t0 = time.perf_counter()
        code = cli.main([kind, "--config", str(ROOT / "configs" / f"{kind}.yaml"), "--out", f"{args.out}/{kind}", "--threads", "1"])
        summary = json.loads((Path(args.out) / kind / "summary.json").read_text())
        soft = [f["check"] for f in summary.get("soft_failures", [])]
        rows.append((kind, code, time.perf_counter() - t0, soft))
        worst = max(worst, code)
    print(f"\n{'subcommand':<16}{'exit':>5}{'seconds':>10}  soft failures")
    for kind, code, secs, soft in rows:
        print(f"{kind:<16}{code:>5}{secs:>10.1f}  {', '.join(soft) or '-'}")
    return worst


if __name__ == "__main__":
    sys.exit(main())
