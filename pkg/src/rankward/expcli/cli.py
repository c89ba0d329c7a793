"""``rankward <subcommand> --config FILE [--out DIR] [--seed N] [--threads N]``.

Every run writes its tables as CSV, plots as SVG, a ``checks.csv`` with one
row per assertion, and ``summary.json`` listing the hard failures. The exit
status is 1 when any hard check fails and 2 on usage or runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import KINDS, ExperimentConfig, config_from_dict, load_config
from .experiments import COMMANDS, Outcome
from .svgplot import write_svg
from .tables import write_table

log = logging.getLogger("rankward")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankward", description="Reward-matrix rank experiments at desk scale.")
    parser.add_argument("subcommand", choices=[k for k in KINDS])
    parser.add_argument("--config", help="YAML experiment config; defaults are used when omitted")
    parser.add_argument("--out", default=None, help="output directory (default: results/<subcommand>)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 gives bit-reproducible output")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(subcommand: str, path: str | None, seed: int | None) -> ExperimentConfig:
    cfg = load_config(path) if path else config_from_dict({"kind": subcommand})
    if cfg.kind != subcommand:
        raise ValueError(f"config kind {cfg.kind!r} does not match subcommand {subcommand!r}")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def write_outcome(res: Outcome, cfg: ExperimentConfig, out: Path) -> dict:
    h = cfg.config_hash()
    for name, table in res.tables.items():
        res.files.append(write_table(out / f"{name}.csv", table, h))
    for name, plot in res.plots.items():
        res.files.append(write_svg(out / f"{name}.svg", plot))
    res.files.append(write_table(out / "checks.csv", res.check_table(), h))
    (out / "config.yaml").write_text(f"# config_hash: {h}\n" + cfg.to_yaml(), encoding="utf-8")
    summary = {
        "subcommand": cfg.kind,
        "config_hash": h,
        "status": "fail" if res.failures else "ok",
        "failures": [{"check": c.name, "detail": c.detail} for c in res.failures],
        "soft_failures": [{"check": c.name, "detail": c.detail} for c in res.checks if not c.hard and not c.passed],
        "files": sorted(p.name for p in res.files),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def run(subcommand: str, cfg: ExperimentConfig, out: Path, threads: int | None = None) -> tuple[Outcome, dict]:
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=threads):
        res = COMMANDS[subcommand](cfg, out)
    return res, write_outcome(res, cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else Path("results") / args.subcommand
    try:
        cfg = resolve_config(args.subcommand, args.config, args.seed)
        res, summary = run(args.subcommand, cfg, out, args.threads)
    except Exception as exc:  # report and exit nonzero with a machine-readable record
        out.mkdir(parents=True, exist_ok=True)
        record = {"subcommand": args.subcommand, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
        (out / "summary.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        print(json.dumps(record), file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2
    for c in res.checks:
        log.info("%s %s%s", "PASS" if c.passed else "FAIL", c.name, f" ({c.detail})" if c.detail else "")
    if res.failures:
        print(json.dumps({"status": "fail", "failures": summary["failures"]}), file=sys.stderr)
        return 1
    print(f"wrote {len(summary['files'])} files to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
