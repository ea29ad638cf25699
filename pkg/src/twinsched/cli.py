"""Command-line driver.

Subcommands::

    twinsched generate --out DIR            write the configured trace as SWF
    twinsched run      --out DIR            one experiment (mode from config)
    twinsched compare  --out DIR            every pool policy as a baseline, plus the twin
    twinsched replay   --stream FILE        feed a recorded event stream to a fresh twin
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .core import SchedError
from .experiment import (TWIN, ExperimentConfig, compare, load_trace, read_decisions,
                         replay, run_experiment, write_comparison, write_decisions)
from .metrics import attribution_table, emit_report
from .stream import FileStream
from .workload import write_swf

log = logging.getLogger("twinsched")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    path = write_swf(load_trace(cfg), out / "trace.swf")
    print(path)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    stream = FileStream(out / "events.ndjson")
    res = run_experiment(cfg, stream=stream)
    emit_report(res.report, out / res.report.method)
    write_decisions(res.decisions, out / "decisions.csv")
    print(json.dumps(res.report.summary(), indent=2))
    if cfg.mode == TWIN:
        for p, pct in attribution_table(res.report).items():
            print(f"{p.value:5s} {pct:6.2f}%")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    stream = FileStream(out / "events.ndjson")
    comp = compare(cfg, stream=stream)
    write_comparison(comp, out)
    print(f"{'method':8s} {'area':>6s} {'score':>10s}")
    for m in comp.reports:
        print(f"{m:8s} {comp.areas[m]:6.3f} {comp.costs[m]:10.2f}")
    for p, pct in comp.attribution.items():
        print(f"{TWIN} via {p.value:5s} {pct:6.2f}%")
    return 0


def cmd_replay(args) -> int:
    cfg = replace(_config(args), mode=TWIN)
    decisions = replay(cfg, FileStream.load(args.stream))
    out = _out(args, cfg)
    write_decisions(decisions, out / "replay_decisions.csv")
    if args.expect:
        expected = [d for d in read_decisions(args.expect) if d[0] >= 0]
        if decisions != expected:
            print("replayed decisions differ from the recording", file=sys.stderr)
            return 1
    print(f"{len(decisions)} decisions written to {out / 'replay_decisions.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twinsched", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [
        ("generate", cmd_generate, "write the configured trace as an SWF file"),
        ("run", cmd_run, "run one experiment"),
        ("compare", cmd_compare, "static baselines and the twin on one trace"),
        ("replay", cmd_replay, "run the twin against a recorded event stream"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the synthetic trace seed")
        p.add_argument("--out", help="output directory")
        p.set_defaults(fn=fn)
        if name == "replay":
            p.add_argument("--stream", required=True, help="recorded events.ndjson")
            p.add_argument("--expect", help="decisions.csv from the live run to check against")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except SchedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
