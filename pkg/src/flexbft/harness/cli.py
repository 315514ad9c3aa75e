"""Command line entry point: run, corpus, replay, region, compare-qr."""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from ..calculus import compare_qr, region_csv, region_grid
from ..client import export_chain
from ..core import fmt_fraction
from ..netsim import text_projection
from .metrics import TranscriptIndex
from .replay import replay
from .runner import run_scenario
from .scenario import ScenarioError, load_scenario


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational: {text!r}") from None


def write_outputs(result, out_root: Path, plot: bool = True) -> Path:
    cfg = result.config
    out = out_root / cfg.name / str(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transcript.bin").write_bytes(result.transcript)
    (out / "transcript.txt").write_text(text_projection(result.records))
    (out / "report.json").write_text(json.dumps(result.report, indent=2) + "\n")
    for client in result.clients:
        (out / f"chain-{client.name}.jsonl").write_text(export_chain(client.state))
    if plot:
        from . import plots

        plots.timeline(TranscriptIndex(result.records), cfg, out / "timeline.png")
    return out


def summary_lines(report: dict) -> list:
    """Tab-delimited summary: one header row, one row per client, one status row."""
    lines = ["scenario\tseed\tclient\tassumption\theight\tconflict\tfirst_latency"]
    for c in report["clients"]:
        lat = c["first_commit_latency"]["probe"]
        lines.append("\t".join(str(x) for x in (
            report["scenario"], report["seed"], c["name"], c["assumption"],
            c["committed_height"], int(c["conflict_flag"]), "" if lat is None else lat,
        )))
    status = "OK" if report["ok"] else "FAIL " + ",".join(report["flags"])
    lines.append(f"# {report['scenario']} seed={report['seed']} messages={report['message_count']} "
                 f"view_changes={report['view_changes']} {status}")
    return lines


def cmd_run(args) -> int:
    try:
        cfg = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    result = run_scenario(cfg, until=args.until)
    out = write_outputs(result, Path(args.out), plot=not args.no_plot)
    for line in summary_lines(result.report):
        print(line)
    print(f"# outputs in {out}")
    return 0 if result.report["ok"] else 1


def cmd_corpus(args) -> int:
    paths = sorted(Path(args.directory).glob("*.toml"))
    failed = 0
    for p in paths:
        try:
            cfg = load_scenario(p)
        except ScenarioError as exc:
            print(f"{p.name}\tERROR\t{exc}")
            failed += 1
            continue
        result = run_scenario(cfg)
        if args.out:
            write_outputs(result, Path(args.out), plot=not args.no_plot)
        rep = result.report
        status = "PASS" if rep["ok"] else "FAIL " + ",".join(rep["flags"])
        print(f"{cfg.name}\t{status}")
        failed += not rep["ok"]
    return 1 if failed else 0


def cmd_replay(args) -> int:
    res = replay(Path(args.transcript).read_bytes(), run_audits=not args.no_audit)
    print(res.line())
    return 0 if res.ok else 1


def cmd_region(args) -> int:
    reg = region_grid(args.qr, args.step)
    text = region_csv(reg)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from . import plots

        plots.region(reg, args.plot)
    return 0


def cmd_compare(args) -> int:
    rows = compare_qr(args.qr, args.step)
    print("q_r_a,q_r_b,relation,a_max_total,b_max_total,a_max_byz,b_max_byz")
    for c in rows:
        print(",".join([
            fmt_fraction(c.a), fmt_fraction(c.b), c.relation,
            fmt_fraction(c.a_max_total), fmt_fraction(c.b_max_total),
            fmt_fraction(c.a_max_byz), fmt_fraction(c.b_max_byz),
        ]))
    if args.plot:
        from . import plots

        plots.compare([region_grid(q, args.step) for q in dict.fromkeys(args.qr)], args.plot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexbft", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--until", type=int, help="stop before this virtual time")
    r.add_argument("--out", default="out")
    r.add_argument("--no-plot", action="store_true")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("corpus", help="run every scenario in a directory")
    c.add_argument("directory")
    c.add_argument("--out")
    c.add_argument("--no-plot", action="store_true")
    c.set_defaults(func=cmd_corpus)

    rp = sub.add_parser("replay", help="verify a transcript by re-simulation")
    rp.add_argument("transcript")
    rp.add_argument("--no-audit", action="store_true")
    rp.set_defaults(func=cmd_replay)

    g = sub.add_parser("region", help="client support region for one q_r, as CSV")
    g.add_argument("--qr", type=_fraction, required=True)
    g.add_argument("--step", type=_fraction, default=Fraction(1, 20))
    g.add_argument("--csv")
    g.add_argument("--plot")
    g.set_defaults(func=cmd_region)

    k = sub.add_parser("compare-qr", help="compare client regions across q_r values")
    k.add_argument("qr", nargs="+", type=_fraction)
    k.add_argument("--step", type=_fraction, default=Fraction(1, 20))
    k.add_argument("--plot")
    k.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
