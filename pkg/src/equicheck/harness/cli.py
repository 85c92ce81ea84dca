"""``equicheck`` command line.

Every subcommand prints a deterministic report (CSV or JSON). Wall-clock
measurements go to a separate ``timings`` section so the rest of the output
is byte-identical across runs with the same arguments.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Optional

from ..irreps import IrrepsError
from ..model import ModelConfig, ParseError, load_config
from . import bench, body_order, model_check, smoothness, sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6e}"
    if v is None:
        return ""
    return v


def render(fmt: str, rows: list, summary: dict, timings: Optional[dict] = None) -> str:
    if fmt == "json":
        doc = {"rows": rows, "summary": summary}
        if timings is not None:
            doc["timings"] = timings
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if rows:
        names = list(rows[0])
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(r.get(n)) for n in names])
    for title, section in (("summary", summary), ("timings", timings)):
        if section:
            buf.write(f"\n# {title}\n")
            for k in sorted(section):
                w.writerow([k, _fmt(section[k])])
    return buf.getvalue()


def _grids(text: str) -> list:
    try:
        out = []
        for item in text.split(","):
            a, b = item.lower().split("x")
            out.append((int(a), int(b)))
        return out
    except ValueError:
        raise ParseError(f"grids must look like '8x8,10x14', got {text!r}") from None


def _config(args) -> ModelConfig:
    return load_config(args.config) if args.config else ModelConfig()


# --------------------------------------------------------------------------
# subcommands: each returns (rows, summary, timings, ok)


def cmd_sweep(args):
    if args.op or args.l_max is not None or args.grids:
        if not (args.op and args.l_max is not None and args.grids):
            raise ParseError("a custom sweep needs --op, --l-max and --grids")
        report = sweep.equivariance_sweep(
            args.op, args.l_max, args.m_max, _grids(args.grids), args.trials, args.seed, args.path
        )
        rows = [dict(vars(r)) for r in report.rows]
        return rows, {"rows": len(rows)}, None, True
    report = sweep.reference_sweep(args.trials, args.seed)
    rows = sweep.compare_with_reference(report)
    mismatches = sum(not r["match"] for r in rows)
    return rows, {"cells": len(rows), "mismatches": mismatches}, None, mismatches == 0


def cmd_body_order(args):
    pair = body_order.CounterexamplePair.from_json(args.pair) if args.pair else body_order.angle_pair()
    activations = [args.activation] if args.activation else ["gate", "s2", "swiglu_s2"]
    ffns = [args.num_ffns] if args.num_ffns else [1, 2, 3]
    builtin = args.pair is None
    rows, ok = [], True
    for act in activations:
        for n in ffns:
            r = body_order.body_order_probe(act, n, pair, args.seeds, seed=args.seed)
            expected = None
            if builtin and act == "gate":
                expected = "indistinguishable"
            elif builtin and act == "swiglu_s2" and n == 1:
                expected = "distinguishable"
            if expected is not None:
                ok &= r["verdict"] == expected
            rows.append({
                "pair": r["pair"], "activation": act, "num_ffns": n, "median": r["median"],
                "max": r["max"], "verdict": r["verdict"], "expected": expected or "reported",
            })
    return rows, {"pair": pair.name, "seeds": args.seeds}, None, bool(ok)


def cmd_smoothness(args):
    if bool(args.structure) != bool(args.scan):
        raise ParseError("--structure and --scan go together")
    structure, scan = smoothness.load_scenario(args.structure, args.scan) if args.structure else (None, None)
    rep = smoothness.smoothness_scan(structure, scan, _config(args), seed=args.seed)
    summary = {k: rep[k] for k in ("step", "jump_on", "jump_on_half_step", "jump_off", "halving_ratio", "off_on_ratio")}
    summary["crossings"] = len(rep["crossings"])
    if rep["crossings"]:
        ok = 1.6 <= (rep["halving_ratio"] or 0.0) <= 2.4 and (rep["off_on_ratio"] or 0.0) >= 10.0
    else:
        ok = rep["jump_on"] == rep["jump_off"] == 0.0
    rows = [
        {"t": t, "energy_on": e_on, "energy_off": e_off}
        for (t, e_on), (_, e_off) in zip(rep["scan_on"], rep["scan_off"])
    ]
    return rows, summary, None, bool(ok)


def cmd_bench_fused(args):
    r = bench.bench_fused(args.l_max, args.m_max, args.edges, args.repetitions, seed=args.seed)
    ok = r.equal and r.permutations_fused == 0 and r.t_fused <= r.t_unfused
    timings = {**r.timings(), "fused_not_slower": r.t_fused <= r.t_unfused}
    return [r.summary()], {"equal": r.equal}, timings, ok


def cmd_bench_tp(args):
    degrees = [int(v) for v in args.l_max_list.split(",")]
    r = bench.bench_tp(degrees, args.repetitions, args.channels, args.seed)
    agree = max(r.agreement)
    ok = r.slope_grid <= 4.5 and r.slope_cg >= 5.0 and agree <= 1e-5
    rows = [{"l_max": row["l_max"], "relative_difference": row["relative_difference"]} for row in r.rows()]
    timings = {f"t_cg_l{l}": a for l, a in zip(r.l_max, r.t_cg)}
    timings.update({f"t_grid_l{l}": b for l, b in zip(r.l_max, r.t_grid)})
    timings.update(slope_cg=r.slope_cg, slope_grid=r.slope_grid)
    return rows, {"channels": r.channels, "max_relative_difference": agree}, timings, ok


def cmd_model_check(args):
    results = model_check.model_check(_config(args), args.seed, args.trials)
    ok = model_check.summarize(results, args.expect_broken)
    rows = [r.to_dict() for r in results]
    for r in rows:
        r.setdefault("classification", "")
    return rows, {"expect_broken": args.expect_broken, "passed": ok}, None, ok


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="equicheck", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config file (flat key = value)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--expect-broken", action="store_true",
                        help="model-check: succeed only if a rotation check fails")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", parents=[common], help="equivariance error against grid resolution")
    s.add_argument("--op", choices=("gate", "s2", "swiglu_s2"))
    s.add_argument("--l-max", type=int)
    s.add_argument("--m-max", type=int)
    s.add_argument("--grids", help="comma-separated RPHIxRTHETA list")
    s.add_argument("--path", choices=("ffn", "attention"))
    s.add_argument("--trials", type=int, default=32)
    s.set_defaults(run=cmd_sweep)

    s = sub.add_parser("body-order", parents=[common], help="random-weight distinguishability probe")
    s.add_argument("--pair", help="counterexample pair JSON (default: 90 vs 120 degree angle pair)")
    s.add_argument("--activation", choices=("gate", "s2", "swiglu_s2"))
    s.add_argument("--num-ffns", type=int, choices=(1, 2, 3))
    s.add_argument("--seeds", type=int, default=16)
    s.set_defaults(run=cmd_body_order)

    s = sub.add_parser("smoothness", parents=[common], help="energy scan across the cutoff")
    s.add_argument("--structure", help="XYZ file (first frame is used)")
    s.add_argument("--scan", help="scan spec file: moving_atom, direction, t_start, t_stop, step")
    s.set_defaults(run=cmd_smoothness)

    s = sub.add_parser("bench-fused", parents=[common], help="fused vs unfused edge permutation")
    s.add_argument("--l-max", type=int, default=4)
    s.add_argument("--m-max", type=int, default=2)
    s.add_argument("--edges", type=int, default=10_000)
    s.add_argument("--repetitions", type=int, default=bench.MIN_REPETITIONS)
    s.set_defaults(run=cmd_bench_fused)

    s = sub.add_parser("bench-tp", parents=[common], help="tensor-product scaling with l_max")
    s.add_argument("--l-max-list", default="2,4,8,16")
    s.add_argument("--repetitions", type=int, default=bench.MIN_REPETITIONS)
    s.add_argument("--channels", type=int, default=256)
    s.set_defaults(run=cmd_bench_tp)

    s = sub.add_parser("model-check", parents=[common], help="whole-model symmetry checks")
    s.add_argument("--trials", type=int, default=16)
    s.set_defaults(run=cmd_model_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.seed < 0:
        print("equicheck: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows, summary, timings, ok = args.run(args)
    except (ParseError, IrrepsError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"equicheck: {e}", file=sys.stderr)
        return EXIT_USAGE
    text = render(args.format, rows, summary, timings)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
