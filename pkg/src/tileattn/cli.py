"""Command-line entry point: ``tileattn {check,bench,tune,report}``.

Exit codes: 0 ok, 1 correctness failure, 2 config/usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import analysis, harness
from .config import GridConfig, load_config_file
from .errors import ConfigError, RecordFormatError
from .tensors import ElemType, MaskSpec, Shape, make_input

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
CHECK_S = (64, 128, 256)

log = logging.getLogger("tileattn")


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", help="log every measured point")
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--s", help="comma-separated sequence lengths")
    p.add_argument("--d", help="comma-separated head dimensions")
    p.add_argument("--dtype", help="comma-separated dtypes (f32, f16, bf16)")
    p.add_argument("--causal", choices=["on", "off", "both"])
    p.add_argument("--nw", type=int, help="warmup iterations")
    p.add_argument("--nr", type=int, help="timed iterations")
    p.add_argument("--tm", help="comma-separated query-tile sizes")
    p.add_argument("--tn", help="comma-separated key/value-tile sizes")
    p.add_argument("--stages", help="comma-separated lookahead depths")
    p.add_argument("--layout", help="row, col, or both")
    p.add_argument("--b", type=int, help="batch size")
    p.add_argument("--h", type=int, help="head count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tileattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("check", "correctness gate at S in {64,128,256}"),
                            ("bench", "full grid sweep to CSV + JSON manifest"),
                            ("tune", "schedule sweep per shape plus sensitivity table")):
        _add_grid_flags(sub.add_parser(name, help=help_text))
    rep = sub.add_parser("report", help="plots and summary tables from benchmark CSVs")
    rep.add_argument("csv", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, default=Path("report"))
    rep.add_argument("--method", default="tiled")
    rep.add_argument("--baseline", default="eager")
    rep.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args) -> GridConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in ("out", "seed", "methods", "s", "d", "dtype", "causal",
                                               "nw", "nr", "tm", "tn", "stages", "layout", "b", "h")}
    cfg = GridConfig.from_sources(file_values, overrides)
    return cfg.validate(harness.METHODS)


def _cell(rec) -> str:
    mask = "causal" if rec.causal else "none"
    sched = f" {analysis.schedule_label(rec)}" if rec.t_m is not None else ""
    return f"{rec.method}{sched} S={rec.S} D={rec.D} {rec.dtype} {mask}"


def cmd_check(cfg: GridConfig) -> int:
    failures, total = [], 0
    print(f"{'result':<6} {'method':<10} {'schedule':<16} {'S':>4} {'D':>4} {'dtype':<8} {'mask':<8} max_abs_err / tol")
    for name in cfg.methods:
        method = harness.METHODS[name]
        if not method.available:
            print(f"{'n/a':<6} {name:<10} {method.detail}")
            continue
        scheds = cfg.schedules if method.uses_schedule else [None]
        for sched, S, D, dtype, mode in ((sc, S, D, dt, m) for sc in scheds for S in CHECK_S
                                          for D in cfg.D for dt in cfg.dtypes
                                          for m in ("none", "causal", "padding")):
            et = ElemType.parse(dtype)
            shape = Shape(cfg.B, cfg.H, S, D)
            if mode == "padding":
                mask = MaskSpec.padding([max(0, S - S // 4 - b) for b in range(cfg.B)])
            else:
                mask = MaskSpec.causal() if mode == "causal" else MaskSpec.none()
            label = sched.label if sched is not None else "-"
            total += 1
            try:
                fn = method.factory(sched, harness.DEFAULT_CACHE, cfg.threads)
                res = harness.check_correctness(fn, harness.Workload(make_input(shape, et, cfg.seed), mask), et)
                passed, detail = res.passed, f"{res.max_abs_err:.2e} / {res.tol_used:.0e}"
            except harness.UnsupportedScheduleError as exc:
                passed, detail = False, f"unsupported: {exc}"
            except harness.ResourceError as exc:
                passed, detail = False, f"oom: {exc}"
            word = "PASS" if passed else "FAIL"
            print(f"{word:<6} {name:<10} {label:<16} {S:>4} {D:>4} {et.value:<8} {mode:<8} {detail}")
            if not passed:
                failures.append(f"{name} {label} S={S} D={D} {et.value} {mode}")
    print(f"{total - len(failures)}/{total} cells passed")
    for cell in failures:
        print(f"FAILED: {cell}")
    return EXIT_CHECK if failures else EXIT_OK


def _progress(rec) -> None:
    if rec.status == "ok":
        log.info("%-48s median %.3f ms  p95 %.3f ms", _cell(rec), rec.median_ms, rec.p95_ms)
    else:
        log.info("%-48s %s: %s", _cell(rec), rec.status, rec.status_detail)


def cmd_bench(cfg: GridConfig) -> int:
    result = harness.run_grid(cfg, progress=_progress)
    out = Path(cfg.out)
    csv_path = harness.write_records(result.records, out / "bench.csv")
    harness.write_manifest(result.manifest, out / "bench_manifest.json")
    bad = [r for r in result.records if r.status == "check_failed"]
    print(f"wrote {len(result.records)} records to {csv_path}")
    for r in bad:
        print(f"check_failed: {_cell(r)}: {r.status_detail}")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_tune(cfg: GridConfig) -> int:
    cfg.methods = [m for m in cfg.methods if harness.METHODS[m].uses_schedule] or ["tiled"]
    result = harness.run_grid(cfg, sweep_schedules=True, progress=_progress)
    out = Path(cfg.out)
    harness.write_records(result.records, out / "tune.csv")
    harness.write_manifest(result.manifest, out / "tune_manifest.json")
    rows = []
    for key, group in analysis.group_by_shape(result.records, None).items():
        try:
            rows.append(analysis.sensitivity_row(group))
        except analysis.InsufficientDataError as exc:
            print(f"no sensitivity row for {key}: {exc}")
    analysis.write_sensitivity_csv(rows, out / "sensitivity.csv")
    print(f"wrote {len(result.records)} tuning records and {len(rows)} sensitivity rows to {out}")
    for r in rows:
        print(f"{r.regime:<6} S={r.S:<5} D={r.D:<4} {r.dtype:<8} causal={str(r.causal).lower():<5} "
              f"best {r.best:<16} runner-up {r.runner_up:<16} drop {r.drop_percent:.2f}%")
    bad = [r for r in result.records if r.status == "check_failed"]
    return EXIT_CHECK if bad else EXIT_OK


def _num(x: float) -> str:
    return "NaN" if math.isnan(x) else repr(x)


def cmd_report(paths, out: Path, method: str, baseline: str) -> int:
    records = []
    for p in paths:
        records.extend(harness.read_records(p))
    out.mkdir(parents=True, exist_ok=True)
    if not records:
        print("no records to report")
        return EXIT_OK
    written = analysis.emit_plots(records, out, method, baseline)

    # full regime table across every dtype/mask slice
    slices = sorted({(r.dtype, r.causal) for r in records})
    with (out / "regime_all.csv").open("w") as fh:
        fh.write("dtype,causal,S,D,percent\n")
        for dtype, causal in slices:
            for c in analysis.regime_map(records, method, baseline, dtype=dtype, causal=causal):
                fh.write(f"{dtype},{str(causal).lower()},{c.S},{c.D},{_num(c.percent_of_baseline)}\n")

    others = sorted({r.method for r in records} - {method})
    table = {f"{method} / {o}": analysis.aggregate_ratios(records, method, o) for o in others}
    analysis.write_aggregate_csv(table, out / "aggregate.csv")
    if baseline in others:
        by_d = {f"D={d}": s for d, s in analysis.aggregate_by(records, method, baseline, "D").items()}
        analysis.write_aggregate_csv(by_d, out / "aggregate_by_D.csv")

    with (out / "metrics.csv").open("w") as fh:
        fh.write("method,B,H,S,D,dtype,causal,schedule,median_ms,tokens_per_s,bw_proxy,flop_per_s,status\n")
        for r in records:
            flops = analysis.flop_rate(r.B, r.H, r.S, r.D, r.median_ms) if r.status == "ok" else float("nan")
            sched = analysis.schedule_label(r) if r.t_m is not None else ""
            nums = ",".join(_num(x) for x in (r.median_ms, r.tokens_per_s, r.bw_proxy, flops))
            fh.write(f"{r.method},{r.B},{r.H},{r.S},{r.D},{r.dtype},{str(r.causal).lower()},{sched},"
                     f"{nums},{r.status}\n")

    sens = []
    for group in analysis.group_by_shape(records, method).values():
        try:
            sens.append(analysis.sensitivity_row(group))
        except analysis.InsufficientDataError:
            pass
    if sens:
        analysis.write_sensitivity_csv(sens, out / "sensitivity.csv")

    print(analysis.format_aggregate_table(table))
    print(f"wrote {len(written)} plot files to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.out, args.method, args.baseline)
        cfg = config_from_args(args)
        return {"check": cmd_check, "bench": cmd_bench, "tune": cmd_tune}[args.command](cfg)
    except ConfigError as exc:
        print(f"tileattn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RecordFormatError) as exc:
        print(f"tileattn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
