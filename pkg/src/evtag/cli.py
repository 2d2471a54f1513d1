"""Command line interface: ``evtag <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import bench
from . import query as q
from .event_directory import fetch, parse_directory, select, validate_flag_expr
from .filestore import DAY, open_namespace
from .schema import default_schema
from .synth import PhysicsModel, DEFAULT_FLAG_PROB, DEFAULT_FLAG_PROBS, DEFAULT_ET_SCALE
from .tagdb import DEFAULT_SIZE_CAP, open_federation

log = logging.getLogger("evtag")


def _flag_prob(text: str) -> tuple[int, float]:
    bit, _, p = text.partition("=")
    try:
        return int(bit), float(p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected BIT=PROB, got {text!r}") from None


def cmd_generate(args) -> int:
    probs = dict(DEFAULT_FLAG_PROBS)
    probs.update(dict(args.flag_prob or []))
    overrides = {
        k: v
        for k, v in {
            "n_events": args.events,
            "n_runs": args.runs,
            "payload_bytes": args.payload_bytes,
            "seed": args.seed,
            "non_event_fraction": args.non_event_fraction,
        }.items()
        if v is not None
    }
    model = PhysicsModel(probs, args.default_flag_prob, args.et_scale)
    spec = bench.DatasetSpec.profile(args.profile, model=model, **overrides)
    t = time.perf_counter()
    ds = bench.generate(
        spec,
        args.root,
        build_dirs=not args.stores_only,
        build_tagdb=not args.stores_only,
        size_cap=args.size_cap,
    )
    print(f"generated {spec.n_events} events in {spec.n_runs} runs under {ds.root} ({time.perf_counter() - t:.1f} s)")
    return 0


def cmd_build_dir(args) -> int:
    ds = bench.Dataset(args.root)
    bench.build_directories(ds)
    for run in ds.runs:
        print(f"{ds.directory_path(run)}: {len(ds.directory(run))} entries")
    return 0


def cmd_build_tagdb(args) -> int:
    ds = bench.Dataset(args.root)
    path = ds.root / "tagdb"
    if path.exists():
        if not args.force:
            print(f"error: {path} exists (use --force to rebuild)", file=sys.stderr)
            return 1
        for f in path.iterdir():
            f.unlink()
    fed = bench.build_tagdb_from_stores(ds, size_cap=args.size_cap)
    print(f"{path}: {fed.n_records} records, {len(fed.runs)} containers, {len(fed.db_files)} database files")
    return 0


def cmd_select(args) -> int:
    schema = default_schema()
    expr = validate_flag_expr(q.parse_query(args.expr, schema))
    if args.directory:
        dirs = [(parse_directory(Path(args.directory).read_text()), None)]
    else:
        ds = bench.Dataset(args.root)
        dirs = [(ds.directory(run), ds.run_reader(run) if args.fetch else None) for run in ds.runs]
    total = 0
    for d, reader in dirs:
        entries = select(d, expr)
        total += len(entries)
        if args.count:
            continue
        if reader is not None:
            for e, rec in zip(entries, fetch(entries, reader)):
                print(f"{e.run} {e.event} {e.offset} {len(rec.payload)}")
        else:
            for e in entries:
                print(f"{e.seq_id} {e.run} {e.event} {e.offset}")
    if args.count:
        print(total)
    return 0


def cmd_query(args) -> int:
    fed = open_federation(Path(args.root) / "tagdb") if not args.federation else open_federation(args.federation)
    texts = q.load_queries(args.query_file) if args.query_file else [args.query]
    run_range = tuple(args.run_range) if args.run_range else None
    for text in texts:
        ast = q.parse_query(text, fed.schema)
        if args.columns is not None:
            cols = [c for c in args.columns.split(",") if c]
            sys.stdout.write(fed.export_columns(cols, ast).to_text(delimiter=args.delimiter))
            continue
        if args.count:
            s = fed.count(ast, run_range)
            print(f"{s.matched} of {s.scanned}\t{q.format_query(ast)}")
        else:
            for hit in fed.query(ast, run_range):
                print(f"{hit.run} {hit.event} {hit.location.file_id} {hit.location.offset}")
    return 0


def cmd_bench(args) -> int:
    results = []
    if args.sweep == "sizes":
        feds = [open_federation(p) for p in args.federation]
        results = bench.size_sweep(feds, args.repeat)
    elif args.sweep == "variables" and args.federation:
        results = bench.variables_sweep(open_federation(args.federation[0]), repeat=args.repeat)
    else:
        ds = bench.Dataset(args.root)
        if args.sweep == "variables":
            results = bench.variables_sweep(ds.federation, repeat=args.repeat)
        else:
            for name in args.scenario or bench.SCENARIOS:
                results.append(bench.run_scenario(ds, name, args.query, args.repeat))
    if args.out:
        bench.save_results(results, args.out)
    sys.stdout.write(bench.emit_report(results, args.format))
    return 0


def cmd_report(args) -> int:
    sys.stdout.write(bench.emit_report(bench.load_results(args.results), args.format))
    return 0


def cmd_fs(args) -> int:
    ns = open_namespace(args.fs_root, args.capacity, eviction_age=args.eviction_age_days * DAY)
    if args.fs_command == "register":
        ns.register(args.name, args.path, pinned=args.pinned)
        print(f"registered {args.name}")
    elif args.fs_command == "request":
        print(ns.request(args.name))
    elif args.fs_command == "list":
        for d in ns.list():
            state = "staged" if d.staged else "slow"
            pin = "pinned" if d.pinned else "-"
            print(f"{d.name}\t{d.size}\t{state}\t{pin}\t{d.slow_path}")
    elif args.fs_command == "sweep":
        for name in ns.sweep():
            print(f"evicted {name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evtag", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and build its access paths")
    g.add_argument("--root", required=True)
    g.add_argument("--profile", choices=("default", "small"), default="default")
    g.add_argument("--events", type=int)
    g.add_argument("--runs", type=int)
    g.add_argument("--payload-bytes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--non-event-fraction", type=float)
    g.add_argument("--flag-prob", type=_flag_prob, action="append", metavar="BIT=PROB")
    g.add_argument("--default-flag-prob", type=float, default=DEFAULT_FLAG_PROB)
    g.add_argument("--et-scale", type=float, default=DEFAULT_ET_SCALE)
    g.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)
    g.add_argument("--stores-only", action="store_true", help="skip directory and tag database builds")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-dir", help="(re)build the event directories from the stores")
    b.add_argument("--root", required=True)
    b.set_defaults(func=cmd_build_dir)

    t = sub.add_parser("build-tagdb", help="(re)build the tag database from the stores")
    t.add_argument("--root", required=True)
    t.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_build_tagdb)

    s = sub.add_parser("select", help="select events from event directories by flag expression")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--root")
    src.add_argument("--directory", help="a single directory text file")
    s.add_argument("--expr", required=True, help="e.g. 'flag(3) and not flag(0)'")
    s.add_argument("--count", action="store_true")
    s.add_argument("--fetch", action="store_true", help="read the selected events from the store")
    s.set_defaults(func=cmd_select)

    qp = sub.add_parser("query", help="query the tag database")
    src = qp.add_mutually_exclusive_group(required=True)
    src.add_argument("--root")
    src.add_argument("--federation")
    qsrc = qp.add_mutually_exclusive_group(required=True)
    qsrc.add_argument("--query")
    qsrc.add_argument("--query-file")
    qp.add_argument("--run-range", type=int, nargs=2, metavar=("LO", "HI"))
    qp.add_argument("--count", action="store_true")
    qp.add_argument("--columns", help="export these variables (comma separated) instead of hits")
    qp.add_argument("--delimiter", default=",")
    qp.set_defaults(func=cmd_query)

    be = sub.add_parser("bench", help="run timing scenarios")
    be.add_argument("--root")
    be.add_argument("--scenario", action="append", choices=bench.SCENARIOS)
    be.add_argument("--query", help="query or flag expression for scenarios that take one")
    be.add_argument("--sweep", choices=("variables", "sizes"))
    be.add_argument("--federation", action="append", default=[], help="federations for --sweep sizes")
    be.add_argument("--repeat", type=int, default=3)
    be.add_argument("--format", choices=bench.REPORT_FORMATS, default="table")
    be.add_argument("--out", help="save results as JSON")
    be.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="format saved bench results")
    r.add_argument("--results", required=True)
    r.add_argument("--format", choices=bench.REPORT_FORMATS, default="table")
    r.set_defaults(func=cmd_report)

    fs = sub.add_parser("fs", help="filestore namespace operations")
    fs.add_argument("--fs-root", required=True)
    fs.add_argument("--capacity", type=int)
    fs.add_argument("--eviction-age-days", type=float, default=3.0)
    fsub = fs.add_subparsers(dest="fs_command", required=True)
    reg = fsub.add_parser("register")
    reg.add_argument("name")
    reg.add_argument("path")
    reg.add_argument("--pinned", action="store_true")
    req = fsub.add_parser("request")
    req.add_argument("name")
    fsub.add_parser("list")
    fsub.add_parser("sweep")
    fs.set_defaults(func=cmd_fs)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "bench" and not args.root and not (args.sweep and args.federation):
        parser.error("bench needs --root, or --federation with --sweep")
    if args.command == "bench" and args.sweep == "sizes" and not args.federation:
        parser.error("--sweep sizes needs at least one --federation")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report any failure as a diagnostic
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
