"""Tag queries against the directory paths: a value cut and a flag cut.

    python3 scripts/run_tag_vs_directory.py --root /tmp/evtag-default
"""
import argparse
from pathlib import Path

from evtag import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, required=True)
    ap.add_argument("--profile", default="default", choices=("default", "small"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--value-query", default=bench.ET_QUERY)
    ap.add_argument("--flag-query", default=bench.ELECTRON_EXPR)
    ap.add_argument("--format", default="table", choices=("table", "csv"))
    args = ap.parse_args()

    if (args.root / "spec.json").exists():
        ds = bench.Dataset(args.root)
    else:
        ds = bench.generate(bench.DatasetSpec.profile(args.profile, seed=args.seed), args.root)
    runs = [
        ("directory-fallback", args.value_query),
        ("tag-query", args.value_query),
        ("directory-select", args.flag_query),
        ("tag-query", args.flag_query),
    ]
    try:
        results = [bench.run_scenario(ds, s, query, repeat=args.repeat) for s, query in runs]
    finally:
        ds.close()
    print(bench.emit_report(results, args.format))


if __name__ == "__main__":
    main()
