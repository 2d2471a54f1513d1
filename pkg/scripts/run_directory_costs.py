"""Directory overhead and selection costs on a generated dataset.

    python3 scripts/run_directory_costs.py --root /tmp/evtag-default
"""
import argparse
from pathlib import Path

from evtag import bench

SCENARIOS = (
    "sequential-read-all",
    "directory-no-selection",
    "directory-select-half",
    "directory-select-twentieth",
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, required=True)
    ap.add_argument("--profile", default="default", choices=("default", "small"))
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--format", default="table", choices=("table", "csv"))
    args = ap.parse_args()

    if (args.root / "spec.json").exists():
        ds = bench.Dataset(args.root)
    else:
        ds = bench.generate(bench.DatasetSpec.profile(args.profile, seed=args.seed), args.root)
    try:
        results = [bench.run_scenario(ds, s, repeat=args.repeat) for s in SCENARIOS]
    finally:
        ds.close()
    print(bench.emit_report(results, args.format))


if __name__ == "__main__":
    main()
