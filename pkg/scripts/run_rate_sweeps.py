"""Tag query rate against query variables and against database size.

Writes two gnuplot-style data files into --out.
"""
import argparse
from pathlib import Path

from evtag import bench
from evtag.tagdb import open_federation


def federation(root: Path, n: int):
    path = root / f"tags_{n}"
    if (path / "catalog.txt").exists():
        return open_federation(path)
    return bench.generate_tag_federation(path, n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, required=True, help="where tag-only federations are built or reused")
    ap.add_argument("--sizes", type=int, nargs="+", default=[100_000, 1_000_000])
    ap.add_argument("--max-vars", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("."))
    args = ap.parse_args()

    feds = [federation(args.root, n) for n in args.sizes]
    try:
        by_vars = bench.variables_sweep(feds[0], args.max_vars, args.repeat)
        by_size = bench.size_sweep(feds, args.repeat)
    finally:
        for f in feds:
            f.close()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, results in (("rate_vs_variables.dat", by_vars), ("rate_vs_size.dat", by_size)):
        text = bench.emit_report(results, "plotdata")
        (args.out / name).write_text(text + "\n")
        print(text)


if __name__ == "__main__":
    main()
