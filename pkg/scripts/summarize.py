"""Collect report.json files under a results directory into one table."""

import argparse
import csv
import json
import sys
from pathlib import Path


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", type=Path)
    ap.add_argument("--csv", type=Path, help="write the table here instead of stdout")
    args = ap.parse_args(argv)
    rows = []
    for path in sorted(args.root.rglob("report.json")):
        rep = json.loads(path.read_text())
        for c in rep["criteria"]:
            rows.append([rep["experiment"], c["id"], c["lhs"], c["rhs"], c["tolerance"], c["ci"],
                         int(c["passed"])])
    if not rows:
        print(f"no reports under {args.root}", file=sys.stderr)
        return 1
    fh = args.csv.open("w", newline="") if args.csv else sys.stdout
    wr = csv.writer(fh, lineterminator="\n")
    wr.writerow(["experiment", "criterion", "lhs", "rhs", "tolerance", "ci", "passed"])
    wr.writerows(rows)
    failed = sum(1 - r[-1] for r in rows)
    print(f"{len(rows)} criteria, {failed} failed", file=sys.stderr)
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
