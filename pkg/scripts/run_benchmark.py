"""Geodesic-trap benchmark: Geo-only / Euc-only / Euc+intra / full model over several seeds.

Writes one JSON line per run to --out (if given) and prints the summary table.
"""

import argparse
import json
from dataclasses import replace

from vmnet.benchmark import BenchmarkSpec, Dataset, branch_variants, format_table, run_matrix, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--n-train", type=int, default=40)
    ap.add_argument("--n-test", type=int, default=20)
    ap.add_argument("--variants", default="geo_only,euc_only,euc_intra,full")
    ap.add_argument("--out")
    args = ap.parse_args()

    spec = BenchmarkSpec(n_train=args.n_train, n_test=args.n_test, seeds=tuple(range(args.seeds)))
    if args.epochs:
        spec = replace(spec, hyper=replace(spec.hyper, epochs=args.epochs))
    wanted = args.variants.split(",")
    variants = {k: v for k, v in branch_variants(spec.model).items() if k in wanted}
    fh = open(args.out, "w") if args.out else None

    def log(line):
        print(line, flush=True)
        if fh:
            fh.write(line + "\n")
            fh.flush()

    results = run_matrix(spec, variants, log=log, data=Dataset(spec))
    rows = summarize(results)
    print(format_table(rows))
    if fh:
        fh.write(json.dumps({"summary": rows}) + "\n")
        fh.close()


if __name__ == "__main__":
    main()
