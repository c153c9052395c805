"""Sweep the number of mesh levels carrying geodesic modules (0 = Euclidean branch only)."""

import argparse
from dataclasses import replace

from vmnet.benchmark import BenchmarkSpec, Dataset, format_table, run_matrix, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--n-train", type=int, default=20)
    ap.add_argument("--n-test", type=int, default=10)
    args = ap.parse_args()

    spec = BenchmarkSpec(n_train=args.n_train, n_test=args.n_test,
                         seeds=tuple(range(args.seeds)))
    spec = replace(spec, hyper=replace(spec.hyper, epochs=args.epochs))
    base = spec.model
    variants = {"depth0": replace(base, branch="euc_only")}
    for d in range(1, base.levels + 1):
        variants[f"depth{d}"] = replace(base, refinement_depth=d)
    res = run_matrix(spec, variants, log=lambda s: print(s, flush=True), data=Dataset(spec))
    print(format_table(summarize(res)))


if __name__ == "__main__":
    main()
