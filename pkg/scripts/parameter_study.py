"""HR@1/HR@5 of HCFM as one of m_s, m_c or alpha varies with the others at their best values."""

import argparse
import tempfile
from pathlib import Path

from searchrec.evaluation import Settings, cutoff_split, grid_search, time_quantile
from searchrec.ingestion import ingest
from searchrec.synthetic import GeneratorConfig, generate

VALUES = {
    "ms": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20, "all"],
    "mc": [1, 2, 3, 4],
    "alpha": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--p-signal", type=float, default=0.9)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--gamma", type=float, default=0.01)
    args = ap.parse_args()

    data = Path(tempfile.mkdtemp(prefix="params-"))
    generate(GeneratorConfig(seed=args.seed, p_signal=args.p_signal), data)
    ds = ingest(data)
    split = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes,
                         time_quantile(ds.histories, 0.8))
    grid = dict(VALUES, d=[args.d], gamma=[args.gamma])
    reports = grid_search(split, "hcfm", grid, Settings(seed=args.seed))
    best = reports[0].params
    print("best:", " ".join(f"{k}={v}" for k, v in best.items()))
    for key, values in VALUES.items():
        print(f"\n{key:>6}  {'HR@1':>6}  {'HR@5':>6}")
        for v in values:
            want = dict(best, **{key: v})
            (r,) = [r for r in reports if r.params == want]
            print(f"{str(v):>6}  {r.hr[1]:.4f}  {r.hr[5]:.4f}")


if __name__ == "__main__":
    main()
