"""Best HCFM and PTN HR@1 as the share of planted searches grows."""

import argparse
import tempfile
from pathlib import Path

from searchrec.evaluation import Settings, cutoff_split, grid_search, time_quantile
from searchrec.ingestion import ingest
from searchrec.synthetic import GeneratorConfig, generate

GRID = {"ms": [1, "all"], "mc": [1, 2], "alpha": [0.0, 0.4, 0.8], "d": [8, 16], "gamma": [0.01]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--levels", default="0,0.25,0.5,0.75,0.9,1.0")
    args = ap.parse_args()
    print(f"{'p_signal':>8}  {'points':>6}  {'HCFM@1':>7}  {'HCFM@5':>7}  {'PTN@1':>7}")
    for p in (float(x) for x in args.levels.split(",")):
        data = Path(tempfile.mkdtemp(prefix="sweep-"))
        generate(GeneratorConfig(seed=args.seed, p_signal=p), data)
        ds = ingest(data)
        split = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes,
                             time_quantile(ds.histories, 0.8))
        # at p_signal=1 only planted terms exist, so d has to shrink with the vocabulary
        cap = min(len(split.codes), len(split.terms)) - 1
        grid = dict(GRID, d=sorted({min(d, cap) for d in GRID["d"]}))
        h = grid_search(split, "hcfm", grid, Settings(seed=args.seed))
        ptn = grid_search(split, "ptn")[0]
        print(f"{p:>8.2f}  {len(split.test_points):>6}  {max(r.hr[1] for r in h if not r.error):>7.4f}  "
              f"{max(r.hr[5] for r in h if not r.error):>7.4f}  {ptn.hr[1]:>7.4f}")


if __name__ == "__main__":
    main()
