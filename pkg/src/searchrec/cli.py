"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data or protocol error,
4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cooccurrence import build_cooccurrence, dump_matrix, load_matrix
from .data_model import DataError, parse_time
from .evaluation import (
    DEFAULT_GRIDS,
    METHODS,
    CutoffSplit,
    Settings,
    cutoff_split,
    format_grid,
    format_split_stats,
    grid_search,
    make_scorer,
    parse_grid,
    reports_to_csv,
    reports_to_table,
    score_dump,
    split_training,
    strata_to_table,
    stratify_by_session_length,
    time_quantile,
)
from .factorization import TrainConfig, TrainingError, load_model, train
from .ingestion import Dataset, dataset_statistics, format_statistics, ingest
from .recommenders import (
    EmptyContextError,
    HcfmParams,
    RecommendationPoint,
    copm_scores,
    hcfm_scores,
    rank_order,
    resolve_context,
)
from .sessions import SessionConfig, write_session_dump
from .synthetic import GeneratorConfig, generate

log = logging.getLogger("searchrec")

EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 2, 3, 4


class UsageError(Exception):
    pass


# --- manifest ---------------------------------------------------------------


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, args: dict, inputs: list[Path]) -> None:
    outputs = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": __version__,
        "subcommand": command,
        "args": args,
        "inputs": {str(p): sha256(p) for p in inputs if p.exists()},
        "outputs": {p.name: sha256(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolved(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(ns).items()) if k not in ("func", "command", "verbose")}


# --- shared pieces ------------------------------------------------------------


def _settings(ns) -> Settings:
    return Settings(lam=ns.lam, sigma=ns.sigma, seed=ns.seed, step=ns.step,
                    learning_rate=ns.learning_rate, max_epochs=ns.max_epochs, rel_tol=ns.rel_tol)


def _load(ns) -> Dataset:
    return ingest(ns.data_dir, sessions=SessionConfig.from_days(ns.window_days))


def _cutoff(ns, ds: Dataset):
    if ns.cutoff and ns.cutoff_quantile is not None:
        raise UsageError("give either --cutoff or --cutoff-quantile, not both")
    if ns.cutoff:
        try:
            return parse_time(ns.cutoff)
        except ValueError:
            raise UsageError(f"bad --cutoff {ns.cutoff!r}") from None
    if ns.cutoff_quantile is not None:
        return time_quantile(ds.histories, ns.cutoff_quantile)
    return None


def _inputs(data_dir: str) -> list[Path]:
    d = Path(data_dir)
    return [d / "encounters.csv", d / "searches.csv", d / "synonyms.csv"]


def _point_grid(ns) -> dict[str, list]:
    """Grid holding only the parameter point given by flags."""
    if ns.method == "hcfm":
        return {"ms": [ns.ms], "mc": [ns.mc], "alpha": [ns.alpha], "d": [ns.d], "gamma": [ns.gamma]}
    if ns.method == "copm":
        return {"d": [ns.d], "gamma": [ns.gamma]}
    if ns.method == "tptcf":
        return {"sp": [ns.sp], "st": [ns.st], "alpha": [ns.alpha_t]}
    return {}


def _ms(value: str):
    if value.lower() == "all":
        return "all"
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'all'") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer or 'all'")
    return v


# --- subcommands ---------------------------------------------------------------


def cmd_generate(ns) -> int:
    path = Path(ns.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config = GeneratorConfig.from_kv(path.read_text())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid generator config: {exc}") from None
    out = Path(ns.out)
    generate(config, out)
    (out / "generator.cfg").write_text(config.to_kv())
    write_manifest(out, "generate", _resolved(ns), [path])
    print(f"wrote {out / 'encounters.csv'} and {out / 'searches.csv'}")
    return 0


def cmd_ingest(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(ns)
    sessions = SessionConfig.from_days(ns.window_days)
    (out / "filter_report.txt").write_text(ds.report.to_text())
    (out / "filter_report.kv").write_text(ds.report.to_kv())
    (out / "dataset_stats.txt").write_text(
        format_statistics(dataset_statistics(ds.histories, ds.dictionaries, sessions)))
    (out / "parse_errors.txt").write_text("".join(f"{e}\n" for e in ds.errors))
    write_session_dump(out / "sessions.csv", ds.histories.values(), sessions)
    write_manifest(out, "ingest", _resolved(ns), _inputs(ns.data_dir))
    sys.stdout.write(ds.report.to_text())
    return 0


def cmd_build(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load(ns)
    cutoff = _cutoff(ns, ds)
    if cutoff is None:
        histories, codes, terms = ds.histories, ds.dictionaries.codes, ds.dictionaries.terms
    else:
        histories, codes, terms = split_training(ds.histories, ds.dictionaries.terms,
                                                 ds.dictionaries.codes, cutoff)
        if not histories:
            raise DataError("no training searches before the cut-off")
    A = build_cooccurrence(histories.values(), ns.lam, len(codes), len(terms))
    dump_matrix(A, out / "matrix.txt")
    (out / "codes.txt").write_text("".join(f"{c}\n" for c in codes))
    (out / "terms.txt").write_text("".join(f"{t}\n" for t in terms))
    write_manifest(out, "build", _resolved(ns), _inputs(ns.data_dir))
    print(f"{A.n} codes x {A.m} terms, {A.nnz} non-zero entries")
    return 0


def cmd_train(ns) -> int:
    matrix_path = Path(ns.matrix)
    if not matrix_path.is_file():
        raise UsageError(f"matrix file not found: {matrix_path}")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    A = load_matrix(matrix_path)
    codes_path, terms_path = matrix_path.with_name("codes.txt"), matrix_path.with_name("terms.txt")
    codes = codes_path.read_text().splitlines() if codes_path.exists() else None
    terms = terms_path.read_text().splitlines() if terms_path.exists() else None
    config = TrainConfig(d=ns.d, gamma=ns.gamma, step=ns.step, learning_rate=ns.learning_rate,
                         max_epochs=ns.max_epochs, rel_tol=ns.rel_tol, seed=ns.seed)
    try:
        model = train(A, config, codes, terms)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model.save(out / "model.bin")
    (out / "losses.txt").write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(model.losses)))
    write_manifest(out, "train", _resolved(ns), [matrix_path])
    print(f"trained d={model.d} in {len(model.losses) - 1} epochs, loss {model.losses[-1]:.6g}")
    return 0


def read_contexts(path: Path) -> list[tuple[str, list[str], list[list[str]]]]:
    """Rows ``query_id,recent_terms,recent_encounters``.

    Terms are joined by ``;`` oldest first; encounters are joined by ``|``
    oldest first, each holding ``;``-joined codes.
    """
    from .ingestion import normalize_term

    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "recent_terms", "recent_encounters"]:
            raise DataError(f"{path}: expected header query_id,recent_terms,recent_encounters")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{reader.line_num}: expected 3 fields")
            qid, terms, encs = row
            term_list = [normalize_term(t) for t in terms.split(";") if t.strip()]
            enc_list = [[c.strip() for c in e.split(";") if c.strip()] for e in encs.split("|") if e.strip()]
            rows.append((qid, term_list, enc_list))
    return rows


def cmd_recommend(ns) -> int:
    model_path, ctx_path = Path(ns.model), Path(ns.context)
    for p in (model_path, ctx_path):
        if not p.is_file():
            raise UsageError(f"file not found: {p}")
    model = load_model(model_path)
    if not model.terms or not model.codes:
        raise DataError("model file carries no dictionaries")
    term_ids = {t: i for i, t in enumerate(model.terms)}
    code_ids = {c: i for i, c in enumerate(model.codes)}
    params = HcfmParams(ns.ms, ns.mc, ns.alpha)
    out = open(ns.out, "w", newline="", encoding="utf-8") if ns.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["query_id", "rank", "term", "score"])
        for qid, terms, encs in read_contexts(ctx_path):
            prefix, encounters, unknown = resolve_context(terms, encs, term_ids, code_ids)
            for u in unknown:
                log.warning("query %s: %r not in the model vocabulary, skipped", qid, u)
            point = RecommendationPoint(qid, -1, prefix, encounters)
            if ns.method == "copm":
                try:
                    scores = copm_scores(point, model, ns.sigma)
                except EmptyContextError:
                    scores = np.zeros(model.m)
            else:
                scores = hcfm_scores(point, model, params)
            for r, t in enumerate(rank_order(scores)[: ns.top_n], start=1):
                w.writerow([qid, r, model.terms[t], f"{scores[t]:.6g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _write_eval(out: Path, split: CutoffSplit, reports, ns, settings: Settings) -> None:
    (out / "split_stats.txt").write_text(format_split_stats(split))
    (out / "report.csv").write_text(reports_to_csv(reports))
    (out / "report.txt").write_text(reports_to_table(reports))
    ok = [r for r in reports if not r.error]
    if ok:
        best = ok[0]
        rows = stratify_by_session_length(split, best)
        params = " ".join(format_grid({k: [v] for k, v in best.params.items()}).split())
        (out / "strata.txt").write_text(f"{best.method} {params}\n" + strata_to_table(rows))
        if ns.dump_scores:
            scorer = make_scorer(split, best.method, best.params, settings)
            (out / "scores.csv").write_text(score_dump(split, scorer, ns.dump_scores))


def cmd_evaluate(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _inputs(ns.data_dir)
    if ns.grid:
        grid_path = Path(ns.grid)
        if not grid_path.is_file():
            raise UsageError(f"grid file not found: {grid_path}")
        try:
            grid = parse_grid(grid_path.read_text())
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        inputs.append(grid_path)
    elif ns.command == "grid-search":
        grid = DEFAULT_GRIDS[ns.method]
    else:
        grid = _point_grid(ns)
    ds = _load(ns)
    cutoff = _cutoff(ns, ds)
    if cutoff is None:
        raise UsageError("a cut-off is required (--cutoff or --cutoff-quantile)")
    split = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    settings = _settings(ns)
    reports = grid_search(split, ns.method, grid, settings, workers=ns.workers)
    (out / "grid.txt").write_text(format_grid(grid))
    _write_eval(out, split, reports, ns, settings)
    write_manifest(out, ns.command, _resolved(ns), inputs)
    sys.stdout.write(format_split_stats(split))
    sys.stdout.write(reports_to_table(reports, limit=ns.show))
    if reports and all(r.error for r in reports):
        raise TrainingError(reports[0].error or "training failed", 0)
    return 0


def cmd_replay(ns) -> int:
    path = Path(ns.manifest)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    args = dict(manifest["args"])
    args["out"] = ns.out
    command = manifest["subcommand"]
    parser = build_parser()
    sub_ns = parser.parse_args([command, *_placeholder_args(command, args)])
    for k, v in args.items():
        setattr(sub_ns, k, v)
    sub_ns.command = command
    return sub_ns.func(sub_ns)


def _placeholder_args(command: str, args: dict) -> list[str]:
    """Satisfy required positionals; real values are set from the manifest afterwards."""
    if command in ("ingest", "build", "evaluate", "grid-search"):
        return [str(args["data_dir"]), "--out", str(args["out"])]
    if command == "generate":
        return ["--config", str(args["config"]), "--out", str(args["out"])]
    if command == "train":
        return ["--matrix", str(args["matrix"]), "--out", str(args["out"])]
    raise UsageError(f"cannot replay {command!r}")


# --- parser -------------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("data_dir", help="directory with encounters.csv and searches.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--window-days", type=float, default=90.0)


def _add_model_args(p):
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", choices=["exact", "fixed"], default="exact")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--rel-tol", type=float, default=1e-5)


def _add_cutoff_args(p):
    p.add_argument("--cutoff", help="ISO-8601 cut-off time")
    p.add_argument("--cutoff-quantile", type=float, help="cut-off at this quantile of search times")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="searchrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", required=True, help="key=value generator config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="parse, filter and sessionize a dataset")
    _add_data_args(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build", help="build the co-occurrence matrix")
    _add_data_args(p)
    _add_cutoff_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="factorize a co-occurrence matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="top-N terms for context lines")
    p.add_argument("--model", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("-N", "--top-n", type=int, default=10)
    p.add_argument("--method", choices=["hcfm", "copm"], default="hcfm")
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--ms", type=_ms, default="all")
    p.add_argument("--mc", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    for name, help_ in (("evaluate", "evaluate one parameter point (or --grid)"),
                        ("grid-search", "evaluate a parameter grid")):
        p = sub.add_parser(name, help=help_)
        _add_data_args(p)
        _add_cutoff_args(p)
        _add_model_args(p)
        p.add_argument("--method", choices=METHODS, default="hcfm")
        p.add_argument("--grid", help="key=v1,v2 grid file")
        p.add_argument("--lambda", dest="lam", type=float, default=0.5)
        p.add_argument("--sigma", type=float, default=0.5)
        p.add_argument("--alpha", type=float, default=0.8)
        p.add_argument("--ms", type=_ms, default="all")
        p.add_argument("--mc", type=int, default=2)
        p.add_argument("--sp", type=float, default=0.1, help="TptCF patient similarity threshold")
        p.add_argument("--st", type=float, default=0.1, help="TptCF term similarity threshold")
        p.add_argument("--alpha-t", type=float, default=0.5, help="TptCF similarity weight")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--dump-scores", type=int, default=0, metavar="N",
                       help="write the top-N scored terms per test point")
        p.add_argument("--show", type=int, default=10, help="rows printed to stdout")
        p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except UsageError as exc:
        parser.error(str(exc))
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
