"""Cut-off split, hit rate, grid search and session-length strata.

All model inputs come from events strictly before the cut-off. Each
session that straddles the cut-off contributes one test point: its first
search at or after the cut-off. The earlier members of that session form
the search context; every encounter up to the target time forms the
encounter context.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

import numpy as np

from .cooccurrence import build_cooccurrence
from .data_model import (
    DataError,
    Encounter,
    PatientHistory,
    SearchEvent,
    Vocabulary,
    build_history,
    format_time,
    with_sessions,
)
from .factorization import FactorModel, TrainConfig, TrainingError, train
from .recommenders import (
    EmptyContextError,
    HcfmParams,
    RecommendationPoint,
    TptcfModel,
    TptcfParams,
    aggregate_recent_terms,
    hcfm_scores,
    copm_scores,
    ptn_scores,
    rank_of_truth,
    weighted_code_vector,
)

log = logging.getLogger(__name__)

KS = (1, 2, 3, 4, 5, 10, 20)
STRATA_KS = (1, 5, 10)
METHODS = ("hcfm", "copm", "ptn", "tptcf", "random")

DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "hcfm": {
        "ms": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20, "all"],
        "mc": [1, 2, 3, 4],
        "alpha": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "d": [32, 64],
        "gamma": [0.01, 0.05],
    },
    "copm": {"d": [32, 64], "gamma": [0.01, 0.05]},
    "ptn": {},
    "tptcf": {"sp": [0.1], "st": [0.1], "alpha": [0.1, 0.3, 0.5, 0.7, 0.9]},
    "random": {},
}


class EmptyTestError(DataError):
    pass


@dataclass(frozen=True)
class TestPoint:
    __test__ = False  # not a pytest class

    point: RecommendationPoint
    truth: int | None
    truth_raw: str
    session_length: int


@dataclass
class CutoffSplit:
    cutoff: datetime
    train: dict[str, PatientHistory]
    codes: Vocabulary
    terms: Vocabulary
    test_points: list[TestPoint]
    stats: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Settings:
    """Values shared by every grid point of a run."""

    lam: float = 0.5
    sigma: float = 0.5
    seed: int = 0
    step: str = "exact"
    learning_rate: float = 1e-3
    max_epochs: int = 500
    rel_tol: float = 1e-5

    def train_config(self, d: int, gamma: float) -> TrainConfig:
        return TrainConfig(d=d, gamma=gamma, step=self.step, learning_rate=self.learning_rate,
                           max_epochs=self.max_epochs, rel_tol=self.rel_tol, seed=self.seed)


@dataclass
class EvalReport:
    method: str
    params: dict[str, Any]
    hr: dict[int, float]
    ranks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))
    config: dict[str, Any] = field(default_factory=dict)
    strata: list[dict[str, Any]] = field(default_factory=list)
    best_for: list[int] = field(default_factory=list)
    error: str | None = None


# --- split ----------------------------------------------------------------


def time_quantile(histories: Mapping[str, PatientHistory], q: float) -> datetime:
    """The ``q`` quantile of all search timestamps (an observed timestamp)."""
    times = sorted(s.time for h in histories.values() for s in h.searches)
    if not times:
        raise DataError("no searches")
    return times[min(int(q * (len(times) - 1)), len(times) - 1)]


def split_training(
    histories: Mapping[str, PatientHistory],
    terms: Vocabulary,
    codes: Vocabulary,
    cutoff: datetime,
) -> tuple[dict[str, PatientHistory], Vocabulary, Vocabulary]:
    """Pre-cut-off events of patients with at least one pre-cut-off search.

    Ids are reassigned in first-seen order over the training events, so
    the result does not depend on anything at or after the cut-off.
    """
    train_codes, train_terms = Vocabulary(), Vocabulary()
    kept: list[tuple[PatientHistory, list, list]] = []
    for pid in sorted(histories):
        h = histories[pid]
        srch = [s for s in h.searches if s.time < cutoff]
        if not srch:
            continue
        encs = [e for e in h.encounters if e.time < cutoff]
        kept.append((h, encs, srch))
    for _, encs, _ in kept:
        for e in encs:
            for c in e.codes:
                train_codes.add(codes.raw(c))
    for _, _, srch in kept:
        for s in srch:
            train_terms.add(terms.raw(s.term))

    out = {}
    for h, encs, srch in kept:
        new_e = [Encounter(h.patient, e.time, tuple(train_codes.id(codes.raw(c)) for c in e.codes))
                 for e in encs]
        new_s = [SearchEvent(h.patient, s.time, train_terms.id(terms.raw(s.term))) for s in srch]
        th = build_history(new_e, new_s, patient=h.patient)
        if srch[0].session_id is not None:
            first = srch[0].session_id
            th = with_sessions(th, [s.session_id - first for s in srch])
        out[h.patient] = th
    return out, train_codes, train_terms


def cutoff_split(
    histories: Mapping[str, PatientHistory],
    terms: Vocabulary,
    codes: Vocabulary,
    cutoff: datetime,
) -> CutoffSplit:
    """``histories`` must be sessionized over their full search sequences."""
    train, train_codes, train_terms = split_training(histories, terms, codes, cutoff)
    points: list[TestPoint] = []
    for pid in sorted(train):
        h = histories[pid]
        k = next((i for i, s in enumerate(h.searches) if s.time >= cutoff), None)
        if k is None or k == 0:
            continue
        target = h.searches[k]
        if target.session_id is None:
            raise DataError("histories must be sessionized before splitting")
        if h.searches[k - 1].session_id != target.session_id:
            continue
        members = [s for s in h.searches if s.session_id == target.session_id]
        prefix = tuple(train_terms.id(terms.raw(s.term))
                       for s in h.searches[:k] if s.session_id == target.session_id)
        upto = -1 if target.matched_encounter is None else target.matched_encounter
        encs = tuple(
            tuple(train_codes.id(codes.raw(c)) for c in e.codes if codes.raw(c) in train_codes)
            for e in h.encounters[: upto + 1]
        )
        raw = terms.raw(target.term)
        point = RecommendationPoint(
            patient=pid,
            target_index=k,
            prefix=prefix,
            encounters=encs,
            history_terms=tuple(s.term for s in train[pid].searches),
        )
        points.append(TestPoint(point, train_terms.get(raw), raw, len(members)))
    if not points:
        raise EmptyTestError(f"no test points for cut-off {format_time(cutoff)}")

    n_train_searches = sum(x.n_searches for x in train.values())
    n_train_enc = sum(x.n_encounters for x in train.values())
    n_sessions = sum(len({s.session_id for s in x.searches}) for x in train.values())
    stats = {
        "P_t": len(train),
        "P_e": len({p.point.patient for p in points}),
        "T_t": len(train_terms),
        "T_e": len({p.truth_raw for p in points}),
        "S_t": n_sessions,
        "searches_per_session": n_train_searches / max(n_sessions, 1),
        "E_t/P_t": n_train_enc / max(len(train), 1),
        "test_points": len(points),
        "test_truth_unseen": sum(p.truth is None for p in points),
    }
    return CutoffSplit(cutoff, train, train_codes, train_terms, points, stats)


def format_split_stats(split: CutoffSplit) -> str:
    s = split.stats
    head = ["Cut-off Time", "P_t", "P_e", "T_t", "T_e", "S_t", "T_t/S_t", "E_t/P_t"]
    row = [format_time(split.cutoff), s["P_t"], s["P_e"], s["T_t"], s["T_e"], s["S_t"],
           f"{s['searches_per_session']:.2f}", f"{s['E_t/P_t']:.2f}"]
    widths = [max(len(str(a)), len(str(b))) for a, b in zip(head, row)]
    lines = ["  ".join(f"{h:>{w}}" for h, w in zip(head, widths)),
             "  ".join(f"{v:>{w}}" for v, w in zip(row, widths)),
             f"test points: {s['test_points']} (truth unseen in training: {s['test_truth_unseen']})"]
    return "\n".join(lines) + "\n"


# --- metrics --------------------------------------------------------------


def hit_rate(ranks: Sequence[int] | np.ndarray, k: int) -> float:
    """Share of points whose truth is within the top ``k``; rank 0 marks an automatic miss."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = np.asarray(ranks)
    if r.size == 0:
        return 0.0
    return float(np.mean((r >= 1) & (r <= k)))


def hit_rates(ranks, ks: Iterable[int] = KS) -> dict[int, float]:
    return {k: hit_rate(ranks, k) for k in ks}


def ranks_from_lists(scored_lists: Sequence, truths: Sequence[int | None]) -> np.ndarray:
    return np.array([0 if t is None else sl.rank_of(t) for sl, t in zip(scored_lists, truths)],
                    dtype=np.int64)


def _rank(scores: np.ndarray, truth: int | None) -> int:
    return 0 if truth is None else rank_of_truth(scores, truth)


# --- method evaluation ----------------------------------------------------


def train_model(split: CutoffSplit, settings: Settings, d: int, gamma: float) -> FactorModel:
    A = build_cooccurrence(split.train.values(), settings.lam, len(split.codes), len(split.terms))
    return train(A, settings.train_config(d, gamma), split.codes.items, split.terms.items)


def _hcfm_group(split: CutoffSplit, settings: Settings, d: int, gamma: float,
                ms_values, mc_values, alphas) -> list[EvalReport]:
    try:
        model = train_model(split, settings, d, gamma)
    except (TrainingError, ValueError) as exc:
        return [EvalReport("hcfm", {"ms": ms, "mc": mc, "alpha": a, "d": d, "gamma": gamma},
                           {}, config=_echo(settings, d, gamma), error=str(exc))
                for ms in ms_values for mc in mc_values for a in alphas]
    tps = split.test_points
    ranks = {key: np.zeros(len(tps), dtype=np.int64)
             for key in itertools.product(ms_values, mc_values, alphas)}
    for i, tp in enumerate(tps):
        if tp.truth is None:
            continue
        for ms in ms_values:
            x = model.V @ aggregate_recent_terms(tp.point, model, ms)
            for mc in mc_values:
                y = model.V @ weighted_code_vector(tp.point, model, ms, mc)
                for a in alphas:
                    ranks[(ms, mc, a)][i] = rank_of_truth(a * x + (1.0 - a) * y, tp.truth)
    return [EvalReport("hcfm", {"ms": ms, "mc": mc, "alpha": a, "d": d, "gamma": gamma},
                       hit_rates(r), ranks=r, config=_echo(settings, d, gamma))
            for (ms, mc, a), r in ranks.items()]


def _copm_group(split: CutoffSplit, settings: Settings, d: int, gamma: float) -> list[EvalReport]:
    params = {"d": d, "gamma": gamma}
    try:
        model = train_model(split, settings, d, gamma)
    except (TrainingError, ValueError) as exc:
        return [EvalReport("copm", params, {}, config=_echo(settings, d, gamma), error=str(exc))]
    r = np.zeros(len(split.test_points), dtype=np.int64)
    for i, tp in enumerate(split.test_points):
        try:
            scores = copm_scores(tp.point, model, settings.sigma)
        except EmptyContextError:
            scores = np.zeros(model.m)
        r[i] = _rank(scores, tp.truth)
    return [EvalReport("copm", params, hit_rates(r), ranks=r, config=_echo(settings, d, gamma))]


def _echo(settings: Settings, d: int | None = None, gamma: float | None = None) -> dict:
    out = {"lambda": settings.lam, "sigma": settings.sigma, "seed": settings.seed}
    if d is not None:
        out.update(d=d, gamma=gamma, step=settings.step, learning_rate=settings.learning_rate,
                   max_epochs=settings.max_epochs, rel_tol=settings.rel_tol)
    return out


def evaluate_ptn(split: CutoffSplit, settings: Settings = Settings()) -> EvalReport:
    m = len(split.terms)
    r = np.array([_rank(ptn_scores(tp.point, m), tp.truth) for tp in split.test_points], dtype=np.int64)
    return EvalReport("ptn", {}, hit_rates(r), ranks=r, config=_echo(settings))


def evaluate_random(split: CutoffSplit, settings: Settings = Settings()) -> EvalReport:
    rng = np.random.default_rng(settings.seed)
    m = len(split.terms)
    r = np.array([_rank(rng.random(m), tp.truth) for tp in split.test_points], dtype=np.int64)
    return EvalReport("random", {}, hit_rates(r), ranks=r, config=_echo(settings))


def evaluate_tptcf(split: CutoffSplit, grid: Mapping[str, list], settings: Settings = Settings()) -> list[EvalReport]:
    model = TptcfModel(split.train.values(), len(split.terms))
    alphas = grid.get("alpha", [0.5])
    reports = []
    for sp_, st in itertools.product(grid.get("sp", [0.1]), grid.get("st", [0.1])):
        ranks = {a: np.zeros(len(split.test_points), dtype=np.int64) for a in alphas}
        for i, tp in enumerate(split.test_points):
            if tp.truth is None:
                continue
            last = tp.point.prefix[-1] if tp.point.prefix else None
            dyn = model.dyn_scores(last)
            cf = model.cf_scores(tp.point.patient, last, TptcfParams(sp_, st))
            for a in alphas:
                ranks[a][i] = rank_of_truth((1.0 - a) * dyn + a * cf, tp.truth)
        for a in alphas:
            reports.append(EvalReport("tptcf", {"sp": sp_, "st": st, "alpha": a}, hit_rates(ranks[a]),
                                      ranks=ranks[a], config=_echo(settings)))
    return reports


def _run_group(args):
    kind, split, settings, rest = args
    if kind == "hcfm":
        return _hcfm_group(split, settings, *rest)
    return _copm_group(split, settings, *rest)


def grid_search(
    split: CutoffSplit,
    method: str,
    grid: Mapping[str, list] | None = None,
    settings: Settings = Settings(),
    workers: int = 1,
) -> list[EvalReport]:
    """Evaluate every grid point; reports sorted by HR@5 descending (stable)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    grid = dict(DEFAULT_GRIDS[method] if grid is None else grid)
    for key, values in grid.items():
        if not values:
            raise ValueError(f"empty grid for {key}")

    if method == "ptn":
        reports = [evaluate_ptn(split, settings)]
    elif method == "random":
        reports = [evaluate_random(split, settings)]
    elif method == "tptcf":
        reports = evaluate_tptcf(split, grid, settings)
    else:
        models = list(itertools.product(grid.get("d", [32]), grid.get("gamma", [0.01])))
        if method == "hcfm":
            rest = [(d, g, grid.get("ms", ["all"]), grid.get("mc", [2]), grid.get("alpha", [0.8]))
                    for d, g in models]
        else:
            rest = list(models)
        jobs = [(method, split, settings, r) for r in rest]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                groups = list(ex.map(_run_group, jobs))
        else:
            groups = [_run_group(j) for j in jobs]
        reports = [r for g in groups for r in g]

    for r in reports:
        if r.error:
            log.warning("%s %s failed: %s", r.method, r.params, r.error)
    mark_best(reports)
    return sorted(reports, key=lambda r: -r.hr.get(5, -1.0))


def mark_best(reports: Sequence[EvalReport]) -> None:
    ok = [r for r in reports if not r.error]
    for k in KS:
        if not ok:
            break
        best = max(r.hr[k] for r in ok)
        for r in ok:
            if r.hr[k] == best:
                r.best_for.append(k)


# --- session-length strata ------------------------------------------------


def stratify_by_session_length(split: CutoffSplit, report: EvalReport, groups: int = 5) -> list[dict]:
    lengths = np.array([tp.session_length for tp in split.test_points])
    if len(lengths) != len(report.ranks):
        raise ValueError("report ranks do not align with the split's test points")
    if len(lengths) < groups:
        log.warning("only %d test sessions; reporting a single group", len(lengths))
        parts = [np.arange(len(lengths))]
    else:
        order = np.argsort(lengths, kind="stable")
        parts = np.array_split(order, groups)
    rows = []
    for g, idx in enumerate(parts, start=1):
        row = {"group": g, "size": len(idx),
               "min": int(lengths[idx].min()), "max": int(lengths[idx].max()),
               "mean": float(lengths[idx].mean())}
        for k in STRATA_KS:
            row[f"hr{k}"] = hit_rate(report.ranks[idx], k)
        rows.append(row)
    report.strata = rows
    return rows


# --- output ---------------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def param_columns(reports: Sequence[EvalReport]) -> list[str]:
    cols: list[str] = []
    for r in reports:
        for k in r.params:
            if k not in cols:
                cols.append(k)
    return cols


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    cols = param_columns(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *cols, *(f"hr{k}" for k in KS), "error"])
    for r in reports:
        w.writerow([r.method, *(_fmt(r.params.get(c, "")) for c in cols),
                    *(f"{r.hr[k]:.4f}" if k in r.hr else "" for k in KS), r.error or ""])
    return buf.getvalue()


def reports_to_table(reports: Sequence[EvalReport], limit: int | None = None) -> str:
    """Fixed-width table; ``*`` marks the best value of each column."""
    cols = param_columns(reports)
    shown = list(reports if limit is None else reports[:limit])
    head = ["method", *cols, *(f"HR@{k}" for k in KS)]
    rows = []
    for r in shown:
        hrs = []
        for k in KS:
            if k not in r.hr:
                hrs.append("-")
            else:
                hrs.append(("*" if k in r.best_for else "") + f"{r.hr[k]:.4f}")
        rows.append([r.method, *(_fmt(r.params.get(c, "-")) for c in cols), *hrs])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(f"{h:>{w}}" for h, w in zip(head, widths))]
    lines += ["  ".join(f"{v:>{w}}" for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def strata_to_table(rows: Sequence[dict]) -> str:
    head = ["group", "size", "min", "max", "mean", *(f"HR@{k}" for k in STRATA_KS)]
    lines = ["  ".join(f"{h:>6}" for h in head)]
    for r in rows:
        vals = [r["group"], r["size"], r["min"], r["max"], f"{r['mean']:.2f}",
                *(f"{r[f'hr{k}']:.4f}" for k in STRATA_KS)]
        lines.append("  ".join(f"{v:>6}" for v in vals))
    return "\n".join(lines) + "\n"


# --- grids and single-point scoring ----------------------------------------


def _grid_value(key: str, raw: str):
    raw = raw.strip()
    if key == "ms" and raw.lower() == "all":
        return "all"
    if key in ("ms", "mc", "d"):
        return int(raw)
    return float(raw)


def parse_grid(text: str) -> dict[str, list]:
    """``key=v1,v2,...`` lines; ``#`` starts a comment."""
    grid: dict[str, list] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key=values, got {line!r}")
        key, values = (x.strip() for x in line.split("=", 1))
        grid[key] = [_grid_value(key, v) for v in values.split(",") if v.strip()]
    return grid


def format_grid(grid: Mapping[str, list]) -> str:
    return "".join(f"{k}={','.join(_fmt(v) for v in vs)}\n" for k, vs in grid.items())


def make_scorer(split: CutoffSplit, method: str, params: Mapping[str, Any], settings: Settings = Settings()):
    """Return ``point -> scores`` for one parameter point of ``method``."""
    m = len(split.terms)
    if method == "ptn":
        return lambda point: ptn_scores(point, m)
    if method == "random":
        rng = np.random.default_rng(settings.seed)
        return lambda point: rng.random(m)
    if method == "tptcf":
        model = TptcfModel(split.train.values(), m)
        tp = TptcfParams(params.get("sp", 0.1), params.get("st", 0.1), params.get("alpha", 0.5))
        return lambda point: model.scores(point, tp)
    fm = train_model(split, settings, int(params["d"]), float(params["gamma"]))
    if method == "copm":
        def copm(point):
            try:
                return copm_scores(point, fm, settings.sigma)
            except EmptyContextError:
                return np.zeros(fm.m)
        return copm
    hp = HcfmParams(params.get("ms", "all"), int(params.get("mc", 2)), float(params.get("alpha", 0.8)))
    return lambda point: hcfm_scores(point, fm, hp)


def score_dump(split: CutoffSplit, scorer, top_n: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "target_index", "rank", "term", "score"])
    for tp in split.test_points:
        scores = scorer(tp.point)
        order = np.lexsort((np.arange(len(scores)), -scores))[:top_n]
        for r, t in enumerate(order, start=1):
            w.writerow([tp.point.patient, tp.point.target_index + 1, r, split.terms.raw(int(t)),
                        f"{scores[t]:.6g}"])
    return buf.getvalue()
