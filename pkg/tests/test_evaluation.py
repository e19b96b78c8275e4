from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from searchrec.data_model import Vocabulary, build_history
from searchrec.evaluation import (
    KS,
    EmptyTestError,
    EvalReport,
    Settings,
    cutoff_split,
    format_grid,
    grid_search,
    hit_rate,
    hit_rates,
    parse_grid,
    split_training,
    stratify_by_session_length,
    time_quantile,
    train_model,
)
from searchrec.ingestion import ingest
from searchrec.sessions import sessionize
from searchrec.synthetic import GeneratorConfig, generate

from conftest import day, history

TERMS = Vocabulary([f"t{i}" for i in range(6)])
CODES = Vocabulary([f"c{i}" for i in range(4)])


def test_all_searches_before_cutoff_is_an_error():
    h = history([(0, (0,))], [(1, 0), (2, 1)])
    with pytest.raises(EmptyTestError):
        cutoff_split({"p1": h}, TERMS, CODES, day(10))


def test_first_post_cutoff_search_only():
    h = history([(0, (0,)), (11, (1,))], [(1, 0), (2, 1), (11, 2), (12, 0)])
    split = cutoff_split({"p1": h}, TERMS, CODES, day(10))
    (tp,) = split.test_points
    assert tp.point.target_index == 2
    assert tp.truth_raw == "t2" and tp.truth is None  # t2 never searched before the cut-off
    assert tp.session_length == 4
    assert [split.terms.raw(t) for t in tp.point.prefix] == ["t0", "t1"]
    # the matched encounter is visible; its unseen code is dropped
    assert tp.point.encounters == ((0,), ())


def test_patient_without_training_searches_excluded():
    a = history([(0, (0,))], [(1, 0), (11, 0)], patient="a")
    b = history([(0, (0,))], [(11, 1), (12, 0)], patient="b")
    split = cutoff_split({"a": a, "b": b}, TERMS, CODES, day(10))
    assert set(split.train) == {"a"}
    assert [tp.point.patient for tp in split.test_points] == ["a"]
    assert split.test_points[0].truth == split.terms.id("t0")


def test_new_session_after_cutoff_is_not_a_point():
    a = history([(0, (0,))], [(1, 0), (2, 0), (200, 0)], patient="a")
    with pytest.raises(EmptyTestError):
        cutoff_split({"a": a}, TERMS, CODES, day(100))


def test_training_ids_follow_training_order():
    h = history([(0, (3,)), (20, (1,))], [(1, 5), (2, 4), (21, 0)])
    train, codes, terms = split_training({"p1": h}, TERMS, CODES, day(10))
    assert codes.items == ["c3"] and terms.items == ["t5", "t4"]
    assert [s.term for s in train["p1"].searches] == [0, 1]


def test_hit_rate_examples():
    assert hit_rate([1, 1, 1], 1) == 1.0
    assert hit_rate([6], 5) == 0.0 and hit_rate([6], 10) == 1.0
    assert hit_rate([3, 0], 3) == 0.5
    assert hit_rate([0, 0], 20) == 0.0


@given(st.lists(st.integers(0, 40), min_size=1, max_size=50))
def test_hit_rates_monotone(ranks):
    hr = hit_rates(ranks)
    assert all(hr[a] <= hr[b] for a, b in zip(KS, KS[1:]))


class _Split:
    def __init__(self, lengths):
        self.test_points = [type("TP", (), {"session_length": n})() for n in lengths]


def test_strata_equal_lengths():
    split = _Split([3] * 10)
    rep = EvalReport("x", {}, {}, ranks=np.arange(10))
    rows = stratify_by_session_length(split, rep)
    assert [r["size"] for r in rows] == [2] * 5
    # stable order keeps input order, so group g holds ranks 2g-2 and 2g-1
    assert [r["hr1"] for r in rows] == [0.5, 0.0, 0.0, 0.0, 0.0]
    assert [r["hr5"] for r in rows] == [0.5, 1.0, 1.0, 0.0, 0.0]


def test_strata_boundaries_follow_sorted_lengths():
    lengths = [26, 2, 9, 2, 15, 4, 6, 3, 40, 5]
    rep = EvalReport("x", {}, {}, ranks=np.ones(10, dtype=int))
    rows = stratify_by_session_length(_Split(lengths), rep)
    s = sorted(lengths)
    assert [(r["min"], r["max"]) for r in rows] == [(s[i], s[i + 1]) for i in range(0, 10, 2)]


def test_strata_fallback_single_group():
    rep = EvalReport("x", {}, {}, ranks=np.array([1]))
    rows = stratify_by_session_length(_Split([4]), rep)
    assert len(rows) == 1 and rows[0]["hr1"] == 1.0


def test_grid_round_trip():
    text = "ms=1,2,all\nmc=1\nalpha=0,0.5\nd=8\ngamma=0.01\n"
    grid = parse_grid(text)
    assert grid["ms"] == [1, 2, "all"] and grid["alpha"] == [0.0, 0.5]
    assert format_grid(grid) == text


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    generate(GeneratorConfig(seed=4, n_patients=60, n_codes=12, n_terms=20, planted_rank=4), out)
    ds = ingest(out)
    cutoff = time_quantile(ds.histories, 0.8)
    return ds, cutoff


def test_singleton_grid_and_ptn(small_data):
    ds, cutoff = small_data
    split = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    s = Settings(max_epochs=30)
    one = grid_search(split, "hcfm", {"ms": ["all"], "mc": [2], "alpha": [0.5], "d": [4], "gamma": [0.01]}, s)
    assert len(one) == 1 and not one[0].error
    ptn = grid_search(split, "ptn", None, s)
    assert len(ptn) == 1 and "d" not in ptn[0].config
    for r in one + ptn:
        assert all(r.hr[a] <= r.hr[b] for a, b in zip(KS, KS[1:]))


def test_bad_dimension_reported_not_raised(small_data):
    ds, cutoff = small_data
    split = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    (r,) = grid_search(split, "copm", {"d": [500], "gamma": [0.01]}, Settings(max_epochs=5))
    assert r.error and r.hr == {}


def _truncate(histories, cutoff):
    out = {}
    for pid, h in histories.items():
        encs = [e for e in h.encounters if e.time < cutoff]
        srch = [s for s in h.searches if s.time < cutoff]
        if not encs and not srch:
            continue
        out[pid] = sessionize(build_history(encs, [replace(s, session_id=None) for s in srch], patient=pid))
    return out


def test_post_cutoff_events_do_not_leak(small_data):
    ds, cutoff = small_data
    full = split_training(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    cut = split_training(_truncate(ds.histories, cutoff), ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    assert full[1] == cut[1] and full[2] == cut[2]
    assert full[0] == cut[0]
    s = Settings(max_epochs=40)
    split_a = cutoff_split(ds.histories, ds.dictionaries.terms, ds.dictionaries.codes, cutoff)
    ma = train_model(split_a, s, 4, 0.01)
    split_b = replace(split_a, train=cut[0], codes=cut[1], terms=cut[2])
    mb = train_model(split_b, s, 4, 0.01)
    assert np.array_equal(ma.U, mb.U) and np.array_equal(ma.V, mb.V)
