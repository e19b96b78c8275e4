import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from searchrec.factorization import FactorModel
from searchrec.recommenders import (
    EmptyContextError,
    HcfmParams,
    RecommendationPoint,
    ScoredList,
    TptcfModel,
    TptcfParams,
    aggregate_recent_terms,
    copm_scores,
    encounter_weights,
    hcfm_score,
    hcfm_scores,
    ptn_score,
    rank_of_truth,
    rank_order,
    resolve_context,
    score_terms_x,
    score_terms_y,
)

from conftest import history


def model_from(U, V):
    return FactorModel(U=np.asarray(U, dtype=float), V=np.asarray(V, dtype=float), gamma=0.0)


def random_model(seed, n=6, m=9, d=3):
    r = np.random.default_rng(seed)
    return model_from(r.normal(size=(n, d)), r.normal(size=(m, d)))


@st.composite
def contexts(draw, n=6, m=9):
    prefix = tuple(draw(st.lists(st.integers(0, m - 1), max_size=6)))
    encs = tuple(tuple(draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=3, unique=True)))
                 for _ in range(draw(st.integers(0, 5))))
    return RecommendationPoint("p", 0, prefix, encs)


# --- ranking ----------------------------------------------------------------


def test_ties_broken_by_ascending_id():
    assert list(rank_order(np.array([1.0, 3.0, 3.0, 0.0, 1.0]))) == [1, 2, 0, 4, 3]


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_rank_of_truth_agrees_with_sorting(raw, data):
    scores = np.array(raw, dtype=float)
    t = data.draw(st.integers(0, len(raw) - 1))
    assert rank_of_truth(scores, t) == ScoredList(scores).rank_of(t)


# --- HCFM -------------------------------------------------------------------


def test_mean_of_recent_terms():
    m = model_from(np.zeros((2, 2)), [[1, 0], [0, 1], [3, 3]])
    one = RecommendationPoint("p", 0, (2,))
    assert np.array_equal(aggregate_recent_terms(one, m, 4), [3, 3])
    two = RecommendationPoint("p", 0, (0, 1))
    assert np.array_equal(aggregate_recent_terms(two, m, 1), [0, 1])
    three = RecommendationPoint("p", 0, (0, 1, 2))
    np.testing.assert_allclose(aggregate_recent_terms(three, m, 6), [4 / 3, 4 / 3])
    np.testing.assert_allclose(aggregate_recent_terms(three, m, "all"), [4 / 3, 4 / 3])
    assert not aggregate_recent_terms(RecommendationPoint("p", 0), m, 3).any()


def test_x_scores_hand_values():
    V = [[1, 0], [0, 2], [1, 1]]
    m = model_from(np.zeros((1, 2)), V)
    x = score_terms_x(RecommendationPoint("p", 0, (2,)), m, 1)
    assert list(x) == [1.0, 2.0, 2.0]
    ortho = model_from(np.zeros((1, 3)), np.eye(3))
    assert np.argmax(score_terms_x(RecommendationPoint("p", 0, (1,)), ortho, 1)) == 1


def test_single_code_weight_is_one():
    m = random_model(0)
    codes, w = encounter_weights(RecommendationPoint("p", 0, (1,), ((4,),)), m, "all", 2)
    assert list(codes) == [4] and list(w) == [1.0]


def test_equal_code_vectors_share_weight():
    m = model_from([[1, 1], [1, 1]], [[1, 0]])
    _, w = encounter_weights(RecommendationPoint("p", 0, (0,), ((0, 1),)), m, "all", 1)
    np.testing.assert_allclose(w, [0.5, 0.5])


def test_window_holds_last_encounters():
    m = random_model(1)
    p = RecommendationPoint("p", 0, (0,), ((0,), (1, 2), (3,)))
    codes, _ = encounter_weights(p, m, "all", 2)
    assert list(codes) == [1, 2, 3]


@settings(max_examples=50, deadline=None)
@given(contexts(), st.integers(1, 4), st.integers(0, 1000))
def test_weights_normalized(point, mc, seed):
    m = random_model(seed)
    codes, w = encounter_weights(point, m, "all", mc)
    if codes.size:
        assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0)


@settings(max_examples=50, deadline=None)
@given(contexts(), st.integers(1, 4), st.integers(0, 1000))
def test_y_matches_literal_double_sum(point, mc, seed):
    m = random_model(seed)
    y = score_terms_y(point, m, "all", mc)
    window = point.encounters[-mc:]
    mp = [sum(m.V[t][k] for t in point.prefix) / len(point.prefix) if point.prefix else 0.0
          for k in range(m.d)]
    logits = [(c, sum(m.U[c][k] * mp[k] for k in range(m.d))) for e in window for c in e]
    z = sum(math.exp(l) for _, l in logits)
    for s in range(m.m):
        expect = sum(math.exp(l) / z * float(m.U[c] @ m.V[s]) for c, l in logits)
        assert y[s] == pytest.approx(expect, rel=1e-9, abs=1e-12)


def test_y_with_one_code_is_estimate():
    m = random_model(2)
    y = score_terms_y(RecommendationPoint("p", 0, (), ((3,),)), m, "all", 2)
    np.testing.assert_allclose(y, [m.estimate(3, s) for s in range(m.m)])


@settings(max_examples=30, deadline=None)
@given(contexts(), st.integers(0, 1000))
def test_alpha_endpoints(point, seed):
    m = random_model(seed)
    x = score_terms_x(point, m, "all")
    y = score_terms_y(point, m, "all", 2)
    assert np.array_equal(hcfm_score(point, m, HcfmParams("all", 2, 1.0)).terms, rank_order(x))
    assert np.array_equal(hcfm_score(point, m, HcfmParams("all", 2, 0.0)).terms, rank_order(y))


def test_common_argmax_survives_mixing():
    m = model_from([[1.0, 0.0]], [[2.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    p = RecommendationPoint("p", 0, (0,), ((0,),))
    assert hcfm_score(p, m, HcfmParams("all", 1, 0.5)).terms[0] == 0


def test_params_validated():
    with pytest.raises(ValueError):
        HcfmParams(m_s=0)
    with pytest.raises(ValueError):
        HcfmParams(alpha=1.5)


# --- CoPM -------------------------------------------------------------------


def test_copm_single_encounter_is_estimate():
    m = random_model(3)
    s = copm_scores(RecommendationPoint("p", 0, (), ((2,),)), m, 0.5)
    np.testing.assert_allclose(s, [m.estimate(2, t) for t in range(m.m)])


def test_copm_two_encounters_weights():
    m = random_model(4)
    s = copm_scores(RecommendationPoint("p", 0, (), ((1,), (2,))), m, 0.5)
    np.testing.assert_allclose(s, [0.5 * m.estimate(1, t) + m.estimate(2, t) for t in range(m.m)])


def test_copm_older_contribution_shrinks_with_sigma():
    m = model_from([[1.0], [0.0]], [[1.0]])
    p = RecommendationPoint("p", 0, (), ((0,), (1,), (1,)))
    vals = [copm_scores(p, m, s)[0] for s in (0.9, 0.5, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_copm_needs_an_encounter():
    with pytest.raises(EmptyContextError):
        copm_scores(RecommendationPoint("p", 0, (1,)), random_model(0), 0.5)


# --- PTN --------------------------------------------------------------------


def test_ptn_counts():
    sl = ptn_score(RecommendationPoint("p", 0, history_terms=(1, 0, 1, 1)), 3)
    assert list(sl.terms) == [1, 0, 2]


def test_ptn_empty_history_is_tie_order():
    assert list(ptn_score(RecommendationPoint("p", 0), 4).terms) == [0, 1, 2, 3]


# --- TptCF ------------------------------------------------------------------


def _tptcf_fixture():
    hs = [
        history([(0, (0,))], [(0, 0), (1, 1), (2, 2)], patient="a"),
        history([(0, (0,))], [(0, 0), (1, 2), (2, 1)], patient="b"),
        history([(0, (0,))], [(0, 3), (1, 3)], patient="c"),
    ]
    return TptcfModel(hs, 4)


def test_tptcf_transition_probabilities():
    model = _tptcf_fixture()
    # global transitions out of term 0: 0->1 (a), 0->2 (b)
    assert list(model.dyn_scores(0)) == [0.0, 0.5, 0.5, 0.0]
    assert list(model.dyn_scores(3)) == [0.0, 0.0, 0.0, 1.0]


def test_tptcf_single_neighbor_hand_value():
    model = _tptcf_fixture()
    # a and b have identical counts (sim 1); c is orthogonal. Terms 0..2 are
    # mutually similar with sim 1. Neighbor b: g(0->2)=1, g(2->1)=1.
    cf = model.cf_scores("a", 0, TptcfParams(0.1, 0.1))
    np.testing.assert_allclose(cf, [0.0, 1.0, 1.0, 0.0])
    p = RecommendationPoint("a", 0, prefix=(0,))
    total = model.scores(p, TptcfParams(0.1, 0.1, alpha=0.5))
    np.testing.assert_allclose(total, [0.0, 0.75, 0.75, 0.0])


def test_tptcf_alpha_zero_is_dynamics():
    model = _tptcf_fixture()
    p = RecommendationPoint("a", 0, prefix=(0,))
    assert np.array_equal(model.scores(p, TptcfParams(alpha=0.0)), model.dyn_scores(0))


def test_tptcf_no_neighbor_means_no_cf():
    model = _tptcf_fixture()
    p = RecommendationPoint("a", 0, prefix=(0,))
    params = TptcfParams(patient_threshold=1.5, term_threshold=0.1, alpha=0.4)
    assert not model.cf_scores("a", 0, params).any()
    np.testing.assert_allclose(model.scores(p, params), 0.6 * model.dyn_scores(0))


def test_resolve_context_skips_unknown():
    prefix, encs, unknown = resolve_context(["x", "zz"], [["c1", "c9"], ["c2"]],
                                            {"x": 0}, {"c1": 0, "c2": 1})
    assert prefix == (0,) and encs == ((0,), (1,)) and unknown == ["zz", "c9"]
