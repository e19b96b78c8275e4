"""Candidate-term scorers: HCFM, CoPM, PTN and TptCF.

Every scorer ranks the full training vocabulary. Rankings sort by score
descending and break ties by ascending term id.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import scipy.sparse as sp

from .data_model import DataError, PatientHistory
from .factorization import FactorModel

MsValue = Union[int, Literal["all"]]


class EmptyContextError(DataError):
    """A scorer needs context (a matched encounter) the point does not have."""


@dataclass(frozen=True)
class RecommendationPoint:
    """Everything visible when predicting one search.

    ``prefix`` holds the earlier terms of the target's session, oldest first.
    ``encounters`` holds the code ids of every encounter at or before the
    target time, oldest first; the last one is the target's matched encounter.
    ``history_terms`` holds all of the patient's training searches.
    """

    patient: str
    target_index: int
    prefix: tuple[int, ...] = ()
    encounters: tuple[tuple[int, ...], ...] = ()
    history_terms: tuple[int, ...] = ()

    @property
    def n_p(self) -> int:
        return len(self.prefix)

    @property
    def l_p(self) -> int:
        return len(self.encounters)


@dataclass(frozen=True)
class HcfmParams:
    m_s: MsValue = "all"
    m_c: int = 2
    alpha: float = 0.8

    def __post_init__(self):
        if self.m_s != "all" and (not isinstance(self.m_s, (int, np.integer)) or self.m_s < 1):
            raise ValueError(f"m_s must be a positive int or 'all', got {self.m_s!r}")
        if self.m_c < 1:
            raise ValueError("m_c must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


class ScoredList:
    """Terms ordered by descending score, ties by ascending id."""

    def __init__(self, scores: np.ndarray):
        scores = np.asarray(scores, dtype=np.float64)
        self.scores_by_id = scores
        self.order = rank_order(scores)

    @property
    def terms(self) -> np.ndarray:
        return self.order

    @property
    def scores(self) -> np.ndarray:
        return self.scores_by_id[self.order]

    def __len__(self) -> int:
        return len(self.order)

    def top(self, n: int) -> list[tuple[int, float]]:
        return [(int(t), float(self.scores_by_id[t])) for t in self.order[:n]]

    def rank_of(self, term: int) -> int:
        """1-based rank of ``term``."""
        return int(np.flatnonzero(self.order == term)[0]) + 1


def rank_order(scores: np.ndarray) -> np.ndarray:
    ids = np.arange(len(scores))
    return np.lexsort((ids, -np.asarray(scores)))


def rank_of_truth(scores: np.ndarray, truth: int) -> int:
    """1-based position of ``truth`` under the ScoredList ordering, without sorting."""
    s = scores[truth]
    ahead = np.count_nonzero(scores > s) + np.count_nonzero(scores[:truth] == s)
    return int(ahead) + 1


# --- HCFM -----------------------------------------------------------------


def aggregate_recent_terms(point: RecommendationPoint, model: FactorModel, m_s: MsValue) -> np.ndarray:
    """Mean term vector over the last ``m_s`` prefix terms; zeros for an empty prefix."""
    if not point.prefix:
        return np.zeros(model.d)
    recent = point.prefix if m_s == "all" else point.prefix[-m_s:]
    return model.V[list(recent)].mean(axis=0)


def score_terms_x(point: RecommendationPoint, model: FactorModel, m_s: MsValue) -> np.ndarray:
    return model.V @ aggregate_recent_terms(point, model, m_s)


def _window(point: RecommendationPoint, m_c: int) -> list[tuple[int, ...]]:
    return list(point.encounters[-m_c:]) if m_c > 0 else []


def encounter_weights(
    point: RecommendationPoint, model: FactorModel, m_s: MsValue, m_c: int
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax weight per code occurrence in the last ``m_c`` encounters.

    Returns ``(codes, weights)`` with one entry per occurrence, so a code in
    two window encounters appears twice. Both arrays are empty when there are
    no encounters.
    """
    codes = np.array([c for enc in _window(point, m_c) for c in enc], dtype=np.int64)
    if codes.size == 0:
        return codes, np.zeros(0)
    mp = aggregate_recent_terms(point, model, m_s)
    logits = model.U[codes] @ mp
    w = np.exp(logits - logits.max())
    return codes, w / w.sum()


def weighted_code_vector(point: RecommendationPoint, model: FactorModel, m_s: MsValue, m_c: int) -> np.ndarray:
    codes, w = encounter_weights(point, model, m_s, m_c)
    if codes.size == 0:
        return np.zeros(model.d)
    return w @ model.U[codes]


def score_terms_y(point: RecommendationPoint, model: FactorModel, m_s: MsValue, m_c: int) -> np.ndarray:
    return model.V @ weighted_code_vector(point, model, m_s, m_c)


def hcfm_scores(point: RecommendationPoint, model: FactorModel, params: HcfmParams) -> np.ndarray:
    x = score_terms_x(point, model, params.m_s)
    y = score_terms_y(point, model, params.m_s, params.m_c)
    return params.alpha * x + (1.0 - params.alpha) * y


def hcfm_score(point: RecommendationPoint, model: FactorModel, params: HcfmParams) -> ScoredList:
    return ScoredList(hcfm_scores(point, model, params))


# --- CoPM -----------------------------------------------------------------


def copm_scores(point: RecommendationPoint, model: FactorModel, sigma: float = 0.5) -> np.ndarray:
    if not 0 < sigma < 1:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    if not point.encounters:
        raise EmptyContextError("no encounter precedes the recommendation point")
    last = len(point.encounters) - 1
    agg = np.zeros(model.d)
    for i, enc in enumerate(point.encounters):
        if enc:
            agg += sigma ** (last - i) * model.U[list(enc)].sum(axis=0)
    return model.V @ agg


def copm_score(point: RecommendationPoint, model: FactorModel, sigma: float = 0.5) -> ScoredList:
    return ScoredList(copm_scores(point, model, sigma))


# --- PTN ------------------------------------------------------------------


def ptn_scores(point: RecommendationPoint, m: int) -> np.ndarray:
    counts = np.zeros(m)
    for t, k in Counter(point.history_terms).items():
        counts[t] = k
    return counts


def ptn_score(point: RecommendationPoint, m: int) -> ScoredList:
    return ScoredList(ptn_scores(point, m))


# --- TptCF ----------------------------------------------------------------


@dataclass(frozen=True)
class TptcfParams:
    patient_threshold: float = 0.1
    term_threshold: float = 0.1
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def _cosine(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    Y = X / safe[:, None]
    return Y @ Y.T


class TptcfModel:
    """Patient/term similarities and term transition statistics from training searches.

    Transitions are consecutive searches within one session.
    """

    def __init__(self, histories: Iterable[PatientHistory], m: int):
        hs = sorted(histories, key=lambda h: h.patient)
        self.m = m
        self.patients = [h.patient for h in hs]
        self.row = {p: i for i, p in enumerate(self.patients)}
        counts = np.zeros((len(hs), m))
        self.transitions: list[sp.csr_matrix] = []
        for i, h in enumerate(hs):
            for s in h.searches:
                counts[i, s.term] += 1
            src, dst = [], []
            for a, b in zip(h.searches, h.searches[1:]):
                if a.session_id == b.session_id:
                    src.append(a.term)
                    dst.append(b.term)
            g = sp.csr_matrix((np.ones(len(src)), (src, dst)), shape=(m, m))
            g.sum_duplicates()
            self.transitions.append(g)
        self.counts = counts
        self.patient_sim = _cosine(counts)
        self.term_sim = _cosine(counts.T)
        total = sp.csr_matrix((m, m))
        for g in self.transitions:
            total = total + g
        total = total.toarray()
        rows = total.sum(axis=1, keepdims=True)
        self.transition_prob = np.divide(total, rows, out=np.zeros_like(total), where=rows > 0)

    def dyn_scores(self, last_term: int | None) -> np.ndarray:
        if last_term is None:
            return np.zeros(self.m)
        return self.transition_prob[last_term].copy()

    def cf_scores(self, patient: str, last_term: int | None, params: TptcfParams) -> np.ndarray:
        out = np.zeros(self.m)
        if last_term is None or patient not in self.row:
            return out
        p = self.row[patient]
        sims = self.patient_sim[p]
        neighbors = [q for q in range(len(self.patients))
                     if q != p and sims[q] > 0 and sims[q] >= params.patient_threshold]
        if not neighbors:
            return out
        weights = sims[neighbors] / sims[neighbors].sum()
        tsim = self.term_sim[last_term]
        similar = np.flatnonzero((tsim > 0) & (tsim >= params.term_threshold))
        if similar.size == 0:
            return out
        for w, q in zip(weights, neighbors):
            g = self.transitions[q][similar].toarray()
            num = tsim[similar] @ g
            den = g.sum(axis=0)
            out += w * np.divide(num, den, out=np.zeros(self.m), where=den > 0)
        return out

    def scores(self, point: RecommendationPoint, params: TptcfParams) -> np.ndarray:
        last = point.prefix[-1] if point.prefix else None
        return ((1.0 - params.alpha) * self.dyn_scores(last)
                + params.alpha * self.cf_scores(point.patient, last, params))


def tptcf_score(point: RecommendationPoint, model: TptcfModel, params: TptcfParams) -> ScoredList:
    return ScoredList(model.scores(point, params))


def resolve_context(
    terms: Sequence[str],
    encounters: Sequence[Sequence[str]],
    term_ids: Mapping[str, int],
    code_ids: Mapping[str, int],
) -> tuple[tuple[int, ...], tuple[tuple[int, ...], ...], list[str]]:
    """Map raw context strings to ids, collecting the ones the model does not know."""
    unknown = []
    prefix = []
    for t in terms:
        if t in term_ids:
            prefix.append(term_ids[t])
        else:
            unknown.append(t)
    encs = []
    for enc in encounters:
        ids = []
        for c in enc:
            if c in code_ids:
                ids.append(code_ids[c])
            else:
                unknown.append(c)
        encs.append(tuple(dict.fromkeys(ids)))
    return tuple(prefix), tuple(encs), unknown
