from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import strategies as st

from searchrec.data_model import Encounter, SearchEvent, build_history
from searchrec.sessions import sessionize

T0 = datetime(2014, 1, 1, tzinfo=timezone.utc)


def day(x: float) -> datetime:
    return T0 + timedelta(days=x)


def history(encounters, searches, patient="p1", sessions=True):
    """encounters: [(day, (codes...))], searches: [(day, term)]"""
    encs = [Encounter(patient, day(t), tuple(cs)) for t, cs in encounters]
    srch = [SearchEvent(patient, day(t), term) for t, term in searches]
    h = build_history(encs, srch, patient=patient)
    return sessionize(h) if sessions else h


@st.composite
def histories(draw, max_patients=10, max_enc=20, max_search=15, n_codes=6, n_terms=8):
    n_p = draw(st.integers(1, max_patients))
    out = []
    for p in range(n_p):
        n_e = draw(st.integers(0, max_enc))
        n_s = draw(st.integers(0, max_search))
        # quarter-day grid so equal timestamps (search at its encounter) occur
        times = st.integers(0, 200).map(lambda k: k / 4)
        encs = [(draw(times), tuple(draw(st.lists(st.integers(0, n_codes - 1), min_size=1, max_size=3))))
                for _ in range(n_e)]
        srch = [(draw(times), draw(st.integers(0, n_terms - 1))) for _ in range(n_s)]
        if not encs and not srch:
            srch = [(0.0, 0)]
        out.append(history(encs, srch, patient=f"p{p}"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
