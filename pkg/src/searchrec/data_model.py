"""Identifiers, timestamped events and per-patient histories.

Internal indices are 0-based. Functions that speak the notation of the
method (``subsequence``) take 1-based inclusive ranges.
"""

from __future__ import annotations

import bisect
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Literal

UTC = timezone.utc


def parse_time(text: str) -> datetime:
    """Parse an ISO-8601 instant; naive values are taken as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        return t.replace(tzinfo=UTC)
    return t.astimezone(UTC)


def format_time(t: datetime) -> str:
    t = t.astimezone(UTC)
    if t.microsecond:
        return t.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


class Vocabulary:
    """Bijection between raw strings and dense ids, assigned in first-seen order."""

    def __init__(self, items: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._raw: list[str] = []
        for item in items:
            self.add(item)

    def add(self, raw: str) -> int:
        idx = self._ids.get(raw)
        if idx is None:
            idx = len(self._raw)
            self._ids[raw] = idx
            self._raw.append(raw)
        return idx

    def id(self, raw: str) -> int:
        return self._ids[raw]

    def get(self, raw: str) -> int | None:
        return self._ids.get(raw)

    def raw(self, idx: int) -> str:
        if not 0 <= idx < len(self._raw):
            raise IndexError(f"id {idx} outside vocabulary of size {len(self._raw)}")
        return self._raw[idx]

    def __contains__(self, raw: object) -> bool:
        return raw in self._ids

    def __len__(self) -> int:
        return len(self._raw)

    def __iter__(self):
        return iter(self._raw)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._raw == other._raw

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} items)"

    @property
    def items(self) -> list[str]:
        return list(self._raw)


@dataclass(frozen=True)
class Encounter:
    patient: str
    time: datetime
    codes: tuple[int, ...]
    seq_index: int = -1

    def __post_init__(self):
        # a code appears at most once per encounter
        if len(set(self.codes)) != len(self.codes):
            object.__setattr__(self, "codes", tuple(dict.fromkeys(self.codes)))


@dataclass(frozen=True)
class SearchEvent:
    patient: str
    time: datetime
    term: int
    seq_index: int = -1
    matched_encounter: int | None = None
    session_id: int | None = None


@dataclass(frozen=True)
class PatientHistory:
    patient: str
    searches: tuple[SearchEvent, ...]
    encounters: tuple[Encounter, ...]
    by_code: dict[int, tuple[int, ...]] = field(compare=False, repr=False)
    by_term: dict[int, tuple[int, ...]] = field(compare=False, repr=False)

    @property
    def n_searches(self) -> int:
        return len(self.searches)

    @property
    def n_encounters(self) -> int:
        return len(self.encounters)

    @property
    def is_degenerate(self) -> bool:
        """True when either stream is empty; preprocessing drops these."""
        return not self.searches or not self.encounters

    def terms(self) -> list[int]:
        return [s.term for s in self.searches]


class DataError(ValueError):
    """Input data violates a protocol precondition."""


class HistoryError(DataError):
    pass


def _index_codes(encounters: Sequence[Encounter]) -> dict[int, tuple[int, ...]]:
    out: dict[int, list[int]] = {}
    for e in encounters:
        for c in e.codes:
            out.setdefault(c, []).append(e.seq_index)
    return {c: tuple(v) for c, v in out.items()}


def _index_terms(searches: Sequence[SearchEvent]) -> dict[int, tuple[int, ...]]:
    # one entry per search, so a term searched twice after the same
    # encounter lists that encounter twice
    out: dict[int, list[int]] = {}
    for s in searches:
        if s.matched_encounter is not None:
            out.setdefault(s.term, []).append(s.matched_encounter)
    return {t: tuple(v) for t, v in out.items()}


def match_encounter(encounter_times: Sequence[datetime], t: datetime) -> int | None:
    """Index of the last encounter at or before ``t``; None if all are later."""
    i = bisect.bisect_right(encounter_times, t)
    return i - 1 if i else None


def build_history(
    encounters: Sequence[Encounter],
    searches: Sequence[SearchEvent],
    patient: str | None = None,
) -> PatientHistory:
    patients = {e.patient for e in encounters} | {s.patient for s in searches}
    if patient is not None:
        patients.add(patient)
    if len(patients) > 1:
        raise HistoryError(f"events from several patients: {sorted(patients)}")
    if not patients:
        raise HistoryError("cannot infer the patient of an empty history")
    (pid,) = patients

    # sorted() is stable, so equal timestamps keep input order
    enc_sorted = sorted(encounters, key=lambda e: e.time)
    enc = tuple(replace(e, seq_index=i) for i, e in enumerate(enc_sorted))
    times = [e.time for e in enc]

    srch_sorted = sorted(searches, key=lambda s: s.time)
    srch = tuple(
        replace(s, seq_index=i, matched_encounter=match_encounter(times, s.time))
        for i, s in enumerate(srch_sorted)
    )
    return PatientHistory(pid, srch, enc, _index_codes(enc), _index_terms(srch))


def with_sessions(history: PatientHistory, session_ids: Sequence[int]) -> PatientHistory:
    if len(session_ids) != len(history.searches):
        raise HistoryError("one session id per search required")
    searches = tuple(replace(s, session_id=k) for s, k in zip(history.searches, session_ids))
    return replace(history, searches=searches)


def rebuild_indices(history: PatientHistory) -> tuple[dict, dict]:
    """Recompute the code and term inverted indices from the raw sequences."""
    return _index_codes(history.encounters), _index_terms(history.searches)


def subsequence(
    history: PatientHistory,
    kind: Literal["searches", "encounters"],
    i: int,
    j: int,
) -> tuple:
    """Events ``i..j`` inclusive, counted from 1."""
    if kind == "searches":
        seq = history.searches
    elif kind == "encounters":
        seq = history.encounters
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if not 1 <= i <= j <= len(seq):
        raise IndexError(f"range ({i}, {j}) outside 1..{len(seq)}")
    return seq[i - 1 : j]
