"""Split search sequences into sessions with a sliding time window."""

from __future__ import annotations

import csv
from collections.abc import Iterable
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

from .data_model import PatientHistory, SearchEvent, with_sessions


@dataclass(frozen=True)
class SessionConfig:
    window: timedelta = timedelta(days=90)

    def __post_init__(self):
        if self.window <= timedelta(0):
            raise ValueError("session window must be positive")

    @classmethod
    def from_days(cls, days: float) -> SessionConfig:
        return cls(timedelta(days=days))


@dataclass(frozen=True)
class Session:
    patient: str
    session_id: int
    first_index: int
    last_index: int
    start_time: datetime
    end_time: datetime

    @property
    def member_indices(self) -> range:
        return range(self.first_index, self.last_index + 1)

    def __len__(self) -> int:
        return self.last_index - self.first_index + 1


def segment_ids(times: list[datetime], window: timedelta) -> list[int]:
    """Session ordinal per search; a gap of at least ``window`` opens a new one."""
    ids = []
    current = -1
    for k, t in enumerate(times):
        if k == 0 or t - times[k - 1] >= window:
            current += 1
        ids.append(current)
    return ids


def segment(history: PatientHistory, config: SessionConfig = SessionConfig()) -> list[Session]:
    times = [s.time for s in history.searches]
    ids = segment_ids(times, config.window)
    sessions: list[Session] = []
    start = 0
    for k in range(1, len(ids) + 1):
        if k == len(ids) or ids[k] != ids[start]:
            sessions.append(
                Session(history.patient, ids[start], start, k - 1, times[start], times[k - 1])
            )
            start = k
    return sessions


def sessionize(history: PatientHistory, config: SessionConfig = SessionConfig()) -> PatientHistory:
    """Return a copy of ``history`` whose searches carry their session ids."""
    ids = segment_ids([s.time for s in history.searches], config.window)
    return with_sessions(history, ids)


def session_prefix(history: PatientHistory, search_index: int) -> list[SearchEvent]:
    """Strictly earlier members of the session holding ``search_index``.

    ``history`` must already be sessionized.
    """
    if not 0 <= search_index < len(history.searches):
        raise IndexError(f"search index {search_index} out of range")
    target = history.searches[search_index]
    if target.session_id is None:
        raise ValueError("history has not been sessionized")
    out = []
    k = search_index - 1
    while k >= 0 and history.searches[k].session_id == target.session_id:
        out.append(history.searches[k])
        k -= 1
    out.reverse()
    return out


def write_session_dump(path: str | Path, histories: Iterable[PatientHistory],
                       config: SessionConfig = SessionConfig()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "session_id", "first_index", "last_index", "length"])
        for h in histories:
            for s in segment(h, config):
                # reported 1-based
                w.writerow([h.patient, s.session_id + 1, s.first_index + 1, s.last_index + 1, len(s)])
