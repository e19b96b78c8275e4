"""Read encounter/search CSV files, normalize terms and apply dataset filters.

File formats::

    encounters.csv   patient_id,timestamp,icd_codes   (codes joined by ';')
    searches.csv     patient_id,timestamp,term
    synonyms.csv     from,to

The filters run once, in a fixed order: irregular terms, rare terms, then
patients below the per-patient minima. Term frequencies are not recounted
after patients are dropped.
"""

from __future__ import annotations

import csv
import logging
import re
import string
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Literal

from .data_model import (
    DataError,
    Encounter,
    PatientHistory,
    SearchEvent,
    Vocabulary,
    build_history,
    parse_time,
)
from .sessions import SessionConfig, sessionize

log = logging.getLogger(__name__)

ENCOUNTER_HEADER = ["patient_id", "timestamp", "icd_codes"]
SEARCH_HEADER = ["patient_id", "timestamp", "term"]

_WS = re.compile(r"\s+")
_DIGITS = re.compile(r"^[\d\s]+$")
_PUNCT = set(string.punctuation) | {" "}


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class RawRecord:
    kind: Literal["encounter", "search"]
    patient: str
    time: datetime
    payload: tuple[str, ...] | str


@dataclass(frozen=True)
class LineError:
    file: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.file}:{self.line}: {self.message}"


@dataclass(frozen=True)
class PreprocessConfig:
    min_searches_per_patient: int = 2
    min_encounters_per_patient: int = 3
    min_term_frequency: int = 2
    drop_irregular_terms: bool = True
    synonym_map: Mapping[str, str] | None = None

    def __post_init__(self):
        for name in ("min_searches_per_patient", "min_encounters_per_patient", "min_term_frequency"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def normalize_term(raw: str, synonym_map: Mapping[str, str] | None = None) -> str:
    """Lowercase, trim and collapse whitespace, then apply one synonym lookup."""
    term = _WS.sub(" ", raw.strip().lower())
    if synonym_map and term in synonym_map:
        term = synonym_map[term]
    return term


def is_irregular(term: str) -> bool:
    """Empty, purely numeric, or purely punctuation terms."""
    if not term:
        return True
    return bool(_DIGITS.match(term)) or all(ch in _PUNCT for ch in term)


def read_synonyms(path: str | Path) -> dict[str, str]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["from", "to"]:
            raise DataError(f"{path}: expected header 'from,to', got {header}")
        for row in reader:
            if len(row) != 2:
                continue
            # keys are matched against already-normalized terms
            out[normalize_term(row[0])] = normalize_term(row[1])
    return out


def _read_rows(path: Path, header: list[str], errors: list[LineError]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        while first is not None and first and first[0].startswith("#"):
            first = next(reader, None)
        if first is None:
            return
        if [h.strip() for h in first] != header:
            errors.append(LineError(path.name, 1, f"expected header {','.join(header)}"))
            return
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if row[0].startswith("#"):
                continue
            yield reader.line_num, row


def parse_events(
    encounter_file: str | Path,
    search_file: str | Path,
    synonym_map: Mapping[str, str] | None = None,
) -> tuple[list[RawRecord], list[LineError]]:
    """Parse both files into records; bad lines are reported, not dropped silently."""
    records: list[RawRecord] = []
    errors: list[LineError] = []
    total = 0
    for path, kind in ((Path(encounter_file), "encounter"), (Path(search_file), "search")):
        header = ENCOUNTER_HEADER if kind == "encounter" else SEARCH_HEADER
        try:
            rows = list(_read_rows(path, header, errors))
        except OSError as exc:
            errors.append(LineError(path.name, 0, f"unreadable: {exc}"))
            continue
        for line, row in rows:
            total += 1
            if len(row) != 3:
                errors.append(LineError(path.name, line, f"expected 3 fields, got {len(row)}"))
                continue
            pid, ts, payload = (x.strip() for x in row)
            if not pid:
                errors.append(LineError(path.name, line, "empty patient id"))
                continue
            try:
                t = parse_time(ts)
            except ValueError:
                errors.append(LineError(path.name, line, f"bad timestamp {ts!r}"))
                continue
            if kind == "encounter":
                codes = tuple(dict.fromkeys(c.strip() for c in payload.split(";") if c.strip()))
                if not codes:
                    errors.append(LineError(path.name, line, "empty ICD code list"))
                    continue
                records.append(RawRecord("encounter", pid, t, codes))
            else:
                records.append(RawRecord("search", pid, t, normalize_term(payload, synonym_map)))
    if total == 0 or not records:
        msg = "; ".join(str(e) for e in errors[:5]) or "no records"
        raise DataError(f"no parseable records ({msg})")
    return records, errors


@dataclass(frozen=True)
class Dictionaries:
    codes: Vocabulary
    terms: Vocabulary


@dataclass
class FilterReport:
    stages: list[tuple[str, dict[str, int]]] = field(default_factory=list)

    def add(self, name: str, records: Sequence[RawRecord]) -> None:
        searches = [r for r in records if r.kind == "search"]
        encounters = [r for r in records if r.kind == "encounter"]
        self.stages.append((name, {
            "patients": len({r.patient for r in records}),
            "searches": len(searches),
            "encounters": len(encounters),
            "terms": len({r.payload for r in searches}),
            "codes": len({c for r in encounters for c in r.payload}),
        }))

    def to_kv(self) -> str:
        lines = []
        for name, counts in self.stages:
            for k, v in counts.items():
                lines.append(f"{name}.{k}={v}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = ["patients", "searches", "encounters", "terms", "codes"]
        width = max(len(name) for name, _ in self.stages)
        out = [f"{'stage':<{width}}  " + "  ".join(f"{c:>10}" for c in cols)]
        for name, counts in self.stages:
            out.append(f"{name:<{width}}  " + "  ".join(f"{counts[c]:>10}" for c in cols))
        return "\n".join(out) + "\n"


def apply_filters(
    records: Sequence[RawRecord],
    config: PreprocessConfig = PreprocessConfig(),
) -> tuple[dict[str, PatientHistory], Dictionaries, FilterReport]:
    report = FilterReport()
    report.add("parsed", records)

    kept = list(records)
    if config.drop_irregular_terms:
        kept = [r for r in kept if r.kind == "encounter" or not is_irregular(r.payload)]
    else:
        kept = [r for r in kept if r.kind == "encounter" or r.payload]
    report.add("irregular_terms", kept)

    freq = Counter(r.payload for r in kept if r.kind == "search")
    kept = [r for r in kept if r.kind == "encounter" or freq[r.payload] >= config.min_term_frequency]
    report.add("rare_terms", kept)

    n_search = Counter(r.patient for r in kept if r.kind == "search")
    n_enc = Counter(r.patient for r in kept if r.kind == "encounter")
    keep_patients = {
        p for p in n_search.keys() | n_enc.keys()
        if n_search[p] >= config.min_searches_per_patient
        and n_enc[p] >= config.min_encounters_per_patient
    }
    kept = [r for r in kept if r.patient in keep_patients]
    report.add("patients", kept)
    if not kept:
        raise EmptyDatasetError("no patients survive preprocessing")

    dicts = Dictionaries(Vocabulary(), Vocabulary())
    by_patient: dict[str, tuple[list[Encounter], list[SearchEvent]]] = {}
    for r in kept:
        encs, srch = by_patient.setdefault(r.patient, ([], []))
        if r.kind == "encounter":
            encs.append(Encounter(r.patient, r.time, tuple(dicts.codes.add(c) for c in r.payload)))
        else:
            srch.append(SearchEvent(r.patient, r.time, dicts.terms.add(r.payload)))
    histories = {p: build_history(e, s, patient=p) for p, (e, s) in sorted(by_patient.items())}
    return histories, dicts, report


@dataclass(frozen=True)
class Dataset:
    histories: dict[str, PatientHistory]
    dictionaries: Dictionaries
    report: FilterReport
    errors: list[LineError]


def ingest(
    data_dir: str | Path,
    preprocess: PreprocessConfig | None = None,
    sessions: SessionConfig = SessionConfig(),
) -> Dataset:
    """Parse ``encounters.csv``/``searches.csv`` in ``data_dir``, filter and sessionize."""
    data_dir = Path(data_dir)
    preprocess = preprocess or PreprocessConfig()
    synonyms = preprocess.synonym_map
    if synonyms is None and (data_dir / "synonyms.csv").exists():
        synonyms = read_synonyms(data_dir / "synonyms.csv")
        preprocess = PreprocessConfig(
            preprocess.min_searches_per_patient,
            preprocess.min_encounters_per_patient,
            preprocess.min_term_frequency,
            preprocess.drop_irregular_terms,
            synonyms,
        )
    records, errors = parse_events(data_dir / "encounters.csv", data_dir / "searches.csv", synonyms)
    for e in errors:
        log.warning("malformed line %s", e)
    histories, dicts, report = apply_filters(records, preprocess)
    histories = {p: sessionize(h, sessions) for p, h in histories.items()}
    return Dataset(histories, dicts, report, errors)


def dataset_statistics(histories: Mapping[str, PatientHistory], dicts: Dictionaries,
                       sessions: SessionConfig = SessionConfig()) -> dict[str, float]:
    """Summary counts named after the usual dataset-statistics table rows."""
    hs = list(histories.values())
    n_pat = len(hs)
    n_search = sum(h.n_searches for h in hs)
    n_enc = sum(h.n_encounters for h in hs)
    n_sess = sum(len({s.session_id for s in sessionize(h, sessions).searches}) for h in hs)
    terms_seen = Counter(s.term for h in hs for s in h.searches)
    n_codes_per_enc = [len(e.codes) for h in hs for e in h.encounters]
    return {
        "Number of patients": n_pat,
        "Number of unique search terms": len(terms_seen),
        "Number of unique ICD 9 codes": len({c for h in hs for e in h.encounters for c in e.codes}),
        "Number of encounters": n_enc,
        "Number of sessions": n_sess,
        "Average number of searches per patient": n_search / n_pat,
        "Average number of unique search terms per patient":
            sum(len(set(h.terms())) for h in hs) / n_pat,
        "Average number of encounters per patient": n_enc / n_pat,
        "Average number of sessions per patient": n_sess / n_pat,
        "Average number of searches per term": n_search / max(len(terms_seen), 1),
        "Average number of search records per session": n_search / max(n_sess, 1),
        "Average number of unique ICD 9 codes per encounter":
            sum(n_codes_per_enc) / max(len(n_codes_per_enc), 1),
    }


def format_statistics(stats: Mapping[str, float]) -> str:
    width = max(map(len, stats))
    lines = []
    for k, v in stats.items():
        val = f"{v:,}" if isinstance(v, int) else f"{v:.2f}"
        lines.append(f"{k:<{width}}  {val:>12}")
    return "\n".join(lines) + "\n"
