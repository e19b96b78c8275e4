"""Deterministic synthetic encounter/search logs with a planted code->term map.

Codes are grouped into ``planted_rank`` clusters and every cluster owns one
preferred term, so the planted part of the co-occurrence matrix has rank
``planted_rank``. A search follows an encounter; with probability
``p_signal`` its term is the preferred term of a uniformly chosen code of
that encounter, otherwise a uniformly random term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .data_model import format_time, parse_time


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n_patients: int = 200
    n_codes: int = 30
    n_terms: int = 60
    encounters_per_patient: float = 12.0
    searches_per_encounter: float = 1.0
    codes_per_encounter: float = 1.0
    planted_rank: int = 8
    p_signal: float = 0.9
    start: str = "2013-04-01T00:00:00Z"
    timeline_days: float = 360.0
    session_gap_rate: float = 0.2
    # sparse mode skips the clamping to preprocessing minima
    sparse: bool = False
    min_encounters: int = 3
    min_searches: int = 2
    planted_map: tuple[int, ...] | None = field(default=None, compare=True)

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.n_codes < 2 or self.n_terms < 2:
            raise ValueError("n_codes and n_terms must be >= 2")
        if not 0.0 <= self.p_signal <= 1.0:
            raise ValueError("p_signal must lie in [0, 1]")
        if not 1 <= self.planted_rank <= min(self.n_codes, self.n_terms):
            raise ValueError("planted_rank must lie in [1, min(n_codes, n_terms)]")
        if self.encounters_per_patient <= 0 or self.codes_per_encounter < 1:
            raise ValueError("encounters_per_patient > 0 and codes_per_encounter >= 1 required")
        if self.searches_per_encounter < 0 or self.timeline_days <= 0:
            raise ValueError("invalid search rate or timeline")
        if not 0.0 <= self.session_gap_rate <= 1.0:
            raise ValueError("session_gap_rate must lie in [0, 1]")
        if self.planted_map is not None:
            if len(self.planted_map) != self.n_codes or not all(0 <= t < self.n_terms for t in self.planted_map):
                raise ValueError("planted_map needs one valid term id per code")

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "planted_map":
                if v is None:
                    continue
                v = ";".join(map(str, v))
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> GeneratorConfig:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"expected key=value, got {raw!r}")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in types:
                raise ValueError(f"unknown generator option {key!r}")
            kwargs[key] = _coerce(types[key], value)
        return cls(**kwargs)


def _coerce(type_name: str, value: str):
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    if type_name == "bool":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if type_name.startswith("tuple"):
        return tuple(int(x) for x in value.replace(",", ";").split(";") if x.strip())
    return value


def code_name(c: int) -> str:
    return f"{100 + c}.{c % 10}"


def term_name(t: int) -> str:
    return f"term{t:03d}"


def planted_map(config: GeneratorConfig) -> np.ndarray:
    """Preferred term id per code."""
    if config.planted_map is not None:
        return np.array(config.planted_map, dtype=np.int64)
    rng = np.random.default_rng([config.seed, 1])
    cluster_terms = rng.choice(config.n_terms, size=config.planted_rank, replace=False)
    clusters = rng.permutation(config.n_codes) % config.planted_rank
    return cluster_terms[clusters]


@dataclass
class SyntheticLog:
    encounters: list[tuple[str, datetime, tuple[str, ...]]]
    searches: list[tuple[str, datetime, str]]
    planted: dict[str, str]


def generate_log(config: GeneratorConfig) -> SyntheticLog:
    rng = np.random.default_rng(config.seed)
    planted = planted_map(config)
    t0 = parse_time(config.start)
    encounters = []
    searches = []
    for i in range(config.n_patients):
        pid = f"p{i:04d}"
        n_enc = int(rng.poisson(config.encounters_per_patient))
        if config.sparse:
            n_enc = max(n_enc, 1)
        else:
            n_enc = max(n_enc, config.min_encounters)
        # encounters spread over a shared timeline; a patient drawn for a
        # session gap gets a hole of more than 90 days before 60% of it
        T = config.timeline_days
        days = np.sort(rng.uniform(0.0, T, size=n_enc))
        if n_enc > 1 and rng.random() < config.session_gap_rate:
            split = int(rng.integers(1, n_enc))
            a = rng.uniform(0.1 * T, 0.5 * T)
            hole = min(91.0 + rng.uniform(0.0, 30.0), 0.9 * T - a)
            days[:split] = days[:split] * (a / T)
            days[split:] = a + hole + (days[split:] / T) * (T - a - hole)
        days = days + np.arange(n_enc)
        n_codes_each = 1 + rng.poisson(config.codes_per_encounter - 1, size=n_enc)
        n_search_each = rng.poisson(config.searches_per_encounter, size=n_enc)
        if not config.sparse:
            # top up the last encounters so the patient survives the search minimum
            k = n_enc - 1
            while n_search_each.sum() < config.min_searches:
                n_search_each[k] += 1
                k = (k - 1) % n_enc
        for j in range(n_enc):
            t = (t0 + timedelta(days=float(days[j]))).replace(microsecond=0)
            k_codes = min(int(n_codes_each[j]), config.n_codes)
            codes = rng.choice(config.n_codes, size=k_codes, replace=False)
            encounters.append((pid, t, tuple(code_name(int(c)) for c in codes)))
            k_s = int(n_search_each[j])
            # whole seconds, nudged apart so search times stay strictly increasing
            offsets = np.sort(rng.uniform(60.0, 12 * 3600.0, size=k_s).astype(np.int64)) + np.arange(k_s)
            for off in offsets:
                if rng.random() < config.p_signal:
                    term = int(planted[int(rng.choice(codes))])
                else:
                    term = int(rng.integers(config.n_terms))
                searches.append((pid, t + timedelta(seconds=int(off)), term_name(term)))
    return SyntheticLog(
        encounters,
        searches,
        {code_name(c): term_name(int(planted[c])) for c in range(config.n_codes)},
    )


def generate(config: GeneratorConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``encounters.csv`` and ``searches.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = generate_log(config)
    comment = "".join(f"# {line}\n" for line in config.to_kv().splitlines())
    enc_path = out / "encounters.csv"
    srch_path = out / "searches.csv"
    with open(enc_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(comment)
        fh.write("patient_id,timestamp,icd_codes\n")
        for pid, t, codes in log.encounters:
            fh.write(f'{pid},{format_time(t)},"{";".join(codes)}"\n')
    with open(srch_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(comment)
        fh.write("patient_id,timestamp,term\n")
        for pid, t, term in log.searches:
            fh.write(f"{pid},{format_time(t)},{term}\n")
    with open(out / "planted_map.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("icd_code,term\n")
        for c, t in log.planted.items():
            fh.write(f"{c},{t}\n")
    return enc_path, srch_path
