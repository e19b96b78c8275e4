"""Time-decayed ICD code / search term co-occurrence counts.

For every patient, each search matched to encounter ``j`` adds
``lam ** (j - i)`` to ``A[c, term]`` for every code ``c`` of every encounter
``i <= j``. Exponents use encounter positions, not wall-clock gaps.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data_model import PatientHistory


@dataclass(frozen=True)
class CooccurrenceMatrix:
    n: int
    m: int
    lam: float
    entries: Mapping[tuple[int, int], float]

    def __post_init__(self):
        for (c, s), w in self.entries.items():
            if not (0 <= c < self.n and 0 <= s < self.m):
                raise ValueError(f"entry ({c}, {s}) outside {self.n}x{self.m}")
            if not w > 0:
                raise ValueError(f"stored weight must be positive, got {w} at ({c}, {s})")

    def __getitem__(self, key: tuple[int, int]) -> float:
        return self.entries.get(key, 0.0)

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def to_csr(self) -> sp.csr_matrix:
        if not self.entries:
            return sp.csr_matrix((self.n, self.m), dtype=np.float64)
        keys = sorted(self.entries)
        rows = np.fromiter((k[0] for k in keys), dtype=np.int64, count=len(keys))
        cols = np.fromiter((k[1] for k in keys), dtype=np.int64, count=len(keys))
        vals = np.fromiter((self.entries[k] for k in keys), dtype=np.float64, count=len(keys))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.m))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def __add__(self, other: CooccurrenceMatrix) -> CooccurrenceMatrix:
        if (self.n, self.m, self.lam) != (other.n, other.m, other.lam):
            raise ValueError("matrices differ in shape or decay")
        out = dict(self.entries)
        for k, w in other.entries.items():
            out[k] = out.get(k, 0.0) + w
        return CooccurrenceMatrix(self.n, self.m, self.lam, out)


def _check_lam(lam: float) -> None:
    if not 0 < lam < 1:
        raise ValueError(f"decay must lie in (0, 1), got {lam}")


def _shape(histories: Iterable[PatientHistory], n: int | None, m: int | None) -> tuple[int, int]:
    hs = list(histories)
    if n is None:
        n = 1 + max((c for h in hs for e in h.encounters for c in e.codes), default=-1)
    if m is None:
        m = 1 + max((s.term for h in hs for s in h.searches), default=-1)
    return n, m


def patient_cooccurrence(history: PatientHistory, lam: float) -> dict[tuple[int, int], float]:
    """One patient's contribution, via a backward decayed sum over encounters."""
    per_encounter: list[dict[int, int]] = [{} for _ in history.encounters]
    for s in history.searches:
        j = s.matched_encounter
        if j is not None:
            per_encounter[j][s.term] = per_encounter[j].get(s.term, 0) + 1

    out: dict[tuple[int, int], float] = {}
    carried: dict[int, float] = {}
    for i in range(len(history.encounters) - 1, -1, -1):
        # carried[t] = sum over later-or-same matched searches of lam ** (j - i)
        carried = {t: w * lam for t, w in carried.items()}
        for t, cnt in per_encounter[i].items():
            carried[t] = carried.get(t, 0.0) + cnt
        if not carried:
            continue
        for c in history.encounters[i].codes:
            for t, w in carried.items():
                out[(c, t)] = out.get((c, t), 0.0) + w
    return out


def build_cooccurrence(
    histories: Iterable[PatientHistory],
    lam: float = 0.5,
    n: int | None = None,
    m: int | None = None,
) -> CooccurrenceMatrix:
    _check_lam(lam)
    hs = sorted(histories, key=lambda h: h.patient)
    n, m = _shape(hs, n, m)
    total: dict[tuple[int, int], float] = {}
    for h in hs:
        for k, w in patient_cooccurrence(h, lam).items():
            total[k] = total.get(k, 0.0) + w
    # underflowed decays would violate the positive-weight invariant
    total = {k: w for k, w in total.items() if w > 0}
    return CooccurrenceMatrix(n, m, lam, total)


def cooccurrence_oracle(
    histories: Iterable[PatientHistory],
    lam: float = 0.5,
    n: int | None = None,
    m: int | None = None,
) -> CooccurrenceMatrix:
    """Literal triple sum over (patient, code encounter, term encounter)."""
    hs = list(histories)
    n, m = _shape(hs, n, m)
    total: dict[tuple[int, int], float] = {}
    for h in hs:
        for c in range(n):
            enc_c = [e.seq_index for e in h.encounters if c in e.codes]
            for s in range(m):
                enc_s = [x.matched_encounter for x in h.searches
                         if x.term == s and x.matched_encounter is not None]
                for ic in enc_c:
                    for js in enc_s:
                        if js >= ic:
                            total[(c, s)] = total.get((c, s), 0.0) + lam ** (js - ic)
    return CooccurrenceMatrix(n, m, lam, {k: w for k, w in total.items() if w > 0})


def dump_matrix(matrix: CooccurrenceMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={matrix.n} m={matrix.m} lambda={matrix.lam!r}\n")
        for (c, s) in sorted(matrix.entries):
            fh.write(f"{c} {s} {matrix.entries[(c, s)]!r}\n")


def load_matrix(path: str | Path) -> CooccurrenceMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing matrix header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        entries = {}
        for line in fh:
            if not line.strip():
                continue
            c, s, w = line.split()
            entries[(int(c), int(s))] = float(w)
    return CooccurrenceMatrix(int(fields["n"]), int(fields["m"]), float(fields["lambda"]), entries)
