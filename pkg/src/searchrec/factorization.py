"""Regularized low-rank factorization of the co-occurrence matrix.

Minimizes ``||A - U V^T||_F^2 + gamma/2 (||U||_F^2 + ||V||_F^2)`` over the
full matrix, zeros included, by alternating gradient steps on ``U`` and
``V``. ``U V^T`` is never materialized: the loss and gradients only need
the sparse product ``A V`` (or ``A^T U``) and the ``d x d`` Gram matrices.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .cooccurrence import CooccurrenceMatrix

log = logging.getLogger(__name__)

MAGIC = b"SEARCHREC-MODEL 1\n"


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    d: int = 32
    gamma: float = 0.01
    # "exact": line search along the block gradient (the block loss is quadratic);
    # "fixed": start every block step at learning_rate and halve on increase
    step: Literal["exact", "fixed"] = "exact"
    learning_rate: float = 1e-3
    max_epochs: int = 500
    rel_tol: float = 1e-5
    seed: int = 0
    max_halvings: int = 20

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.gamma < 0 or self.learning_rate <= 0 or self.max_epochs < 1 or self.rel_tol < 0:
            raise ValueError(f"invalid training configuration {self}")
        if self.step not in ("exact", "fixed"):
            raise ValueError(f"unknown step rule {self.step!r}")


def _as_sparse(A) -> sp.csr_matrix:
    if isinstance(A, CooccurrenceMatrix):
        return A.to_csr()
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=np.float64)
    return sp.csr_matrix(np.asarray(A, dtype=np.float64))


def _check_shapes(A, U: np.ndarray, V: np.ndarray) -> None:
    n, m = A.shape
    if U.ndim != 2 or V.ndim != 2 or U.shape[0] != n or V.shape[0] != m or U.shape[1] != V.shape[1]:
        raise ValueError(f"shape mismatch: A {A.shape}, U {U.shape}, V {V.shape}")


def objective(A, U: np.ndarray, V: np.ndarray, gamma: float) -> float:
    A = _as_sparse(A)
    _check_shapes(A, U, V)
    a2 = float(A.multiply(A).sum())
    cross = float(np.sum((A @ V) * U))
    fit = float(np.sum((U.T @ U) * (V.T @ V)))
    return a2 - 2.0 * cross + fit + 0.5 * gamma * (float(np.sum(U * U)) + float(np.sum(V * V)))


def dense_objective(A, U: np.ndarray, V: np.ndarray, gamma: float) -> float:
    A = _as_sparse(A).toarray()
    _check_shapes(A, U, V)
    R = A - U @ V.T
    return float(np.sum(R * R) + 0.5 * gamma * (np.sum(U * U) + np.sum(V * V)))


def gradients(A, U: np.ndarray, V: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    A = _as_sparse(A)
    _check_shapes(A, U, V)
    gU = -2.0 * (A @ V - U @ (V.T @ V)) + gamma * U
    gV = -2.0 * (A.T @ U - V @ (U.T @ U)) + gamma * V
    return np.asarray(gU), np.asarray(gV)


def gradient_check(A, U: np.ndarray, V: np.ndarray, gamma: float, h: float = 1e-5) -> float:
    """Max elementwise relative error of the analytic gradients vs. central differences."""
    U = np.array(U, dtype=np.float64)
    V = np.array(V, dtype=np.float64)
    gU, gV = gradients(A, U, V, gamma)
    scale = 1.0 + max(np.abs(gU).max(initial=0.0), np.abs(gV).max(initial=0.0))
    worst = 0.0
    for X, G in ((U, gU), (V, gV)):
        for idx in np.ndindex(X.shape):
            old = X[idx]
            X[idx] = old + h
            fp = dense_objective(A, U, V, gamma)
            X[idx] = old - h
            fm = dense_objective(A, U, V, gamma)
            X[idx] = old
            fd = (fp - fm) / (2 * h)
            err = abs(G[idx] - fd) / (max(abs(G[idx]), abs(fd)) + 1e-6 * scale)
            worst = max(worst, err)
    return worst


def dictionary_hash(codes: list[str], terms: list[str]) -> str:
    h = hashlib.sha256()
    h.update("\n".join(codes).encode())
    h.update(b"\0")
    h.update("\n".join(terms).encode())
    return h.hexdigest()[:16]


@dataclass
class FactorModel:
    U: np.ndarray
    V: np.ndarray
    gamma: float
    lam: float = 0.5
    seed: int = 0
    codes: list[str] = field(default_factory=list)
    terms: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.V.shape[0]

    def estimate(self, c: int, s: int) -> float:
        return estimate(self, c, s)

    def save(self, path: str | Path) -> None:
        save_model(self, path)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FactorModel):
            return NotImplemented
        return (
            np.array_equal(self.U, other.U)
            and np.array_equal(self.V, other.V)
            and self.gamma == other.gamma
            and (self.lam == other.lam or (np.isnan(self.lam) and np.isnan(other.lam)))
            and self.codes == other.codes
            and self.terms == other.terms
        )


def estimate(model: FactorModel, c: int, s: int) -> float:
    if not (0 <= c < model.n and 0 <= s < model.m):
        raise IndexError(f"({c}, {s}) outside {model.n}x{model.m}")
    return float(model.U[c] @ model.V[s])


def _block_step(X, G, other_gram, loss_at, current, cfg: TrainConfig):
    """One accepted descent step on block X, or None if no step lowers the loss."""
    g2 = float(np.sum(G * G))
    if g2 == 0.0:
        return None
    if cfg.step == "exact":
        # the loss restricted to X - t G is a quadratic in t
        q = float(np.sum((G @ other_gram) * G)) + 0.5 * cfg.gamma * g2
        t = g2 / (2.0 * q) if q > 0 else cfg.learning_rate
    else:
        t = cfg.learning_rate
    for _ in range(cfg.max_halvings + 1):
        cand = X - t * G
        new = loss_at(cand)
        if np.isfinite(new) and new <= current:
            return cand, new
        t *= 0.5
    return None


def train(
    A: CooccurrenceMatrix | sp.spmatrix | np.ndarray,
    config: TrainConfig = TrainConfig(),
    codes: list[str] | None = None,
    terms: list[str] | None = None,
) -> FactorModel:
    lam = A.lam if isinstance(A, CooccurrenceMatrix) else float("nan")
    S = _as_sparse(A)
    St = S.T.tocsr()
    n, m = S.shape
    d = config.d
    if d >= min(n, m):
        raise ValueError(f"latent dimension {d} must be below min(n, m) = {min(n, m)}")

    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(d)
    U = rng.uniform(-bound, bound, size=(n, d))
    V = rng.uniform(-bound, bound, size=(m, d))

    a2 = float(S.multiply(S).sum())
    gamma = config.gamma

    def loss(U_, V_):
        return objective(S, U_, V_, gamma)

    current = loss(U, V)
    if not np.isfinite(current):
        raise TrainingError("non-finite initial loss", 0)
    losses = [current]
    for epoch in range(1, config.max_epochs + 1):
        prev = current
        stalled = 0

        VtV = V.T @ V
        gU = -2.0 * (S @ V - U @ VtV) + gamma * U
        step = _block_step(U, gU, VtV, lambda X: loss(X, V), current, config)
        if step is None:
            stalled += 1
        else:
            U, current = step

        UtU = U.T @ U
        gV = -2.0 * (St @ U - V @ UtU) + gamma * V
        step = _block_step(V, gV, UtU, lambda X: loss(U, X), current, config)
        if step is None:
            stalled += 1
        else:
            V, current = step

        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V)) and np.isfinite(current)):
            raise TrainingError("training diverged", epoch)
        losses.append(current)
        if stalled == 2:
            log.debug("no descent step found at epoch %d", epoch)
            break
        if current <= 1e-15 * max(a2, 1.0):
            break
        if prev > 0 and (prev - current) / prev < config.rel_tol:
            break

    return FactorModel(
        U=U,
        V=V,
        gamma=gamma,
        lam=lam,
        seed=config.seed,
        codes=list(codes) if codes is not None else [],
        terms=list(terms) if terms is not None else [],
        losses=losses,
        config=asdict(config),
    )


def save_model(model: FactorModel, path: str | Path) -> None:
    header = {
        "n": model.n,
        "m": model.m,
        "d": model.d,
        "gamma": model.gamma,
        "lambda": None if np.isnan(model.lam) else model.lam,
        "seed": model.seed,
        "dictionary_hash": dictionary_hash(model.codes, model.terms),
        "codes": model.codes,
        "terms": model.terms,
        "config": model.config,
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode())
    buf.write(b"\n")
    buf.write(np.ascontiguousarray(model.U, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.V, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> FactorModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a model file")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    n, m, d = header["n"], header["m"], header["d"]
    body = raw[end + 1:]
    if len(body) != 8 * d * (n + m):
        raise ValueError(f"{path}: truncated factor blocks")
    U = np.frombuffer(body, dtype="<f8", count=n * d).reshape(n, d).astype(np.float64)
    V = np.frombuffer(body, dtype="<f8", offset=8 * n * d).reshape(m, d).astype(np.float64)
    if header["codes"] or header["terms"]:
        if dictionary_hash(header["codes"], header["terms"]) != header["dictionary_hash"]:
            raise ValueError(f"{path}: dictionary hash mismatch")
    lam = header["lambda"]
    return FactorModel(
        U=U,
        V=V,
        gamma=header["gamma"],
        lam=float("nan") if lam is None else lam,
        seed=header["seed"],
        codes=header["codes"],
        terms=header["terms"],
        config=header["config"],
    )
