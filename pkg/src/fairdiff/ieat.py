"""Embedding association test: differential cosine association of two target
sets with two attribute sets, a one-sided permutation p-value and an effect
size.

Sums over sets are accumulated left to right in input order, so the identity
partition reproduces the observed statistic bit for bit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, InputError, NumericError, ParseError
from .numerics import Rng


@dataclass
class ConceptSet:
    label: str
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[0] == 0:
            raise InputError(f"concept set {self.label!r} must be a non-empty list of vectors")
        if np.any(np.linalg.norm(v, axis=1) == 0):
            raise NumericError(f"concept set {self.label!r} contains a zero vector")
        self.vectors = v

    def __len__(self):
        return self.vectors.shape[0]


@dataclass(frozen=True)
class IeatConfig:
    exact_cap: int = 200_000
    mc_draws: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.exact_cap < 1 or self.mc_draws < 1:
            raise InputError("exact_cap and mc_draws must be >= 1")


@dataclass(frozen=True)
class IeatResult:
    statistic: float
    p_value: float
    effect_size: float
    method: str
    partitions: int
    std_error: float | None = None


def _as_matrix(vecs) -> np.ndarray:
    if isinstance(vecs, ConceptSet):
        return vecs.vectors
    m = np.asarray(vecs, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] == 0:
        raise InputError("expected a non-empty sequence of vectors")
    return m


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise NumericError("zero-norm vector")
    return m / norms[:, None]


def _seq_sum(values) -> float:
    total = 0.0
    for v in values:
        total += v
    return total


def _cos_matrix(W: np.ndarray, S: np.ndarray) -> np.ndarray:
    if W.shape[1] != S.shape[1]:
        raise InputError(f"dimension mismatch {W.shape[1]} vs {S.shape[1]}")
    w_norm = np.linalg.norm(W, axis=1)
    s_norm = np.linalg.norm(S, axis=1)
    if np.any(w_norm == 0) or np.any(s_norm == 0):
        raise NumericError("zero-norm vector")
    return (W @ S.T) / (w_norm[:, None] * s_norm[None, :])


def assoc_values(W, A, B) -> np.ndarray:
    """``s(w, A, B)`` for every row of ``W``."""
    W, A, B = _as_matrix(W), _as_matrix(A), _as_matrix(B)
    ca, cb = _cos_matrix(W, A), _cos_matrix(W, B)
    return np.array([_seq_sum(ra) / ra.size - _seq_sum(rb) / rb.size for ra, rb in zip(ca, cb)])


def assoc(w, A, B) -> float:
    """Mean cosine of ``w`` to ``A`` minus mean cosine to ``B``."""
    return float(assoc_values(np.atleast_2d(np.asarray(w, dtype=float)), A, B)[0])


def _stat_from_assoc(sx, sy) -> float:
    return _seq_sum(sx) - _seq_sum(sy)


def test_statistic(X, Y, A, B) -> float:
    return _stat_from_assoc(assoc_values(X, A, B), assoc_values(Y, A, B))


test_statistic.__test__ = False  # not a pytest test


def effect_size(X, Y, A, B) -> float:
    """Mean association difference over the sample standard deviation
    (divisor n-1) of associations across ``X`` and ``Y`` pooled."""
    sx, sy = assoc_values(X, A, B), assoc_values(Y, A, B)
    pooled = np.concatenate([sx, sy])
    if pooled.size < 2:
        raise DegenerateInputError("effect size needs at least two target vectors")
    sd = float(np.std(pooled, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("associations have zero dispersion")
    return (_seq_sum(sx) / sx.size - _seq_sum(sy) / sy.size) / sd


def _partition_stats(values: np.ndarray, nx: int, idx_x: np.ndarray) -> np.ndarray:
    """Statistic for each row of X-index sets; Y is the complement, both in
    ascending index order, summed left to right."""
    n = values.size
    p = idx_x.shape[0]
    in_x = np.zeros((p, n), dtype=bool)
    np.put_along_axis(in_x, idx_x, True, axis=1)
    order = np.argsort(~in_x, axis=1, kind="stable")
    gathered = values[order]
    sx = np.zeros(p)
    for k in range(nx):
        sx = sx + gathered[:, k]
    sy = np.zeros(p)
    for k in range(nx, n):
        sy = sy + gathered[:, k]
    return sx - sy


def _combination_blocks(n: int, k: int, block: int = 50_000):
    it = combinations(range(n), k)
    while True:
        chunk = list(_take(it, block))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.int64).reshape(len(chunk), k)


def _take(it, k):
    for _ in range(k):
        try:
            yield next(it)
        except StopIteration:
            return


def p_value(X, Y, A, B, cfg: IeatConfig = IeatConfig()) -> tuple[float, str, int, float | None]:
    """One-sided ``Pr[s(X_i, Y_i) > s(X, Y)]`` over equal-size re-partitions of
    ``X + Y``. Exact enumeration when feasible, else Monte Carlo.

    Returns ``(p, method, partitions, std_error)``.
    """
    sx, sy = assoc_values(X, A, B), assoc_values(Y, A, B)
    observed = _stat_from_assoc(sx, sy)
    values = np.concatenate([sx, sy])
    nx, n = sx.size, values.size
    total = math.comb(n, nx)
    if total <= cfg.exact_cap:
        greater = 0
        for block in _combination_blocks(n, nx):
            greater += int(np.count_nonzero(_partition_stats(values, nx, block) > observed))
        return greater / total, "exact", total, None
    rng = Rng(cfg.seed, stream=31)
    greater = 0
    done = 0
    while done < cfg.mc_draws:
        m = min(10_000, cfg.mc_draws - done)
        u = rng.uniform(m * n).reshape(m, n)
        idx = np.sort(np.argsort(u, axis=1, kind="stable")[:, :nx], axis=1)
        greater += int(np.count_nonzero(_partition_stats(values, nx, idx) > observed))
        done += m
    p = greater / cfg.mc_draws
    return p, "monte-carlo", cfg.mc_draws, math.sqrt(p * (1.0 - p) / cfg.mc_draws)


def ieat(X, Y, A, B, cfg: IeatConfig = IeatConfig()) -> IeatResult:
    s = test_statistic(X, Y, A, B)
    p, method, parts, se = p_value(X, Y, A, B, cfg)
    return IeatResult(s, p, effect_size(X, Y, A, B), method, parts, se)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_concept_set(path, label: str | None = None) -> ConceptSet:
    """CSV ``id,x0,...,x{D-1}``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"]:
        raise ParseError("concept-set header must start with 'id'", line=1)
    vecs = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise ParseError(f"expected {len(rows[0])} fields, got {len(row)}", line=n)
        try:
            vecs.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=n) from None
    return ConceptSet(label or str(path), np.array(vecs))


def write_concept_set(vectors, path, prefix: str = "v") -> None:
    m = _as_matrix(vectors)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"x{i}" for i in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([f"{prefix}{i}"] + ["%.17g" % v for v in row])


def result_row(r: IeatResult) -> list[str]:
    return ["%.17g" % r.statistic, "%.17g" % r.p_value, "%.17g" % r.effect_size, r.method,
            str(r.partitions), "" if r.std_error is None else "%.17g" % r.std_error]


RESULT_HEADER = ["S", "p", "d", "method", "partitions", "se"]
