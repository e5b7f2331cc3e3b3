"""Hamming ranking and retrieval metrics (MAP@N, PR curve, P@N).

Ranking is by Hamming distance with ties broken by ascending database id.
An item is relevant to a query when their label sets intersect. AP over a
ranked list is normalized by the number of relevant items found in that
list and is 0 when none is found.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionError, InvalidInputError
from .hashcore import CodeTable, HashCode
from .semantics import as_labels

DEFAULT_TOPN = 5000
DEFAULT_PN_GRID = (1, 10, 50, 100, 200, 500, 1000, 2000, 5000)


@dataclass(frozen=True, eq=False)
class Index:
    codes: CodeTable
    labels: np.ndarray

    def __post_init__(self):
        lab = as_labels(np.atleast_2d(self.labels))
        if lab.shape[0] != len(self.codes):
            raise DimensionError(f"{len(self.codes)} codes but {lab.shape[0]} label rows")
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def k(self) -> int:
        return self.codes.k

    def __len__(self):
        return len(self.codes)


def _queries(queries, index: Index) -> CodeTable:
    if isinstance(queries, HashCode):
        queries = CodeTable(queries.k, queries.words[None, :])
    if queries.k != index.k:
        raise DimensionError(f"query code length {queries.k} != index code length {index.k}")
    return queries


def rank_many(queries: CodeTable, index: Index, topn: int) -> np.ndarray:
    """``(Q, min(topn, N))`` database ids per query, nearest first."""
    if topn < 1:
        raise InvalidInputError("topn must be >= 1")
    queries = _queries(queries, index)
    ids, _ = kernels.hamming_topn(queries.words, index.codes.words, index.k, topn)
    return ids


def rank(query: HashCode, index: Index, topn: int) -> np.ndarray:
    return rank_many(query, index, topn)[0]


def relevance(query_labels, index: Index, ids: np.ndarray) -> np.ndarray:
    """0/1 relevance of ranked ``ids`` for each query."""
    q = as_labels(np.atleast_2d(query_labels), index.labels.shape[1]).astype(np.float32)
    shared = q @ index.labels.T.astype(np.float32) > 0
    return np.take_along_axis(shared, ids, axis=1)


def average_precision(rels) -> float:
    rels = np.asarray(rels, dtype=bool).reshape(1, -1)
    if rels.shape[1] == 0:
        raise InvalidInputError("relevance list is empty")
    return float(kernels.average_precision_rows(rels)[0])


@dataclass
class MetricsReport:
    map: float
    per_query_ap: list
    pr_curve: list = field(default_factory=list)
    pn_curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    pr_dropped: int = 0

    def to_dict(self) -> dict:
        return {"map": self.map, "per_query_ap": self.per_query_ap, "config": self.config,
                "pr_dropped_queries": self.pr_dropped}

    def write(self, json_path, pr_csv=None, pn_csv=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if pr_csv is not None:
            _write_csv(pr_csv, ("recall", "precision"), self.pr_curve)
        if pn_csv is not None:
            _write_csv(pn_csv, ("topn", "precision"), self.pn_curve)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for a, b in rows:
            w.writerow([a if isinstance(a, (int, np.integer)) else repr(float(a)), repr(float(b))])


def _check_query_set(queries, query_labels, index):
    queries = _queries(queries, index)
    if len(queries) == 0:
        raise InvalidInputError("empty query set")
    q_lab = as_labels(np.atleast_2d(query_labels), index.labels.shape[1])
    if q_lab.shape[0] != len(queries):
        raise DimensionError(f"{len(queries)} query codes but {q_lab.shape[0]} label rows")
    return queries, q_lab


def map_at_n(queries: CodeTable, query_labels, index: Index, topn: int = DEFAULT_TOPN) -> MetricsReport:
    queries, q_lab = _check_query_set(queries, query_labels, index)
    ids = rank_many(queries, index, topn)
    ap = kernels.average_precision_rows(relevance(q_lab, index, ids))
    return MetricsReport(float(ap.mean()), [float(v) for v in ap], config={"topn": int(topn)})


def _full_relevance(queries, q_lab, index):
    ids = rank_many(queries, index, len(index))
    return relevance(q_lab, index, ids)


def pr_curve(queries: CodeTable, query_labels, index: Index) -> tuple[list, int]:
    """Macro-averaged (recall, precision) at every rank cutoff 1..N.

    Queries with no relevant database item are left out; their count is
    returned alongside the curve.
    """
    queries, q_lab = _check_query_set(queries, query_labels, index)
    rel = _full_relevance(queries, q_lab, index)
    hits = np.cumsum(rel, axis=1, dtype=np.int64)
    total = hits[:, -1]
    keep = total > 0
    if not keep.any():
        return [], int((~keep).sum())
    cut = np.arange(1, rel.shape[1] + 1)
    precision = (hits[keep] / cut).mean(axis=0)
    recall = (hits[keep] / total[keep, None]).mean(axis=0)
    return [(float(r), float(p)) for r, p in zip(recall, precision)], int((~keep).sum())


def p_at_topn(queries: CodeTable, query_labels, index: Index, grid=DEFAULT_PN_GRID) -> list:
    """Mean precision within the top-N ranks for each N of ``grid`` (clamped to the database size)."""
    queries, q_lab = _check_query_set(queries, query_labels, index)
    grid = sorted({min(int(n), len(index)) for n in grid if int(n) >= 1})
    if not grid:
        raise InvalidInputError("P@N grid has no positive entry")
    ids = rank_many(queries, index, grid[-1])
    hits = np.cumsum(relevance(q_lab, index, ids), axis=1)
    return [(n, float((hits[:, n - 1] / n).mean())) for n in grid]


def evaluate(queries: CodeTable, query_labels, index: Index, topn: int = DEFAULT_TOPN,
             grid=DEFAULT_PN_GRID, curves: bool = True) -> MetricsReport:
    """MAP@topn plus, optionally, the PR and P@N curves in one report."""
    rep = map_at_n(queries, query_labels, index, topn)
    if curves:
        rep.pr_curve, rep.pr_dropped = pr_curve(queries, query_labels, index)
        rep.pn_curve = p_at_topn(queries, query_labels, index, grid)
        rep.config["pn_grid"] = [n for n, _ in rep.pn_curve]
    return rep
