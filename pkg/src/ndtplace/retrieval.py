"""Descriptor database, exact nearest-neighbour queries, Recall@N evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .places import POSITIVE_RADIUS

MAX_N = 25


class RetrievalError(ValueError):
    pass


class DescriptorIndex:
    """Immutable exact index; ``method`` is "tree", "exhaustive" or "auto".

    Whatever the backend, results are re-ranked with exact distances and ties
    are broken by id, so every backend returns the same ranking as a full scan.
    """

    TREE_MIN = 4096

    def __init__(self, ids, descriptors, positions=None, method: str = "auto"):
        ids = np.asarray(ids, dtype=np.int64)
        desc = np.asarray(descriptors, dtype=np.float64)
        if len(ids) == 0:
            raise RetrievalError("empty database")
        if desc.ndim != 2 or len(desc) != len(ids):
            raise RetrievalError(f"descriptor matrix {desc.shape} does not match {len(ids)} ids")
        if len(np.unique(ids)) != len(ids):
            raise RetrievalError("duplicate ids in database")
        self.ids = ids
        self.descriptors = desc
        self.positions = None if positions is None else np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        for arr in (self.ids, self.descriptors) + ((self.positions,) if self.positions is not None else ()):
            arr.setflags(write=False)
        if method == "auto":
            method = "tree" if len(ids) >= self.TREE_MIN else "exhaustive"
        if method not in ("tree", "exhaustive"):
            raise ValueError(f"unknown index method {method!r}")
        self.method = method
        self._tree = cKDTree(desc) if method == "tree" else None
        self.query_times: list[float] = []

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def _distances(self, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
        diff = self.descriptors[rows] - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def _rank(self, q: np.ndarray, rows: np.ndarray, n: int):
        d = self._distances(q, rows)
        order = np.lexsort((self.ids[rows], d))[:n]
        return rows[order], d[order]

    def query(self, descriptor, n: int = MAX_N, exclude_id: int | None = None) -> list[tuple[int, float]]:
        """Top-``n`` (id, distance) pairs by ascending distance, ties by id."""
        if n < 1:
            raise ValueError("n must be >= 1")
        q = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise RetrievalError(f"query has dimension {q.shape[0]}, database {self.dim}")
        t0 = time.perf_counter()
        want = min(n + (exclude_id is not None), len(self))
        if self._tree is None:
            rows, d = self._rank(q, np.arange(len(self)), want)
        else:
            kd, _ = self._tree.query(q, k=want)
            reach = float(np.atleast_1d(kd)[-1])
            # ball at the k-th distance catches every tie the tree may have cut
            cand = np.asarray(self._tree.query_ball_point(q, reach * (1 + 1e-9) + 1e-12), dtype=np.int64)
            rows, d = self._rank(q, cand, want)
        self.query_times.append(time.perf_counter() - t0)
        out = [(int(self.ids[r]), float(x)) for r, x in zip(rows, d) if self.ids[r] != exclude_id]
        return out[:n]


def build_index(records, method: str = "auto") -> DescriptorIndex:
    """Index PlaceRecords that all carry descriptors."""
    records = list(records)
    if not records:
        raise RetrievalError("empty database")
    for r in records:
        if r.descriptor is None:
            raise RetrievalError(f"record {r.id} has no descriptor")
    dims = {np.asarray(r.descriptor).reshape(-1).shape[0] for r in records}
    if len(dims) != 1:
        raise RetrievalError(f"descriptor dimensions differ: {sorted(dims)}")
    return DescriptorIndex(
        [r.id for r in records],
        np.stack([np.asarray(r.descriptor, dtype=np.float64).reshape(-1) for r in records]),
        [[r.x, r.y] for r in records],
        method,
    )


def exhaustive_topn(descriptors, ids, q, n: int) -> list[int]:
    """Full-scan reference: sort every record by (distance, id)."""
    d = np.linalg.norm(np.asarray(descriptors) - np.asarray(q), axis=1)
    order = sorted(range(len(ids)), key=lambda i: (d[i], ids[i]))
    return [int(ids[i]) for i in order[:n]]


@dataclass
class EvalReport:
    recall_at_n: np.ndarray
    recall_at_1pct: float
    one_percent_n: int
    ranks: dict[int, int | None] = field(default_factory=dict)
    n_queries: int = 0
    n_skipped: int = 0
    query_seconds: float = 0.0

    @property
    def recall_at_1(self) -> float:
        return float(self.recall_at_n[0])

    def rows(self):
        return [(n + 1, float(r)) for n, r in enumerate(self.recall_at_n)]


def one_percent_n(db_size: int) -> int:
    return max(1, math.ceil(0.01 * db_size))


def recall_from_ranks(first_correct: list[int | None], db_size: int, max_n: int = MAX_N) -> tuple[np.ndarray, float]:
    """Recall@1..max_n and Recall@1% (percent) from 1-based first-correct ranks (None = miss)."""
    if not first_correct:
        raise RetrievalError("empty query set")
    ranks = np.array([np.inf if r is None else r for r in first_correct], dtype=np.float64)
    curve = np.array([100.0 * np.mean(ranks <= n) for n in range(1, max_n + 1)])
    return curve, float(100.0 * np.mean(ranks <= one_percent_n(db_size)))


def evaluate(
    query_ids,
    query_positions,
    query_descriptors,
    index: DescriptorIndex,
    radius: float = POSITIVE_RADIUS,
    max_n: int = MAX_N,
) -> EvalReport:
    """Recall@N of each query against ``index`` (which must carry positions).

    A hit is a retrieved record strictly within ``radius`` metres (planar) of
    the query. Queries with no such record in the database are skipped; a
    database record with the query's own id is never retrieved.
    """
    if index.positions is None:
        raise RetrievalError("database positions are required for evaluation")
    qids = np.asarray(query_ids, dtype=np.int64)
    if len(qids) == 0:
        raise RetrievalError("empty query set")
    qpos = np.asarray(query_positions, dtype=np.float64).reshape(-1, 2)
    qdesc = np.asarray(query_descriptors, dtype=np.float64).reshape(len(qids), -1)
    pos_tree = cKDTree(index.positions)
    depth = max(max_n, one_percent_n(len(index)))
    ranks: dict[int, int | None] = {}
    skipped = 0
    t0 = time.perf_counter()
    for qid, p, d in zip(qids, qpos, qdesc):
        near = pos_tree.query_ball_point(p, radius)
        truth = {
            int(index.ids[j]) for j in near if np.hypot(*(index.positions[j] - p)) < radius and index.ids[j] != qid
        }
        if not truth:
            skipped += 1
            continue
        hits = index.query(d, depth, exclude_id=int(qid))
        ranks[int(qid)] = next((i + 1 for i, (rid, _) in enumerate(hits) if rid in truth), None)
    elapsed = time.perf_counter() - t0
    if not ranks:
        raise RetrievalError("no query has a true positive in the database")
    curve, pct = recall_from_ranks(list(ranks.values()), len(index), max_n)
    return EvalReport(curve, pct, one_percent_n(len(index)), ranks, len(ranks), skipped, elapsed)


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as f:
        f.write("N,recall\n")
        for n, r in report.rows():
            f.write(f"{n},{r:.4f}\n")
        f.write(f"1%,{report.recall_at_1pct:.4f}\n")
