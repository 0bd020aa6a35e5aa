"""Reduce an arbitrary point cloud to exactly ``k`` NDT cells.

Three stages:

1. bisect a voxel edge length until centroid downsampling yields about
   ``k * c`` points (within tolerance ``t``);
2. fit one cell around each centroid from all original points within ``r``;
3. greedily drop the most redundant cell (smallest symmetric KL to one of its
   nearest neighbours) until ``k`` remain.
"""

from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .ndt import MIN_SUPPORT, NdtError, _check_pd, NdtMap, as_points, group_statistics, regularize_cov, sym_kl_arrays

log = logging.getLogger(__name__)


class CondenseError(NdtError):
    pass


@dataclass(frozen=True)
class CondenserConfig:
    k: int = 2000
    c: float = 1.3
    t: float = 0.05
    r: float = 1.0
    max_iters: int = 40
    m_nn: int = 8
    min_support: int = MIN_SUPPORT

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.t < 1:
            raise ValueError("t must lie in (0, 1)")
        if not self.c > 1 + self.t:
            raise ValueError("oversampling factor c must exceed 1 + t")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.m_nn < 1:
            raise ValueError("m_nn must be >= 1")


@dataclass
class VoxelSearchResult:
    voxel_size: float
    centroids: np.ndarray
    iterations: int
    converged: bool
    monotone: bool = True


def voxel_downsample(points: np.ndarray, voxel_size: float, origin: np.ndarray | None = None) -> np.ndarray:
    """One centroid per occupied voxel, in ascending voxel-key order."""
    if origin is None:
        origin = points.min(axis=0)
    keys = np.floor((points - origin) / voxel_size).astype(np.int64)
    dims = keys.max(axis=0) + 1
    flat = (keys[:, 0] * dims[1] + keys[:, 1]) * dims[2] + keys[:, 2]
    _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    sums = np.stack([np.bincount(inverse, weights=points[:, a], minlength=len(counts)) for a in range(3)], axis=1)
    return sums / counts[:, None]


def _count_bounds(target: float, t: float) -> tuple[int, int]:
    lo, hi = math.ceil(target * (1 - t)), math.floor(target * (1 + t))
    if lo > hi:
        lo = hi = max(1, round(target))
    return lo, hi


def voxel_size_search(cloud, target: float, t: float = 0.05, max_iters: int = 40) -> VoxelSearchResult:
    """Bisect (in log space) for a voxel size whose centroid count hits ``target``."""
    pts = as_points(cloud)
    lo_count, hi_count = _count_bounds(target, t)
    if len(pts) < lo_count:
        raise CondenseError(f"insufficient points: {len(pts)} < {lo_count}")
    origin = pts.min(axis=0)
    diag = float(np.linalg.norm(pts.max(axis=0) - origin))
    if diag == 0.0:
        if lo_count <= 1:
            return VoxelSearchResult(1.0, pts[:1].copy(), 0, True)
        raise CondenseError("insufficient points: all points coincide")

    small, large = diag / 1e4, diag
    c_small = voxel_downsample(pts, small, origin)
    if len(c_small) < lo_count:
        raise CondenseError(f"insufficient points: at most {len(c_small)} distinct voxels")
    best = (abs(len(c_small) - target), small, c_small)
    if len(c_small) <= hi_count:
        return VoxelSearchResult(small, c_small, 0, True)

    n_small = len(c_small)
    n_large = len(voxel_downsample(pts, large, origin))
    monotone = True
    for it in range(1, max_iters + 1):
        mid = math.sqrt(small * large)
        cents = voxel_downsample(pts, mid, origin)
        n = len(cents)
        if n > n_small or n < n_large:
            monotone = False
        if abs(n - target) < best[0]:
            best = (abs(n - target), mid, cents)
        if lo_count <= n <= hi_count:
            return VoxelSearchResult(mid, cents, it, True, monotone)
        if n > hi_count:
            small, n_small = mid, n
        else:
            large, n_large = mid, n
    log.warning("voxel size search did not converge in %d iterations", max_iters)
    return VoxelSearchResult(best[1], best[2], max_iters, False, monotone)


def neighborhood_cells(
    cloud, centroids, r: float, min_support: int = MIN_SUPPORT, tree: cKDTree | None = None, workers: int = 1
) -> NdtMap:
    """Fit one regularized cell per centroid from the original points within ``r``."""
    if r <= 0:
        raise ValueError("r must be positive")
    pts = as_points(cloud)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or len(centroids) == 0:
        return NdtMap.empty(r)
    if tree is None:
        tree = cKDTree(pts)
    hoods = tree.query_ball_point(centroids, r, return_sorted=True, workers=workers)
    counts = np.fromiter((len(h) for h in hoods), dtype=np.int64, count=len(hoods))
    keep = np.flatnonzero(counts >= min_support)
    if len(keep) == 0:
        return NdtMap.empty(r)
    order = np.concatenate([np.asarray(hoods[i], dtype=np.int64) for i in keep])
    starts = np.concatenate([[0], np.cumsum(counts[keep])[:-1]])
    means, covs, counts = group_statistics(pts, order, starts)
    return NdtMap(means, regularize_cov(covs), counts, r)


def _sq_dists(means: np.ndarray, i: int, cand: np.ndarray) -> np.ndarray:
    d = means[cand] - means[i]
    return np.einsum("ij,ij->i", d, d)


def _nearest(means: np.ndarray, i: int, cand: np.ndarray, m: int) -> np.ndarray:
    """The ``m`` candidates closest to cell ``i``; ties broken by lower index."""
    cand = cand[cand != i]
    d = _sq_dists(means, i, cand)
    if len(cand) > m:
        cut = np.partition(d, m - 1)[m - 1]
        close = d <= cut
        cand, d = cand[close], d[close]
    order = np.lexsort((cand, d))
    return cand[order[:m]]


class _Neighbours:
    """m nearest surviving cells, with a kd-tree proposing candidates."""

    def __init__(self, means: np.ndarray, m: int):
        self.means = means
        self.m = m
        self.tree = cKDTree(means)
        self.alive = np.ones(len(means), dtype=bool)

    def __call__(self, i: int) -> np.ndarray:
        n_alive = int(self.alive.sum()) - 1
        want = min(self.m, n_alive)
        if want <= 0:
            return np.zeros(0, dtype=np.int64)
        q = min(len(self.means), 2 * (self.m + 1))
        while True:
            dist, idx = self.tree.query(self.means[i], k=q)
            idx = np.atleast_1d(idx)
            dist = np.atleast_1d(dist)
            ok = self.alive[idx] & (idx != i)
            if ok.sum() >= want or q >= len(self.means):
                break
            q = min(len(self.means), 2 * q)
        reach = dist[ok][want - 1]
        # ball query so boundary ties are never cut off by the tree
        cand = np.asarray(self.tree.query_ball_point(self.means[i], reach * (1 + 1e-9) + 1e-300), dtype=np.int64)
        cand = cand[self.alive[cand]]
        return _nearest(self.means, i, cand, self.m)


def _score(ndt: NdtMap, inv: np.ndarray, i: int, nbrs: np.ndarray) -> float:
    if len(nbrs) == 0:
        return math.inf
    d = ndt.means[nbrs] - ndt.means[i]
    tr = np.einsum("ij,nji->n", inv[i], ndt.covs[nbrs]) + np.einsum("nij,ji->n", inv[nbrs], ndt.covs[i])
    maha = np.einsum("ni,nij,nj->n", d, inv[nbrs] + inv[i], d)
    return float(np.maximum(0.25 * (tr + maha - 6.0), 0.0).min())


def prune_mutual_information(cells: NdtMap, k: int, m_nn: int = 8) -> NdtMap:
    """Remove the most redundant cell repeatedly until ``k`` remain.

    A cell's redundancy score is its minimum symmetric KL over its ``m_nn``
    nearest surviving cells (by mean position); the lowest score goes first,
    ties to the lowest index. After each removal only cells that listed the
    removed one as a neighbour are re-scored. Survivors keep input order.
    """
    n = len(cells)
    if n < k:
        raise CondenseError(f"under-populated: {n} cells < k={k}")
    if n == k:
        return cells
    _check_pd(cells.covs)
    inv = np.linalg.inv(cells.covs)
    nearest = _Neighbours(cells.means, m_nn)
    alive = nearest.alive
    nbrs = [nearest(i) for i in range(n)]
    listed_by: list[set[int]] = [set() for _ in range(n)]
    for i in range(n):
        for j in nbrs[i]:
            listed_by[j].add(i)

    scores = np.array([_score(cells, inv, i, nbrs[i]) for i in range(n)])
    heap = [(scores[i], i) for i in range(n)]
    heapq.heapify(heap)
    remaining = n
    while remaining > k:
        s, i = heapq.heappop(heap)
        if not alive[i] or s != scores[i]:
            continue
        alive[i] = False
        remaining -= 1
        for j in nbrs[i]:
            listed_by[j].discard(i)
        for j in sorted(listed_by[i]):
            if not alive[j]:
                continue
            for old in nbrs[j]:
                listed_by[old].discard(j)
            nbrs[j] = nearest(j)
            for new in nbrs[j]:
                listed_by[new].add(j)
            scores[j] = _score(cells, inv, j, nbrs[j])
            heapq.heappush(heap, (scores[j], j))
        listed_by[i].clear()
    return cells.take(np.flatnonzero(alive))


def prune_exhaustive(cells: NdtMap, k: int, m_nn: int = 8) -> list[int]:
    """Reference pruning that recomputes every score from scratch each round.

    Returns the removal order (original indices). Quadratic per round; only
    meant for small inputs.
    """
    n = len(cells)
    if n < k:
        raise CondenseError(f"under-populated: {n} cells < k={k}")
    alive = list(range(n))
    removed = []
    while len(alive) > k:
        best_score, best_i = math.inf, None
        for i in alive:
            others = [j for j in alive if j != i]
            dist = []
            for j in others:
                d = cells.means[j] - cells.means[i]
                dist.append((float(np.dot(d, d)), j))
            dist.sort()
            score = math.inf
            for _, j in dist[:m_nn]:
                kl = float(sym_kl_arrays(cells.means[i], cells.covs[i], cells.means[j], cells.covs[j]))
                score = min(score, kl)
            if score < best_score:
                best_score, best_i = score, i
        if best_i is None:
            best_i = alive[0]
        alive.remove(best_i)
        removed.append(best_i)
    return removed


def condense(cloud, cfg: CondenserConfig = CondenserConfig(), workers: int = 1) -> NdtMap:
    """Full pipeline: centroid search, radius cells, KL pruning to exactly ``cfg.k`` cells."""
    pts = as_points(cloud)
    search = voxel_size_search(pts, cfg.k * cfg.c, cfg.t, cfg.max_iters)
    tree = cKDTree(pts)
    r = cfg.r
    for attempt in range(2):
        cells = neighborhood_cells(pts, search.centroids, r, cfg.min_support, tree=tree, workers=workers)
        if len(cells) >= cfg.k:
            break
        log.debug("only %d cells at r=%.3g, retrying with doubled radius", len(cells), r)
        r *= 2
    else:
        raise CondenseError(f"sparse submap: {len(cells)} cells < k={cfg.k}")
    out = prune_mutual_information(cells, cfg.k, cfg.m_nn)
    out.meta.update(voxel_size=search.voxel_size, converged=search.converged, radius=r)
    return NdtMap(out.means, out.covs, out.supports, search.voxel_size, dict(out.meta))


def condense_many(clouds, cfg: CondenserConfig = CondenserConfig(), workers: int = 1) -> list[NdtMap]:
    """Condense a batch of clouds; output order follows input order."""
    if workers <= 1:
        return [condense(c, cfg) for c in clouds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: condense(c, cfg), clouds))
