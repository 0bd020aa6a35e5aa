"""Gaussian algebra for NDT cells.

A cell is a 3D Gaussian (mean, covariance) estimated from a local group of
points. Maps are stored as stacked arrays so the condenser and the network
can work on them without per-cell Python objects; ``NdtMap.cells`` gives the
object view when one is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPSILON_REG = 1e-3
MIN_SUPPORT = 3
SYMMETRY_TOL = 1e-12

# upper-triangular serialization order: c11, c12, c13, c22, c23, c33
TRIU_ROWS = np.array([0, 0, 0, 1, 1, 2])
TRIU_COLS = np.array([0, 1, 2, 1, 2, 2])


class NdtError(ValueError):
    pass


@dataclass(frozen=True)
class NdtCell:
    mean: np.ndarray
    cov: np.ndarray
    support: int = 1

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        if self.support < 1:
            raise NdtError(f"support must be >= 1, got {self.support}")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True, eq=False)
class NdtMap:
    """Fixed set of cells: ``means`` (k, 3), ``covs`` (k, 3, 3), ``supports`` (k,)."""

    means: np.ndarray
    covs: np.ndarray
    supports: np.ndarray
    resolution: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 3, 3)
        supports = np.asarray(self.supports, dtype=np.int64).reshape(-1)
        if not (len(means) == len(covs) == len(supports)):
            raise NdtError("means, covs and supports disagree in length")
        for arr in (means, covs, supports):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "resolution", float(self.resolution))

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> NdtCell:
        return NdtCell(self.means[i], self.covs[i], int(self.supports[i]))

    @property
    def cells(self) -> list[NdtCell]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_cells(cls, cells, resolution: float = 0.0) -> "NdtMap":
        if not cells:
            return cls.empty(resolution)
        return cls(
            np.stack([c.mean for c in cells]),
            np.stack([c.cov for c in cells]),
            np.array([c.support for c in cells]),
            resolution,
        )

    @classmethod
    def empty(cls, resolution: float = 0.0) -> "NdtMap":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0, np.int64), resolution)

    def take(self, idx) -> "NdtMap":
        idx = np.asarray(idx, dtype=np.int64)
        return NdtMap(self.means[idx], self.covs[idx], self.supports[idx], self.resolution)

    def features(self) -> np.ndarray:
        """(k, 9) array: mean followed by the upper-triangular covariance."""
        return np.concatenate([self.means, self.covs[:, TRIU_ROWS, TRIU_COLS]], axis=1)

    def equals(self, other: "NdtMap") -> bool:
        return (
            np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
            and np.array_equal(self.supports, other.supports)
            and self.resolution == other.resolution
        )


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise NdtError("point coordinates must be finite")
    return pts


def regularize_cov(cov, eps: float = EPSILON_REG) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix (or stack) to at least ``eps``."""
    cov = np.asarray(cov, dtype=np.float64)
    asym = np.abs(cov - np.swapaxes(cov, -1, -2))
    scale = np.maximum(1.0, np.abs(cov).max(axis=(-1, -2), keepdims=True))
    if np.any(asym > SYMMETRY_TOL * scale):
        raise NdtError("covariance is not symmetric")
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(sym)
    w = np.maximum(w, eps)
    out = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def estimate_cell(points, regularize: bool = True, eps: float = EPSILON_REG) -> NdtCell:
    """Sample mean and unbiased (1/(n-1)) covariance of a point group."""
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        raise NdtError("empty cell")
    mean = pts.mean(axis=0)
    if n >= 2:
        dev = pts - mean
        cov = dev.T @ dev / (n - 1)
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((3, 3))
    if regularize:
        cov = regularize_cov(cov, eps)
    return NdtCell(mean, cov, n)


def group_statistics(points: np.ndarray, order: np.ndarray, starts: np.ndarray):
    """Means and 1/(n-1) covariances of contiguous groups.

    ``order`` lists point indices grouped together; group ``g`` occupies
    ``order[starts[g]:starts[g+1]]`` (with the end implied for the last one).
    Singleton groups get a zero covariance.
    """
    pts = points[order]
    counts = np.diff(np.append(starts, len(order)))
    means = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    dev = pts - np.repeat(means, counts, axis=0)
    outer = dev[:, :, None] * dev[:, None, :]
    scatter = np.add.reduceat(outer.reshape(-1, 9), starts, axis=0).reshape(-1, 3, 3)
    denom = np.maximum(counts - 1, 1).astype(np.float64)
    covs = scatter / denom[:, None, None]
    covs[counts < 2] = 0.0
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return means, covs, counts


def voxel_partition(cloud, resolution: float, min_support: int = MIN_SUPPORT) -> NdtMap:
    """Bin points on a regular grid and fit one regularized cell per voxel."""
    if resolution <= 0:
        raise NdtError(f"resolution must be positive, got {resolution}")
    pts = as_points(cloud)
    if len(pts) == 0:
        return NdtMap.empty(resolution)
    keys = np.floor(pts / resolution).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    means, covs, counts = group_statistics(pts, order, starts)
    keep = counts >= min_support
    if not np.any(keep):
        return NdtMap.empty(resolution)
    return NdtMap(means[keep], regularize_cov(covs[keep]), counts[keep], resolution)


def transform_cell(cell: NdtCell, T) -> NdtCell:
    """Push a cell through a linear map: mean -> T mean, cov -> T cov T^T."""
    T = np.asarray(T, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(T)):
        raise NdtError("transform must be finite")
    cov = T @ cell.cov @ T.T
    return NdtCell(T @ cell.mean, 0.5 * (cov + cov.T), cell.support)


def transform_map(ndt: NdtMap, T) -> NdtMap:
    T = np.asarray(T, dtype=np.float64).reshape(3, 3)
    covs = T @ ndt.covs @ T.T
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return NdtMap(ndt.means @ T.T, covs, ndt.supports, ndt.resolution)


def _check_pd(covs: np.ndarray) -> None:
    try:
        np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        raise NdtError("singular covariance; regularize first") from None


def sym_kl_arrays(mu_a, cov_a, mu_b, cov_b, check: bool = True) -> np.ndarray:
    """Vectorized symmetric KL between Gaussians (broadcasts over leading axes).

    0.5 * (KL(a||b) + KL(b||a)); the log-determinant terms cancel, leaving
    0.25 * [tr(Sb^-1 Sa) + tr(Sa^-1 Sb) + d^T (Sa^-1 + Sb^-1) d - 6].
    """
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.asarray(cov_a, np.float64), np.asarray(cov_b, np.float64)
    if check:
        _check_pd(cov_a)
        _check_pd(cov_b)
    inv_a = np.linalg.inv(cov_a)
    inv_b = np.linalg.inv(cov_b)
    d = mu_a - mu_b
    tr = np.einsum("...ij,...ji->...", inv_b, cov_a) + np.einsum("...ij,...ji->...", inv_a, cov_b)
    maha = np.einsum("...i,...ij,...j->...", d, inv_a + inv_b, d)
    return np.maximum(0.25 * (tr + maha - 6.0), 0.0)


def sym_kl(a: NdtCell, b: NdtCell) -> float:
    """Symmetric KL divergence of two regularized cells."""
    return float(sym_kl_arrays(a.mean, a.cov, b.mean, b.cov))
