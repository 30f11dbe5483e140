"""Maximum-likelihood Local Intrinsic Dimensionality estimation.

Per-point estimates use the m nearest Euclidean neighbors; the module-level
quantity tracked during reconstruction training is the *sum* of per-point
estimates over all task samples (the mean is reported alongside). Neighbor
search is brute force: episodes hold at most a few hundred points, and
determinism matters more than speed here. Distances are computed from
explicit coordinate differences, never the gram-matrix identity, so exact
duplicates yield exactly zero and near-duplicates keep full precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

EPS_DIST = 1e-12

DROP_DUPLICATES = "drop-duplicates"
CLAMP_EPSILON = "clamp-epsilon"
_POLICIES = (DROP_DUPLICATES, CLAMP_EPSILON)

# Entry budget for materializing the (n, n, dim) difference tensor at once;
# larger clouds fall back to row blocks.
_BLOCK_BUDGET = 2**25


class LidError(Exception):
    """Base class for LID estimation failures."""


class TooFewPointsError(LidError):
    """Fewer than m+1 distinct points available for neighbor search."""


class DivergentEstimateError(LidError):
    """All neighbor distances equal; the MLE estimate diverges."""


class ZeroDistanceWarning(UserWarning):
    """Zero neighbor distances were clamped or divergent points skipped."""


@dataclass(frozen=True)
class LidConfig:
    """Neighbor count and degenerate-distance policy for LID estimation."""

    m: int = 20
    zero_distance_policy: str = DROP_DUPLICATES

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("neighbor count m must be >= 2")
        if self.zero_distance_policy not in _POLICIES:
            raise ValueError(f"unknown zero_distance_policy {self.zero_distance_policy!r}")


@dataclass(frozen=True)
class NeighborDistances:
    """Ascending distances to the m nearest neighbors of one point."""

    distances: np.ndarray
    m: int

    def __post_init__(self):
        d = np.array(self.distances, dtype=np.float64)
        d.setflags(write=False)
        if d.shape != (self.m,):
            raise ValueError("distances length must equal m")
        if (np.diff(d) < 0).any():
            raise ValueError("distances must be sorted ascending")
        if (d <= 0).any():
            raise ValueError("distances must be positive")
        object.__setattr__(self, "distances", d)


@dataclass(frozen=True)
class LidSummary:
    """Aggregate of per-point LID estimates over one point cloud."""

    lid_sum: float
    lid_mean: float
    point_count: int
    skipped: int


def _as_points(points) -> np.ndarray:
    m = np.asarray(getattr(points, "vectors", points), dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("points must be a (n, dim) array or EmbeddingSet")
    return m


def _pairwise_distances(pts: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance matrix with +inf on the diagonal."""
    n, d = pts.shape
    if n * n * d <= _BLOCK_BUDGET:
        diff = pts[:, None, :] - pts[None, :, :]
        dmat = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        dmat = np.empty((n, n), dtype=np.float64)
        block = max(1, _BLOCK_BUDGET // (n * d))
        for start in range(0, n, block):
            stop = min(start + block, n)
            diff = pts[start:stop, None, :] - pts[None, :, :]
            dmat[start:stop] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dmat, np.inf)
    return dmat


def _neighbor_row(dists: np.ndarray, m: int, policy: str) -> np.ndarray:
    """Select the m smallest positive distances from one point's distance row."""
    if policy == DROP_DUPLICATES:
        dists = dists[dists > 0.0]
    elif (dists == 0.0).any():
        warnings.warn("clamping zero neighbor distances to EPS_DIST", ZeroDistanceWarning, stacklevel=3)
        dists = np.maximum(dists, EPS_DIST)
    if dists.size < m:
        raise TooFewPointsError(
            f"need m={m} neighbors but only {dists.size} remain after degenerate filtering"
        )
    sel = np.partition(dists, m - 1)[:m]
    sel.sort()
    return sel


def knn_distances(index: int, points, m: int, zero_distance_policy: str = DROP_DUPLICATES) -> NeighborDistances:
    """Distances from points[index] to its m nearest other points, ascending.

    Distance ties at the selection boundary are resolved toward lower point
    ids (the distance multiset is unaffected; this pins determinism).
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n < m + 1:
        raise TooFewPointsError(f"need at least m+1={m + 1} points, got {n}")
    diff = pts - pts[index]
    dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    dists = np.delete(dists, index)
    return NeighborDistances(_neighbor_row(dists, m, zero_distance_policy), m)


def lid_mle(nd: NeighborDistances) -> float:
    """MLE estimate -[mean_i ln(r_i / r_m)]^-1 from neighbor distances."""
    r = nd.distances
    mean_log = float(np.log(r / r[-1]).mean())
    if mean_log == 0.0:
        raise DivergentEstimateError("all neighbor distances equal; estimate diverges")
    return -1.0 / mean_log


def lid_summary(points, cfg: LidConfig = LidConfig()) -> LidSummary:
    """Per-point LID estimates over a point cloud, reduced in point-id order.

    Under the drop-duplicates policy exact duplicate rows are removed from
    the cloud before neighbor search. Points whose estimate diverges are
    skipped with a warning and counted in the summary.
    """
    pts = _as_points(points)
    if pts.shape[0] < cfg.m + 1:
        raise TooFewPointsError(f"need at least m+1={cfg.m + 1} points, got {pts.shape[0]}")
    dmat = _pairwise_distances(pts)
    if cfg.zero_distance_policy == DROP_DUPLICATES:
        if (dmat == 0.0).any():
            pts = np.unique(pts, axis=0)
            if pts.shape[0] < cfg.m + 1:
                raise TooFewPointsError(
                    f"only {pts.shape[0]} distinct points remain after duplicate filtering,"
                    f" need {cfg.m + 1}"
                )
            dmat = _pairwise_distances(pts)
    elif (dmat == 0.0).any():
        warnings.warn("clamping zero neighbor distances to EPS_DIST", ZeroDistanceWarning, stacklevel=2)
        np.maximum(dmat, EPS_DIST, out=dmat)

    n = pts.shape[0]
    nearest = np.partition(dmat, cfg.m - 1, axis=1)[:, : cfg.m]
    nearest.sort(axis=1)
    mean_log = np.log(nearest / nearest[:, -1:]).mean(axis=1)
    valid = mean_log != 0.0
    skipped = int(n - valid.sum())
    if skipped:
        warnings.warn(f"skipping {skipped} point(s) with divergent LID estimates", ZeroDistanceWarning, stacklevel=2)
    if skipped == n:
        raise DivergentEstimateError("every per-point LID estimate diverged")
    lids = -1.0 / mean_log[valid]
    total = float(lids.sum())
    return LidSummary(lid_sum=total, lid_mean=total / (n - skipped), point_count=n - skipped, skipped=skipped)


def module_lid(hidden_reps, cfg: LidConfig = LidConfig()) -> float:
    """Summed per-point LID of a module's hidden representations."""
    return lid_summary(hidden_reps, cfg).lid_sum
