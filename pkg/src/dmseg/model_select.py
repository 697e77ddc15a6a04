"""Kernel-scale selection and cluster-count estimation.

The kernel scale defaults to 0.15 times the range of the pairwise distance
matrix; a diagnostic scan of the total kernel mass L(sigma) over a sigma
grid locates the log-log linear region and reports whether the default
falls inside it.  The cluster count comes from the elbow of the descending
eigenvalue plot: the index whose drop is largest relative to the following
drop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoElbowError, ParameterError, ScanTooCoarseError

SLOPE_WINDOW = 0.25       # linear-region slopes lie within 25% of the max slope
ELBOW_EPS = 1e-6          # floor for the next-drop denominator
FLAT_SPECTRUM_TOL = 1e-9


@dataclass(frozen=True)
class SigmaScan:
    """L(sigma) table with the detected log-log linear region."""

    sigma_grid: np.ndarray
    L_values: np.ndarray
    chosen_sigma: float
    linear_region: tuple
    default_sigma: float
    default_in_region: bool


@dataclass(frozen=True)
class ClusterCountEstimate:
    """Elbow decision over a descending eigenvalue list.

    ``magnified`` stores lambda / (lambda - 1), the slope-magnifying
    transform used for plots only; it plays no part in the decision.
    """

    eigenvalues: np.ndarray
    magnified: np.ndarray
    elbow_index: int
    k: int
    confidence: float


def default_sigma(distance_min: float, distance_max: float) -> float:
    """0.15 times the range of a pairwise distance matrix."""
    if distance_max <= distance_min:
        raise ParameterError(
            f"degenerate distance range [{distance_min}, {distance_max}]")
    return 0.15 * (distance_max - distance_min)


def pairwise_range(points: np.ndarray, chunk: int = 1024):
    """(min, max) Euclidean distance over distinct pairs.

    Exact without materializing the distance matrix: one dimension uses
    sorted gaps, otherwise the minimum comes from nearest-neighbor queries
    and the maximum from the convex hull (blocked scan as a fallback for
    degenerate hulls).
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 2:
        raise ParameterError("need at least 2 points")
    if X.shape[1] == 1:
        v = np.sort(X[:, 0])
        gaps = np.diff(v)
        return float(gaps.min()), float(v[-1] - v[0])

    tree = cKDTree(X)
    dmin = float(tree.query(X, k=2)[0][:, 1].min())
    try:
        from scipy.spatial import ConvexHull

        hull = X[ConvexHull(X).vertices]
        d2 = ((hull[:, None, :] - hull[None, :, :]) ** 2).sum(-1)
        return dmin, float(np.sqrt(d2.max()))
    except Exception:
        dmax2 = 0.0
        for a in range(0, n, chunk):
            xa = X[a:a + chunk]
            for b in range(a, n, chunk):
                d2 = ((xa[:, None, :] - X[b:b + chunk][None, :, :]) ** 2).sum(-1)
                dmax2 = max(dmax2, float(d2.max()))
        return dmin, float(np.sqrt(dmax2))


def scan_sigma(nodes, sigma_grid, radius_r: float) -> SigmaScan:
    """Evaluate L(sigma) = sum of feature-kernel weights within the radius.

    Self-pairs contribute 1 each, so L runs from n (sigma -> 0, distinct
    features) to the number of within-radius ordered pairs (sigma -> inf).
    The linear region is the longest contiguous run of log-log slopes
    within 25% of the maximum slope; fewer than 3 grid points there raises
    a scan-too-coarse error.
    """
    grid = np.asarray(sigma_grid, dtype=float)
    if grid.size < 8:
        raise ParameterError("sigma grid must have at least 8 points")
    if (np.diff(grid) <= 0).any() or (grid <= 0).any():
        raise ParameterError("sigma grid must be positive and ascending")

    cents = np.asarray(nodes.centroids, dtype=float)
    feats = np.asarray(nodes.features, dtype=float)
    n = cents.shape[0]
    tree = cKDTree(cents)
    pairs = tree.query_pairs(radius_r, output_type="ndarray")
    if pairs.size:
        dgeo2 = ((cents[pairs[:, 0]] - cents[pairs[:, 1]]) ** 2).sum(1)
        pairs = pairs[dgeo2 < radius_r**2]
    df2 = ((feats[pairs[:, 0]] - feats[pairs[:, 1]]) ** 2).sum(1) if pairs.size else np.zeros(0)

    L = np.array([n + 2.0 * np.exp(-df2 / (2.0 * s * s)).sum() for s in grid])

    slopes = np.diff(np.log(L)) / np.diff(np.log(grid))
    smax = slopes.max()
    ok = slopes >= (1.0 - SLOPE_WINDOW) * smax
    best_run, run_start, cur = None, 0, 0
    for i, flag in enumerate(ok):
        if flag:
            if cur == 0:
                run_start = i
            cur += 1
            if best_run is None or cur > best_run[1]:
                best_run = (run_start, cur)
        else:
            cur = 0
    lo, length = best_run
    hi = lo + length  # slopes lo..lo+length-1 cover grid points lo..hi
    if hi - lo + 1 < 3:
        raise ScanTooCoarseError(
            f"linear region spans only {hi - lo + 1} grid points; refine the grid")

    fmin, fmax = pairwise_range(feats)
    ds = default_sigma(fmin, fmax) if fmax > fmin else np.nan
    chosen = float(np.exp(0.5 * (np.log(grid[lo]) + np.log(grid[hi]))))
    in_region = bool(np.isfinite(ds) and grid[lo] <= ds <= grid[hi])
    return SigmaScan(sigma_grid=grid, L_values=L, chosen_sigma=chosen,
                     linear_region=(int(lo), int(hi)), default_sigma=float(ds),
                     default_in_region=in_region)


def estimate_k(eigenvalues) -> ClusterCountEstimate:
    """Pick the cluster count from the elbow of the eigenvalue plot.

    With descending eigenvalues (trivial one included), the drops
    d_i = lambda_i - lambda_{i+1} are formed for i >= 1 and the elbow is
    the i maximizing d_i / max(d_{i+1}, eps), ties toward smaller i.  The
    cluster count is i + 1.  A flat spectrum (all drops below 1e-9) has no
    elbow.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size < 4:
        raise ParameterError("need at least 4 eigenvalues")
    drops = lam[:-1] - lam[1:]          # drops[i] = lambda_i - lambda_{i+1}
    if np.all(drops[1:] < FLAT_SPECTRUM_TOL):
        raise NoElbowError("spectrum is flat; no elbow")
    ratios = drops[1:-1] / np.maximum(drops[2:], ELBOW_EPS)  # i = 1 .. m-3
    if ratios.size == 0:
        raise NoElbowError("too few eigenvalues to form a drop ratio")
    i_star = int(np.argmax(ratios)) + 1
    with np.errstate(divide="ignore", invalid="ignore"):
        magnified = lam / (lam - 1.0)
    return ClusterCountEstimate(eigenvalues=lam, magnified=magnified,
                                elbow_index=i_star, k=i_star + 1,
                                confidence=float(ratios[i_star - 1]))
