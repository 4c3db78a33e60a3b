"""Multi-restart K-means with k-means++ seeding for pseudo-labeling.

Each restart runs Lloyd iterations to exact convergence (no assignment
changes) with its own derived seed; the result with minimum inertia wins,
ties going to the lower restart index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError, InsufficientPointsError
from .numeric import make_rng

DEFAULT_RESTARTS = 20
DEFAULT_MAX_ITERS = 100


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d)
    assignments: np.ndarray  # (n,) int
    inertia: float
    iterations_run: int
    restart_index: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_to_centroids(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid ids; argmin breaks ties toward the lower id."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if points.shape[1] != centroids.shape[1]:
        raise DimensionError(
            f"point dim {points.shape[1]} vs centroid dim {centroids.shape[1]}"
        )
    return np.argmin(_sq_dists(points, centroids), axis=1)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for i in range(1, k):
        closest = np.minimum(closest, ((points - centroids[i - 1]) ** 2).sum(axis=1))
        total = closest.sum()
        if total == 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=closest / total)]
    return centroids


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int, inertia_trace: list | None = None):
    centroids = _plusplus_init(points, k, rng)
    assignments = None
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assignments = np.argmin(d2, axis=1)
        if inertia_trace is not None:
            inertia_trace.append(float(d2[np.arange(len(points)), new_assignments].sum()))
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            mask = assignments == j
            if mask.any():
                centroids[j] = points[mask].mean(axis=0)
        # repair empties with the point farthest from its own centroid
        empties = [j for j in range(k) if not (assignments == j).any()]
        if empties:
            dist_to_own = np.linalg.norm(points - centroids[assignments], axis=1)
            order = np.argsort(-dist_to_own)
            for rank, j in enumerate(empties):
                idx = order[rank]
                centroids[j] = points[idx]
                assignments[idx] = j
    d2 = _sq_dists(points, centroids)
    assignments = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), assignments].sum())
    return centroids, assignments, inertia, iterations


def kmeans(points: np.ndarray, k: int, restarts: int = DEFAULT_RESTARTS,
           max_iters: int = DEFAULT_MAX_ITERS, seed: int = 0) -> KMeansResult:
    """Best-of-``restarts`` K-means fit; restart r uses seed + r."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or n < k:
        raise InsufficientPointsError(f"need n >= k >= 1, got n={n}, k={k}")
    best = None
    for r in range(restarts):
        centroids, assignments, inertia, iters = _lloyd(
            points, k, make_rng(seed + r), max_iters
        )
        if best is None or inertia < best.inertia:
            best = KMeansResult(
                centroids=centroids,
                assignments=assignments,
                inertia=inertia,
                iterations_run=iters,
                restart_index=r,
            )
    return best


def should_refine(epoch: int, period: int = 10) -> bool:
    """True on epochs that are whole multiples of the refinement period."""
    if period <= 0:
        raise ConfigError(f"refinement period must be positive, got {period}")
    return epoch % period == 0
