"""Geometric inter-class confusion: coverage circles, the pairwise overlap
matrix, its [0,2] normalization, and distribution statistics.

Every class is projected into one shared 2D plane (global two-component
PCA over all features passed in), so centroids and radii from different
classes are commensurable and the center distance d_ij is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingTable
from .exceptions import EmptyInputError, InsufficientClassesError
from .numeric import euclidean_distance, percentile, top_principal_components

# Overlap ratio diverges as centroids coincide; a finite cap keeps the
# normalization well defined while still marking the pair as maximally
# confused.
DEGENERATE_DISTANCE = 1e-9
CONFUSION_CAP = 100.0


@dataclass
class ClassGeometry:
    """Per-class centroid and coverage-circle radius in the shared plane."""

    class_id: int
    centroid2d: np.ndarray
    radius: float
    member_count: int


@dataclass
class ConfusionMatrix:
    class_ids: np.ndarray  # (C,) sorted label values
    raw: np.ndarray  # (C, C) symmetric, zero diagonal
    normalized: np.ndarray | None = None  # (C, C) in [0, 2], zero diagonal


@dataclass
class ConfusionStats:
    mean: float
    variance: float  # population convention (divide by count)
    histogram: list  # (bin_lower, bin_upper, count) triples


def class_centroid(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise EmptyInputError("centroid of an empty class")
    return features.mean(axis=0)


def fit_coverage_circle(features2d: np.ndarray, coverage: float = 0.95,
                        class_id: int = 0) -> ClassGeometry:
    """Centroid plus the nearest-rank coverage-percentile of member
    distances, so at least ceil(coverage * n) members fall inside."""
    features2d = np.asarray(features2d, dtype=np.float64)
    center = class_centroid(features2d)
    dists = np.linalg.norm(features2d - center, axis=1)
    return ClassGeometry(
        class_id=class_id,
        centroid2d=center,
        radius=percentile(dists, coverage),
        member_count=features2d.shape[0],
    )


def confusion_degree(g_i: ClassGeometry, g_j: ClassGeometry) -> float:
    """Overlap of the two coverage circles relative to center distance:
    max(0, r_i + r_j - d) / d, capped when the centers coincide."""
    d = euclidean_distance(g_i.centroid2d, g_j.centroid2d)
    if d < DEGENERATE_DISTANCE:
        return CONFUSION_CAP
    return max(0.0, g_i.radius + g_j.radius - d) / d


def shared_plane_projection(features: np.ndarray) -> np.ndarray:
    """Project all features into the global two-component PCA plane."""
    components, _, mean = top_principal_components(features, 2)
    return (np.asarray(features, dtype=np.float64) - mean) @ components


def fit_class_geometries(table: EmbeddingTable, coverage: float = 0.95):
    """Shared-plane projection plus one coverage circle per labeled class.

    Rows with negative labels are ignored. Returns geometries ordered by
    ascending label value.
    """
    mask = table.labels >= 0
    labels = table.labels[mask]
    class_ids = np.unique(labels)
    if class_ids.size < 2:
        raise InsufficientClassesError(
            f"need at least 2 labeled classes, got {class_ids.size}"
        )
    projected = shared_plane_projection(table.features[mask])
    return [
        fit_coverage_circle(projected[labels == c], coverage, class_id=int(c))
        for c in class_ids
    ]


def build_confusion_matrix(table: EmbeddingTable, coverage: float = 0.95) -> ConfusionMatrix:
    geoms = fit_class_geometries(table, coverage)
    c = len(geoms)
    raw = np.zeros((c, c))
    for i in range(c):
        for j in range(i + 1, c):
            raw[i, j] = raw[j, i] = confusion_degree(geoms[i], geoms[j])
    return ConfusionMatrix(
        class_ids=np.array([g.class_id for g in geoms], dtype=np.int64), raw=raw
    )


def normalize_confusion(raw: np.ndarray) -> np.ndarray:
    """Min-max scale the off-diagonal entries to [0, 2]; the diagonal is
    left at zero. A zero-contrast matrix (max == min) maps to all ones,
    the midpoint of the range."""
    raw = np.asarray(raw, dtype=np.float64)
    c = raw.shape[0]
    off = ~np.eye(c, dtype=bool)
    lo, hi = raw[off].min(), raw[off].max()
    out = np.zeros_like(raw)
    if hi == lo:
        out[off] = 1.0
    else:
        out[off] = (raw[off] - lo) / (hi - lo) * 2.0
    return out


def upper_triangle_values(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    iu = np.triu_indices(raw.shape[0], k=1)
    return raw[iu]


def confusion_stats(matrix: ConfusionMatrix, bins: int = 40) -> ConfusionStats:
    values = upper_triangle_values(matrix.raw)
    hi = float(values.max()) if values.max() > 0 else 1.0
    counts, edges = np.histogram(values, bins=bins, range=(0.0, hi))
    return ConfusionStats(
        mean=float(values.mean()),
        variance=float(values.var()),
        histogram=[
            (float(edges[k]), float(edges[k + 1]), int(counts[k]))
            for k in range(bins)
        ],
    )


def argmax_pair(matrix: np.ndarray):
    """Upper-triangle argmax with ties broken by (i, j) scan order."""
    matrix = np.asarray(matrix)
    c = matrix.shape[0]
    best, best_val = (0, 1), -np.inf
    for i in range(c):
        for j in range(i + 1, c):
            if matrix[i, j] > best_val:
                best, best_val = (i, j), matrix[i, j]
    return best
