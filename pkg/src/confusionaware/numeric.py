"""Dense linear algebra helpers: covariance, Jacobi PCA, percentiles, RNG.

All public functions operate on plain float64 numpy arrays and are pure.
Randomness everywhere in the package goes through :func:`make_rng`, which
wraps numpy's PCG64 generator so that one 64-bit seed reproduces the same
stream on every platform.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import DimensionError, EmptyInputError, InsufficientDataError


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single source of randomness."""
    return np.random.Generator(np.random.PCG64(seed))


def covariance(points: np.ndarray) -> np.ndarray:
    """Sample covariance (divisor n-1) of an n x d point matrix."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError("expected an n x d matrix")
    n = points.shape[0]
    if n < 2:
        raise InsufficientDataError(f"covariance needs at least 2 points, got {n}")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    # force exact symmetry against accumulation order differences
    return (cov + cov.T) / 2.0


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue,
    eigenvectors as columns. Each column's sign is fixed so its
    largest-magnitude entry is positive. Convergence: off-diagonal
    Frobenius norm below ``tol``.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("expected a square matrix")
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, (a * a).sum() - (np.diag(a) ** 2).sum()))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                if apq == 0.0:
                    continue
                diff = float(a[q, q] - a[p, p])
                if abs(apq) < 1e-300 * abs(diff):
                    continue  # rotation angle underflows
                theta = diff / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)  # avoids theta**2 overflow
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues)
    eigenvalues = eigenvalues[order]
    v = v[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(v[:, j])))
        if v[i, j] < 0:
            v[:, j] = -v[:, j]
    return eigenvalues, v


def top_principal_components(points: np.ndarray, k: int):
    """Top-k PCA of an n x d point matrix.

    Returns (components d x k, eigenvalues of all d directions sorted
    descending, mean vector). Columns are unit-norm and mutually
    orthogonal; signs follow the jacobi_eigh convention.
    """
    points = np.asarray(points, dtype=np.float64)
    d = points.shape[1]
    if not 1 <= k <= d:
        raise DimensionError(f"k={k} out of range for d={d}")
    cov = covariance(points)
    eigenvalues, vectors = jacobi_eigh(cov)
    return vectors[:, :k].copy(), eigenvalues, points.mean(axis=0)


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: sort ascending, take index ceil(p*n)-1.

    The index is clamped to [0, n-1], so p=0 returns the minimum and p=1
    the maximum.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if n == 0:
        raise EmptyInputError("percentile of an empty list")
    idx = min(max(math.ceil(p * n) - 1, 0), n - 1)
    return float(np.sort(values)[idx])


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
