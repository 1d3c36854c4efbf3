"""Data governance: dedup, sharpness filtering, clustering, split sampling.

All operations are pure functions of their inputs plus an explicit seed, so
per-image and per-cluster work can be farmed out to workers as long as
results are merged back in index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import SeededRng, as_feature_matrix, normalize_rows


class ImageTooSmall(ValueError):
    """Image is smaller than the 3x3 minimum needed for sharpness scoring."""


class EmptyInput(ValueError):
    """Operation received zero items."""


class KExceedsRows(ValueError):
    """Requested more clusters than there are points."""


class BudgetExceedsPopulation(ValueError):
    """Asked to sample more items than exist."""


def as_gray_image(img) -> np.ndarray:
    """Validate a 2-D grayscale image with finite values."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite pixels")
    return arr


def dedup(features, threshold: float) -> list[int]:
    """Greedy order-dependent near-duplicate removal.

    An item is kept iff its maximum cosine similarity to all previously
    kept items is <= threshold; first occurrence wins.  Every dropped item
    therefore has similarity > threshold to some kept item.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    unit = normalize_rows(features)
    kept: list[int] = []
    kept_rows = np.empty((0, unit.shape[1]), dtype=np.float64)
    for i in range(unit.shape[0]):
        if kept_rows.shape[0]:
            sims = kept_rows @ unit[i]
            if float(sims.max()) > threshold:
                continue
        kept.append(i)
        kept_rows = np.vstack([kept_rows, unit[i][None, :]])
    return kept


def laplacian_variance(img) -> float:
    """Sharpness score: population variance of the 4-neighbor Laplacian.

    The kernel [[0,1,0],[1,-4,1],[0,1,0]] is convolved over the valid
    interior only (no padding), which avoids border bias.
    """
    arr = as_gray_image(img)
    h, w = arr.shape
    if h < 3 or w < 3:
        raise ImageTooSmall(f"need at least 3x3 pixels, got {h}x{w}")
    response = (
        arr[:-2, 1:-1]
        + arr[2:, 1:-1]
        + arr[1:-1, :-2]
        + arr[1:-1, 2:]
        - 4.0 * arr[1:-1, 1:-1]
    )
    return float(np.var(response))


def sharpness_filter(images, keep_fraction: float) -> list[int]:
    """Keep the ceil(n * keep_fraction) sharpest images.

    Ties in variance break toward the lower original index.  Returns kept
    ids in ascending index order.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    images = list(images)
    if not images:
        raise EmptyInput("no images to filter")
    scores = [laplacian_variance(img) for img in images]
    n_keep = math.ceil(len(images) * keep_fraction)
    order = sorted(range(len(images)), key=lambda i: (-scores[i], i))
    return sorted(order[:n_keep])


@dataclass
class ClusterAssignment:
    """Result of k-means: labels, centroids, final inertia, and the inertia
    recorded after each assignment step (non-increasing)."""

    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    def cluster_members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _kmeanspp_init(x: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            # D^2 sampling via inverse CDF on a single uniform draw.
            u = float(rng.uniform()) * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(x, k: int, seed: int, max_iters: int = 100, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Iterates until the maximum centroid shift drops below ``tol`` or
    ``max_iters`` is reached.  Empty clusters are re-seeded on the point
    currently farthest from its centroid, which preserves the
    non-increasing inertia guarantee.
    """
    arr = as_feature_matrix(x)
    n = arr.shape[0]
    if n == 0:
        raise EmptyInput("kmeans needs at least one row")
    if not 1 <= k <= n:
        raise KExceedsRows(f"k={k} must satisfy 1 <= k <= rows={n}")
    rng = SeededRng(seed)
    centroids = _kmeanspp_init(arr, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = np.sum((arr[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        # Re-seed empty clusters on the farthest outstanding points.
        assigned_d2 = dists[np.arange(n), labels]
        for c in range(k):
            if not np.any(labels == c):
                far = int(np.argmax(assigned_d2))
                centroids[c] = arr[far]
                labels[far] = c
                assigned_d2[far] = 0.0
        history.append(float(assigned_d2.sum()))
        new_centroids = np.empty_like(centroids)
        for c in range(k):
            new_centroids[c] = arr[labels == c].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    dists = np.sum((arr[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(n), labels].sum())
    history.append(inertia)
    return ClusterAssignment(k=k, labels=labels, centroids=centroids, inertia=inertia,
                             inertia_history=history)


def _quotas_largest_remainder(sizes: np.ndarray, n: int) -> np.ndarray:
    total = int(sizes.sum())
    base = (n * sizes) // total
    remainders = (n * sizes) % total
    quotas = base.astype(np.int64)
    short = n - int(quotas.sum())
    if short > 0:
        # Largest remainder first; ties go to the lower cluster index.
        order = sorted(range(len(sizes)), key=lambda c: (-int(remainders[c]), c))
        for c in order[:short]:
            quotas[c] += 1
    return quotas


def proportional_sample(assignment: ClusterAssignment, n: int, seed: int) -> list[int]:
    """Sample n items with per-cluster quotas proportional to cluster size.

    Quotas come from largest-remainder rounding of n * size_c / total and
    always sum to exactly n; within each cluster items are drawn uniformly
    without replacement.
    """
    sizes = assignment.cluster_sizes()
    total = int(sizes.sum())
    if n > total:
        raise BudgetExceedsPopulation(f"n={n} exceeds population {total}")
    if n == 0:
        return []
    quotas = _quotas_largest_remainder(sizes, n)
    rng = SeededRng(seed)
    out: list[int] = []
    for c in range(assignment.k):
        if quotas[c] == 0:
            continue
        members = assignment.cluster_members(c).tolist()
        out.extend(int(i) for i in rng.choice_without_replacement(members, int(quotas[c])))
    return out


def rare_first_sample(assignment: ClusterAssignment, n: int, seed: int) -> list[int]:
    """Sample n items, draining the smallest clusters completely first.

    Clusters are visited in ascending remaining size (ties by lower cluster
    index) and one uniform item is drawn per visit, so a cluster stays the
    smallest until exhausted.  Small clusters are therefore fully covered
    before larger ones contribute, which is the point: rare content first.
    """
    sizes = assignment.cluster_sizes()
    total = int(sizes.sum())
    if n > total:
        raise BudgetExceedsPopulation(f"n={n} exceeds population {total}")
    rng = SeededRng(seed)
    remaining = {c: assignment.cluster_members(c).tolist() for c in range(assignment.k)}
    out: list[int] = []
    while len(out) < n:
        c = min((c for c in remaining if remaining[c]), key=lambda c: (len(remaining[c]), c))
        pool = remaining[c]
        j = int(rng.integers(len(pool)))
        out.append(int(pool.pop(j)))
    return out
