"""Seeded Lloyd's k-means used to initialise codebooks."""
from __future__ import annotations

import numpy as np


def pairwise_sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per point; ties go to the lowest index."""
    return np.argmin(pairwise_sq_dist(points, centroids), axis=1)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = pairwise_sq_dist(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, pairwise_sq_dist(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50,
           tol: float = 1e-6, jitter: float = 1e-3) -> np.ndarray:
    """Return ``k`` centroids for ``points`` (n, d).

    With at most ``k`` distinct points the distinct points themselves are the
    centroids (bit-exact), padded with small Gaussian perturbations of them.
    Otherwise Lloyd's iterations from a k-means++ start run for ``max_iter``
    rounds or until the relative centroid movement drops below ``tol``.
    Empty clusters are re-seeded to the point farthest from its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty (n, d) array")
    distinct = np.unique(points, axis=0)
    if len(distinct) <= k:
        extra = k - len(distinct)
        spread = float(points.std())
        sigma = jitter * (spread if spread > 0 else 1.0)
        base = distinct[rng.integers(len(distinct), size=extra)]
        pad = base + sigma * rng.normal(size=base.shape)
        return np.concatenate([distinct, pad], axis=0)

    centroids = _kmeans_pp(points, k, rng)
    for _ in range(max_iter):
        d2 = pairwise_sq_dist(points, centroids)
        labels = np.argmin(d2, axis=1)
        nearest = d2[np.arange(len(points)), labels]
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=k)
        taken: set[int] = set()
        order = np.argsort(-nearest, kind="stable")
        for c in range(k):
            if counts[c]:
                new[c] = points[labels == c].mean(axis=0)
            else:
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                new[c] = points[idx]
        shift = np.linalg.norm(new - centroids) / max(np.linalg.norm(centroids), 1e-12)
        centroids = new
        if shift < tol:
            break
    return centroids
