"""Image-level clustering of masked mean features.

k-means uses k-means++ seeding and Lloyd iterations run to an assignment
fixed point (or max_iter). Everything is a pure function of
(points, k, seed); distance reductions keep a fixed order so results are
bit-stable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassSpace


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray             # (k, D)
    assignments: dict[str, int]       # image_id -> cluster index
    inertia: float


def masked_mean_feature(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean feature vector over mask==1 pixels (float64)."""
    if mask.shape != features.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != feature grid {features.shape[:2]}")
    sel = mask == 1
    if not np.any(sel):
        raise ValueError("empty mask")
    return features[sel].astype(np.float64).mean(axis=0)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))  # all remaining points coincide with a centroid
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _repair_empty(points, centroids, assign, d2_assigned, empties):
    """Move each empty centroid onto the farthest point from its centroid."""
    d2 = d2_assigned.copy()
    for j in empties:
        idx = int(np.argmax(d2))
        centroids[j] = points[idx]
        d2[idx] = -1.0  # one point per repaired cluster


def _lloyd(pts: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    n = pts.shape[0]
    centroids = _plusplus_init(pts, k, rng)
    assign = None
    inertia = np.inf
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)  # ties -> lowest cluster index
        d2_assigned = d2[np.arange(n), new_assign]
        new_inertia = float(d2_assigned.sum())
        assert new_inertia <= inertia * (1.0 + 1e-12) + 1e-12, "Lloyd iteration increased inertia"
        inertia = new_inertia
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        empties = []
        for j in range(k):
            members = pts[assign == j]
            if members.shape[0] == 0:
                empties.append(j)
            else:
                centroids[j] = members.mean(axis=0)
        if empties:
            _repair_empty(pts, centroids, assign, d2_assigned, empties)
    return centroids, assign, inertia


def kmeans(points, k: int, seed: int, max_iter: int = 300,
           ids: list[str] | None = None, n_init: int = 10) -> ClusterModel:
    """Deterministic k-means; best of ``n_init`` restarts by inertia.

    Empty clusters are re-seeded to far points within each run.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a (n, D) array or list of D-vectors")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if ids is not None and len(ids) != n:
        raise ValueError("ids length does not match points")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for run in range(n_init):
        rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
        result = _lloyd(pts, k, rng, max_iter)
        if best is None or result[2] < best[2]:  # strict: ties keep first run
            best = result
    centroids, assign, inertia = best
    keys = ids if ids is not None else [str(i) for i in range(n)]
    return ClusterModel(k=k, centroids=centroids,
                        assignments={key: int(c) for key, c in zip(keys, assign)},
                        inertia=inertia)


def assign_cluster_classes(model: ClusterModel, cs: ClassSpace, mode: str) -> dict[str, int]:
    """Map cluster indices onto novel class ids: cluster j -> n_base + j.

    ``exact`` requires k == n_novel; ``over`` requires k to fill the
    novel head (provisional channels resolved many-to-one only at
    evaluation time).
    """
    if mode == "exact":
        if model.k != cs.n_novel:
            raise ValueError(f"exact mode needs k == n_novel ({model.k} != {cs.n_novel})")
    elif mode == "over":
        if model.k != cs.novel_head_size:
            raise ValueError(f"over mode needs k == novel_head_size ({model.k} != {cs.novel_head_size})")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return {image_id: cs.n_base + c for image_id, c in model.assignments.items()}
