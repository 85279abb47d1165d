"""Class-wise splitting of one labelled dataset into K sub-domains.

Four strategies are provided: random, geometric (distance to a per-class
anchor), entropy of a pretrained model's predictions, and k-means on
pretrained features. Splitting always happens within each class so that every
sub-domain contains every category.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, DomainError, SplitError
from .geometry import chamfer_distance, icp_score
from .net import ModelParams, forward

logger = logging.getLogger(__name__)

METHODS = ("random", "geometric", "entropy", "feature")
METRICS = ("icp", "cd")


@dataclass(frozen=True)
class SplitResult:
    assignment: np.ndarray
    method: str
    K: int
    counts: np.ndarray  # (K, C) samples per sub-domain and class
    metric: Optional[str] = None
    anchors: Dict[int, int] = field(default_factory=dict)
    scores: Optional[np.ndarray] = None

    @property
    def imbalance(self) -> int:
        """Largest difference in sub-domain sizes."""
        sizes = self.counts.sum(axis=1)
        return int(sizes.max() - sizes.min())


def _finish(manifest: DatasetManifest, assignment: np.ndarray, method: str, K: int, **extra) -> SplitResult:
    counts = np.zeros((K, manifest.num_classes), dtype=np.int64)
    np.add.at(counts, (assignment, manifest.labels), 1)
    result = SplitResult(assignment, method, K, counts, **extra)
    sizes = counts.sum(axis=1)
    if K > 1 and sizes.max() - sizes.min() > manifest.num_classes:
        logger.info("%s split is imbalanced: sub-domain sizes %s", method, sizes.tolist())
    return result


def _class_members(manifest: DatasetManifest, K: int):
    if K < 1:
        raise ConfigError("K must be at least 1")
    for c in range(manifest.num_classes):
        idx = np.flatnonzero(manifest.labels == c)
        if len(idx) < K:
            raise SplitError(f"class {manifest.class_names[c]!r} has {len(idx)} samples, fewer than K={K}")
        yield c, idx


def _rank_cut(idx: np.ndarray, scores: np.ndarray, K: int) -> list:
    """Sort by score (ties: ascending sample index) and cut into K equal-size groups."""
    order = np.lexsort((idx, scores))
    return np.array_split(idx[order], K)


def split_random(manifest: DatasetManifest, K: int = 2, seed=0) -> SplitResult:
    rng = np.random.default_rng(seed)
    assignment = np.zeros(len(manifest), dtype=np.int64)
    for _, idx in _class_members(manifest, K):
        for k, chunk in enumerate(np.array_split(rng.permutation(idx), K)):
            assignment[chunk] = k
    return _finish(manifest, assignment, "random", K)


def _geometric_score(sample, anchor, metric: str) -> float:
    if metric == "cd":
        return chamfer_distance(sample, anchor)
    result = icp_score(sample, anchor)
    if result.degenerate:
        logger.warning("ICP degenerate; scoring sample by Chamfer distance instead")
        return chamfer_distance(sample, anchor)
    return result.residual


def split_geometric(manifest: DatasetManifest, K: int = 2, metric: str = "icp", seed=0) -> SplitResult:
    """Rank each class by its distance to a randomly chosen anchor sample."""
    if metric not in METRICS:
        raise ConfigError(f"unknown geometric metric {metric!r}")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(len(manifest), dtype=np.int64)
    scores = np.zeros(len(manifest))
    anchors = {}
    for c, idx in _class_members(manifest, K):
        anchor = int(rng.choice(idx))
        anchors[c] = anchor
        for i in idx:
            scores[i] = _geometric_score(manifest.clouds[i], manifest.clouds[anchor], metric)
        for k, chunk in enumerate(_rank_cut(idx, scores[idx], K)):
            assignment[chunk] = k
    return _finish(manifest, assignment, "geometric", K, metric=metric, anchors=anchors, scores=scores)


def prediction_entropy(probs) -> float:
    """Natural-log entropy of a probability vector, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("entropy needs a non-negative vector summing to one")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def model_outputs(model, manifest: DatasetManifest, chunk: int = 64):
    """Softmax rows and pre-classifier features for every sample.

    ``model`` is trained :class:`ModelParams` or any object exposing
    ``trained`` and ``predict(points) -> (probs, features)``.
    """
    if not getattr(model, "trained", False):
        raise ConfigError("splitting by model outputs needs a trained model (run step 1 first)")
    points = manifest.points
    probs, feats = [], []
    for start in range(0, len(points), chunk):
        batch = points[start : start + chunk]
        if isinstance(model, ModelParams):
            trace = forward(model, batch)
            probs.append(trace.softmax)
            feats.append(trace.f_l)
        else:
            p, f = model.predict(batch)
            probs.append(np.asarray(p, dtype=np.float64))
            feats.append(np.asarray(f, dtype=np.float64))
    return np.concatenate(probs), np.concatenate(feats)


def split_entropy(manifest: DatasetManifest, model, K: int = 2) -> SplitResult:
    probs, _ = model_outputs(model, manifest)
    entropy = np.array([prediction_entropy(p / p.sum()) for p in probs])
    assignment = np.zeros(len(manifest), dtype=np.int64)
    for _, idx in _class_members(manifest, K):
        for k, chunk in enumerate(_rank_cut(idx, entropy[idx], K)):
            assignment[chunk] = k
    return _finish(manifest, assignment, "entropy", K, scores=entropy)


def _kmeans_2d(features: np.ndarray, K: int, seed) -> np.ndarray:
    from sklearn.cluster import KMeans
    from sklearn.decomposition import PCA

    n_comp = min(2, features.shape[0], features.shape[1])
    reduced = PCA(n_components=n_comp, svd_solver="full").fit_transform(features)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # duplicate points make sklearn warn about fewer distinct clusters
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=50, random_state=seed)
        labels = km.fit_predict(reduced)
    centers = km.cluster_centers_
    for k in range(K):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=K)
        movable = np.flatnonzero(sizes[labels] > 1)
        dist = np.sum((reduced[movable] - centers[k]) ** 2, axis=1)
        pick = movable[int(np.argmin(dist))]
        logger.warning("k-means produced an empty cluster; moving sample %d into it", pick)
        labels[pick] = k
    return labels


def split_feature_cluster(manifest: DatasetManifest, model, K: int = 2, seed=0) -> SplitResult:
    """Per class: PCA of pretrained features to 2D, then k-means++ with K centres."""
    _, feats = model_outputs(model, manifest)
    seed_int = int(np.random.default_rng(seed).integers(2**31 - 1))
    assignment = np.zeros(len(manifest), dtype=np.int64)
    for _, idx in _class_members(manifest, K):
        if K == 1:
            continue
        assignment[idx] = _kmeans_2d(feats[idx], K, seed_int)
    return _finish(manifest, assignment, "feature", K)


def split_dataset(
    manifest: DatasetManifest,
    method: str = "random",
    K: int = 2,
    seed=0,
    metric: str = "icp",
    model=None,
) -> SplitResult:
    if method == "random":
        return split_random(manifest, K, seed)
    if method == "geometric":
        return split_geometric(manifest, K, metric, seed)
    if method == "entropy":
        return split_entropy(manifest, model, K)
    if method == "feature":
        return split_feature_cluster(manifest, model, K, seed)
    raise ConfigError(f"unknown split method {method!r}; choose from {METHODS}")
