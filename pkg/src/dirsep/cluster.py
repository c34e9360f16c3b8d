"""Speaker discovery: spectral clustering of frame embeddings with
eigengap-based cluster-count estimation under an over-clustering
constraint, and mean pooling of the top clusters into speaker profiles.

The concrete instantiation is: cosine affinity, one row-percentile
pruning refinement, symmetric normalized Laplacian, cluster count from
the largest ascending-eigenvalue gap searched within
[n_speakers, max_clusters], then k-means on the row-normalized smallest
eigenvectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform
from .embed import EmbedderConfig, FrameEmbeddings, SpeakerProfiles, embed_frames
from .seeding import child_rng
from .validation import check_embedding_matrix, check_square_symmetric

DEFAULT_MAX_CLUSTERS = 6
DEFAULT_PRUNE_PERCENTILE = 50.0
KMEANS_RESTARTS = 50
KMEANS_TOL = 1e-6


@dataclass
class Affinity:
    """Pairwise cosine similarities between frame embeddings."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = check_square_symmetric(self.matrix, "affinity", tol=1e-9)

    @property
    def num_frames(self) -> int:
        return self.matrix.shape[0]


@dataclass
class ClusterResult:
    labels: np.ndarray            # frame -> cluster id in [0, num_clusters)
    num_clusters: int             # detected count, in [n_speakers, max_clusters]
    cardinalities: list = field(default_factory=list)  # descending
    eigengaps: np.ndarray = None  # gap sequence used for the estimate


def affinity_matrix(embeddings: FrameEmbeddings) -> Affinity:
    """Cosine similarity between every pair of frame embeddings."""
    vectors = check_embedding_matrix(embeddings.vectors).astype(np.float64)
    if vectors.shape[0] < 2:
        raise ValueError("need at least two frames for an affinity matrix")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.maximum(norms, 1e-12)
    gram = unit @ unit.T
    gram = np.clip((gram + gram.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(gram, 1.0)
    return Affinity(gram)


def _pruned_laplacian(affinity: Affinity, percentile: float) -> np.ndarray:
    """Row-percentile pruning, symmetrization, symmetric normalized Laplacian.

    Entries below each row's percentile are zeroed (the diagonal, being
    the row maximum, always survives, which keeps every degree positive);
    remaining negatives are clipped so degrees stay valid weights.
    """
    a = affinity.matrix.copy()
    thresh = np.percentile(a, percentile, axis=1, keepdims=True)
    a[a < thresh] = 0.0
    a = np.clip((a + a.T) / 2.0, 0.0, None)
    degree = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(degree, 1e-12))
    lap = np.eye(len(a)) - (inv_sqrt[:, None] * a * inv_sqrt[None, :])
    return (lap + lap.T) / 2.0


def estimate_num_clusters(affinity: Affinity, n_speakers: int, max_clusters: int,
                          percentile: float = DEFAULT_PRUNE_PERCENTILE):
    """Pick the cluster count by the largest Laplacian eigenvalue gap.

    Eigenvalues are sorted ascending and the gap lambda_{k+1} - lambda_k
    is searched over k in [1, max_clusters]; the winner is clamped into
    [n_speakers, max_clusters]. Searching from k=1 matters: for data with
    fewer than n_speakers natural groups the dominant gap sits below
    n_speakers and the clamp to the lower bound is what the constraint
    prescribes, whereas an argmax restricted to [n_speakers, max_clusters]
    would report noise. The gap at k needs eigenvalue k+1, so the search
    is additionally capped at num_frames - 1. Returns (count, gaps) where
    gaps[i] is the gap at k = 1 + i.
    """
    if n_speakers < 1 or max_clusters < n_speakers:
        raise ValueError(f"need max_clusters >= n_speakers >= 1, got {n_speakers}, {max_clusters}")
    f = affinity.num_frames
    if f < max_clusters:
        raise ValueError(f"only {f} frames for max_clusters={max_clusters}")
    lap = _pruned_laplacian(affinity, percentile)
    eigvals = np.linalg.eigvalsh(lap)
    k_hi = min(max_clusters, f - 1)
    gaps = eigvals[1:k_hi + 1] - eigvals[:k_hi]
    count = 1 + int(np.argmax(gaps))
    count = int(np.clip(count, n_speakers, max_clusters))
    return count, gaps


def _kmeans_once(x: np.ndarray, k: int, rng) -> tuple:
    n = x.shape[0]
    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    prev_inertia = np.inf
    for _ in range(300):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                centers[j] = x[int(np.argmax(dists.min(axis=1)))]
        if prev_inertia - inertia <= KMEANS_TOL * max(prev_inertia, 1.0):
            break
        prev_inertia = inertia
    return labels, inertia


def kmeans(x: np.ndarray, k: int, seed: int, restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Best-of-restarts k-means with k-means++ init, deterministic given seed."""
    rng = child_rng(seed, "kmeans")
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _kmeans_once(x, k, rng)
        if inertia < best_inertia - 1e-12:
            best_inertia, best_labels = inertia, labels
    return best_labels


def spectral_cluster(affinity: Affinity, num_clusters: int, seed: int,
                     percentile: float = DEFAULT_PRUNE_PERCENTILE) -> ClusterResult:
    """Cluster frames into num_clusters groups via the spectral embedding.

    The rows of the matrix of the num_clusters smallest-eigenvalue
    eigenvectors are row-normalized and k-means clustered. Labels are
    relabeled so cluster 0 is the largest; equal cardinalities keep the
    lower original cluster index first.
    """
    f = affinity.num_frames
    if not 1 <= num_clusters <= f:
        raise ValueError(f"num_clusters must be in [1, {f}], got {num_clusters}")
    lap = _pruned_laplacian(affinity, percentile)
    eigvals, eigvecs = np.linalg.eigh(lap)
    if not np.all(np.isfinite(eigvecs)):
        raise ValueError("eigendecomposition failed: degenerate affinity")
    basis = eigvecs[:, :num_clusters]
    norms = np.linalg.norm(basis, axis=1, keepdims=True)
    basis = basis / np.maximum(norms, 1e-12)
    raw = kmeans(basis, num_clusters, seed)
    counts = np.bincount(raw, minlength=num_clusters)
    order = np.lexsort((np.arange(num_clusters), -counts))
    relabel = np.empty(num_clusters, dtype=np.int64)
    relabel[order] = np.arange(num_clusters)
    labels = relabel[raw]
    cardinalities = sorted(counts.tolist(), reverse=True)
    return ClusterResult(labels=labels, num_clusters=num_clusters,
                         cardinalities=cardinalities)


def pool_top_n(embeddings: FrameEmbeddings, clusters: ClusterResult,
               n_speakers: int) -> SpeakerProfiles:
    """Mean-pool the frame embeddings of the n largest clusters.

    Profiles come out ordered by descending source-cluster cardinality
    (the labels already encode that order).
    """
    if clusters.num_clusters < n_speakers:
        raise ValueError(f"only {clusters.num_clusters} clusters for {n_speakers} speakers")
    if len(clusters.labels) != embeddings.num_frames:
        raise ValueError("label count does not match frame count")
    profiles = np.stack([
        embeddings.vectors[clusters.labels == j].astype(np.float64).mean(axis=0)
        for j in range(n_speakers)
    ])
    return SpeakerProfiles(profiles, cardinalities=clusters.cardinalities[:n_speakers])


def discover(waveform: Waveform, embedder: EmbedderConfig, n_speakers: int = 2,
             max_clusters: int = DEFAULT_MAX_CLUSTERS, seed: int = 0,
             percentile: float = DEFAULT_PRUNE_PERCENTILE):
    """Full speaker discovery: embed, cluster, pool.

    Returns (profiles, cluster_result). Profiles are computed once per
    recording and reused for every chunk downstream. If the recording's
    speakers are indistinguishable the profiles come out near-identical;
    that is not an error, separation quality just degrades.
    """
    embeddings = embed_frames(waveform, embedder)
    aff = affinity_matrix(embeddings)
    count, gaps = estimate_num_clusters(aff, n_speakers, max_clusters, percentile)
    result = spectral_cluster(aff, count, seed, percentile)
    result.eigengaps = gaps
    profiles = pool_top_n(embeddings, result, n_speakers)
    return profiles, result
