"""Contrastive representation learning over selected statements.

The K statements with highest keep-probability, concatenated in their
original order, act as the fingerprint of a function's suspected flaw.
A supervised contrastive loss pulls fingerprints of vulnerable
functions together; the clustered variant first groups fingerprints by
per-mini-batch k-means and only treats same-cluster vulnerable members
as positives, so distinct flaw patterns are not forced onto each other.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

NORM_FLOOR = 1e-12


def build_topk_representation(
    values: torch.Tensor, topk: list[int], k: int
) -> torch.Tensor:
    """Concatenate the selected rows of F in ascending index order.

    Functions with fewer than K real statements get zero padding at the
    tail, so the result always has length K*d.
    """
    if values.ndim != 2:
        raise ValueError("values must be an (L, d) matrix")
    n_stmts, dim = values.shape
    if len(topk) > k:
        raise ValueError(f"more than {k} selected indices")
    if any(i < 0 or i >= n_stmts for i in topk):
        raise ValueError(f"selected index outside [0, {n_stmts})")
    if any(a >= b for a, b in zip(topk, topk[1:])):
        raise ValueError(f"selected indices must be strictly ascending, got {topk}")
    pad = torch.zeros((k - len(topk)) * dim, dtype=values.dtype)
    if not topk:
        return pad
    return torch.cat([values[list(topk)].reshape(-1), pad])


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """u.v / (|u||v|), defined as 0 when either norm is below 1e-12."""
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"vectors must share one shape, got {u.shape} and {v.shape}")
    norm_u = torch.linalg.vector_norm(u)
    norm_v = torch.linalg.vector_norm(v)
    if float(norm_u) < NORM_FLOOR or float(norm_v) < NORM_FLOOR:
        return torch.zeros((), dtype=torch.float64)
    return (u @ v) / (norm_u * norm_v)


def _pairwise_cosine(reps: torch.Tensor) -> torch.Tensor:
    """(B, B) cosine matrix; rows/columns of near-zero vectors are 0."""
    norms = torch.linalg.vector_norm(reps, dim=1)
    valid = (norms >= NORM_FLOOR).to(reps.dtype)
    safe = norms.clamp(min=NORM_FLOOR)
    sims = (reps @ reps.T) / (safe.unsqueeze(1) * safe.unsqueeze(0))
    return sims * valid.unsqueeze(1) * valid.unsqueeze(0)


def _contrastive(
    reps: torch.Tensor, positive_mask: torch.Tensor, anchor_mask: torch.Tensor, tau: float
) -> torch.Tensor:
    """Shared core: sum over anchors of mean positive -log softmax terms.

    positive_mask[i, j] says j is a positive for anchor i; the
    denominator always runs over everyone but i. Anchors without
    positives are skipped. Cosine/tau is bounded, so plain exp is safe.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    batch = reps.shape[0]
    if batch < 2:
        warnings.warn("contrastive loss needs a batch of at least 2, returning 0")
        return torch.zeros((), dtype=torch.float64)
    scaled = _pairwise_cosine(reps) / tau
    off_diagonal = 1.0 - torch.eye(batch, dtype=reps.dtype)
    exp_scaled = torch.exp(scaled) * off_diagonal
    log_denominator = torch.log(exp_scaled.sum(dim=1))
    log_prob = scaled - log_denominator.unsqueeze(1)
    positives = positive_mask.to(reps.dtype) * off_diagonal
    counts = positives.sum(dim=1)
    anchors = anchor_mask.to(reps.dtype) * (counts > 0).to(reps.dtype)
    per_anchor = -(positives * log_prob).sum(dim=1) / counts.clamp(min=1.0)
    return (per_anchor * anchors).sum()


def scl_loss(reps: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Supervised contrastive loss over vulnerable anchors.

    For each vulnerable i, positives are all other vulnerable batch
    members; the normalizer runs over the whole batch minus i. The
    anchor terms are summed, not averaged.
    """
    label_t = torch.as_tensor(labels, dtype=torch.long)
    if label_t.shape != reps.shape[:1]:
        raise ValueError("need one label per representation")
    vulnerable = label_t == 1
    positive = vulnerable.unsqueeze(0).expand(len(label_t), -1)
    return _contrastive(reps, positive, vulnerable, tau)


def cscl_loss(reps: torch.Tensor, labels, cluster_labels, tau: float) -> torch.Tensor:
    """Cluster-restricted variant: positives must also share the anchor's
    per-batch cluster. The normalizer is unchanged."""
    label_t = torch.as_tensor(labels, dtype=torch.long)
    cluster_t = torch.as_tensor(np.asarray(cluster_labels), dtype=torch.long)
    if label_t.shape != reps.shape[:1] or cluster_t.shape != reps.shape[:1]:
        raise ValueError("need one label and one cluster id per representation")
    vulnerable = label_t == 1
    same_cluster = cluster_t.unsqueeze(0) == cluster_t.unsqueeze(1)
    positive = vulnerable.unsqueeze(0) & same_cluster
    return _contrastive(reps, positive, vulnerable, tau)


def kmeans_minibatch(reps, k: int, seed: int, max_iter: int = 50) -> np.ndarray:
    """Cluster representation vectors with Lloyd's algorithm.

    Deterministic k-means++ seeding; empty clusters are re-seeded from
    the point farthest from its current centroid; fewer points than k
    degenerates to one singleton cluster per point.
    """
    points = np.asarray(reps, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("need a nonempty (n, dim) array of representations")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = points.shape[0]
    if n <= k:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    closest_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest_sq / total))
        centroids[c] = points[pick]
        closest_sq = np.minimum(closest_sq, np.sum((points - centroids[c]) ** 2, axis=1))
    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        distances = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assignments = distances.argmin(axis=1).astype(np.int64)
        own_distance = distances[np.arange(n), new_assignments]
        for c in range(k):
            if not (new_assignments == c).any():
                farthest = int(own_distance.argmax())
                new_assignments[farthest] = c
                own_distance[farthest] = -1.0
        if (new_assignments == assignments).all():
            break
        assignments = new_assignments
        for c in range(k):
            members = points[assignments == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return assignments
