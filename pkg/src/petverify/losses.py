"""Triplet and intra-pair variance objectives with exact analytic gradients.

The combined objective over an identity-balanced batch is

    total = triplet_weight * triplet_term
          + variance_weight * (pos_variance + neg_variance)

where the triplet term is the mean hinge over every valid (anchor, positive,
negative) triplet,

    hinge(a, p, n) = max(0, |a - p|^2 - |a - n|^2 + margin),

and the variance terms penalize similarity spread on the lagging side only:
positive pairs whose cosine falls below (1 - pos_tolerance) * mean positive
similarity, and negative pairs whose cosine rises above
(1 + neg_tolerance) * mean negative similarity, each squared and averaged
over its own pair set. The thresholds are applied literally even when a mean
is negative.

Inputs are required to be unit vectors (checked to 1e-4), so cosine
similarity is taken as the plain dot product and |a - b|^2 = 2 - 2 cos(a, b)
holds up to float error. Gradients differentiate through the means (no
stop-gradient) and take the zero branch exactly at hinge kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import (
    DimMismatchError,
    EmptyPairListError,
    InvalidConfigError,
    LengthMismatchError,
    LossConfig,
    NotNormalizedError,
    UnbalancedBatchError,
)

# batch inputs may deviate from unit norm by at most this much
NORM_TOLERANCE = 1e-4


def squared_distance(a: NDArray, b: NDArray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"shape {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def cosine_similarity(a: NDArray, b: NDArray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"shape {a.shape} vs {b.shape}")
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def triplet_loss(
    anchor: NDArray, positive: NDArray, negative: NDArray, margin: float = 0.45
) -> float:
    """Hinge on the squared-distance gap between the two sides of a triplet."""
    if margin < 0:
        raise InvalidConfigError("margin must be >= 0")
    gap = squared_distance(anchor, positive) - squared_distance(anchor, negative)
    return max(0.0, gap + margin)


def variance_loss(
    pos_sims: NDArray,
    neg_sims: NDArray,
    pos_tolerance: float = 0.01,
    neg_tolerance: float = 0.01,
) -> tuple[float, float]:
    """Mean squared hinge of each similarity against its tolerance band.

    Returns (pos_variance, neg_variance). Positive pairs are penalized for
    falling below (1 - pos_tolerance) * mean(pos_sims); negative pairs for
    exceeding (1 + neg_tolerance) * mean(neg_sims).
    """
    pos = np.asarray(pos_sims, dtype=np.float64).ravel()
    neg = np.asarray(neg_sims, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EmptyPairListError("variance loss needs both pair lists non-empty")
    if pos_tolerance < 0 or neg_tolerance < 0:
        raise InvalidConfigError("tolerances must be >= 0")
    lag = np.maximum(0.0, (1.0 - pos_tolerance) * pos.mean() - pos)
    lead = np.maximum(0.0, neg - (1.0 + neg_tolerance) * neg.mean())
    return float(np.mean(lag**2)), float(np.mean(lead**2))


@dataclass(frozen=True)
class BatchLossBreakdown:
    triplet_term: float
    pos_variance: float
    neg_variance: float
    total: float
    n_triplets: int
    n_pos_pairs: int
    n_neg_pairs: int


def _validated_batch(
    embeddings: NDArray, identities: list[str] | tuple[str, ...]
) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatchError(f"batch must be 2-d, got {x.ndim}-d")
    if len(identities) != x.shape[0]:
        raise LengthMismatchError(
            f"{len(identities)} identities for {x.shape[0]} embeddings"
        )
    counts: dict[str, int] = {}
    for identity in identities:
        counts[identity] = counts.get(identity, 0) + 1
    offenders = {k: v for k, v in counts.items() if v != 2}
    if offenders:
        raise UnbalancedBatchError(
            f"each identity must appear exactly twice, got {offenders}"
        )
    norms = np.linalg.norm(x, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > NORM_TOLERANCE:
        raise NotNormalizedError(
            f"embedding norm deviates from 1 by {worst:.3e} (tolerance {NORM_TOLERANCE})"
        )
    ids = np.asarray(identities, dtype=object)
    same = ids[:, None] == ids[None, :]
    return x, same


def _pair_indices(same: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upper-triangle pair indices split into same- and cross-identity."""
    iu, ju = np.triu_indices(same.shape[0], k=1)
    mask = same[iu, ju]
    return np.stack([iu, ju], axis=1), mask, ~mask


def batch_loss(
    embeddings: NDArray,
    identities: list[str] | tuple[str, ...],
    config: LossConfig = LossConfig(),
) -> BatchLossBreakdown:
    """Combined objective over an identity-balanced batch.

    Triplets are exhaustive: every ordered same-identity (anchor, positive)
    pair crossed with every embedding of a different identity. Positive and
    negative similarity sets for the variance terms are the unordered
    same-identity and cross-identity pairs of the batch.
    """
    x, same = _validated_batch(embeddings, identities)
    b = x.shape[0]
    gram = x @ x.T
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)

    pairs, pos_mask, neg_mask = _pair_indices(same)
    pos_sims = gram[pairs[pos_mask, 0], pairs[pos_mask, 1]]
    neg_sims = gram[pairs[neg_mask, 0], pairs[neg_mask, 1]]
    if pos_sims.size == 0 or neg_sims.size == 0:
        raise EmptyPairListError("batch needs at least two identities")

    hinge_sum = 0.0
    n_triplets = 0
    for a in range(b):
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            negatives = ~same[a]
            gaps = d2[a, p] - d2[a, negatives] + config.margin
            hinge_sum += float(np.sum(np.maximum(0.0, gaps)))
            n_triplets += int(np.count_nonzero(negatives))
    triplet_term = hinge_sum / n_triplets

    pos_variance, neg_variance = variance_loss(
        pos_sims, neg_sims, config.pos_tolerance, config.neg_tolerance
    )
    total = config.triplet_weight * triplet_term + config.variance_weight * (
        pos_variance + neg_variance
    )
    return BatchLossBreakdown(
        triplet_term=triplet_term,
        pos_variance=pos_variance,
        neg_variance=neg_variance,
        total=total,
        n_triplets=n_triplets,
        n_pos_pairs=int(pos_sims.size),
        n_neg_pairs=int(neg_sims.size),
    )


def batch_loss_grad(
    embeddings: NDArray,
    identities: list[str] | tuple[str, ...],
    config: LossConfig = LossConfig(),
) -> NDArray[np.float64]:
    """Exact subgradient of the combined objective w.r.t. each embedding.

    At hinge kinks the zero branch is taken; everywhere else this is the
    true gradient, including the paths through the similarity means.
    """
    x, same = _validated_batch(embeddings, identities)
    b = x.shape[0]
    gram = x @ x.T
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    grad = np.zeros_like(x)

    pairs, pos_mask, neg_mask = _pair_indices(same)
    pos_pairs = pairs[pos_mask]
    neg_pairs = pairs[neg_mask]
    if pos_pairs.size == 0 or neg_pairs.size == 0:
        raise EmptyPairListError("batch needs at least two identities")

    # triplet term: mean over b * (b - 2) triplets
    n_triplets = b * (b - 2)
    w_trip = config.triplet_weight / n_triplets
    for a in range(b):
        for p in np.flatnonzero(same[a]):
            if p == a:
                continue
            negatives = ~same[a]
            active = negatives & (d2[a, p] - d2[a, :] + config.margin > 0.0)
            count = int(np.count_nonzero(active))
            if count == 0:
                continue
            grad[a] += w_trip * 2.0 * (np.sum(x[active], axis=0) - count * x[p])
            grad[p] += w_trip * -2.0 * count * (x[a] - x[p])
            grad[active] += w_trip * 2.0 * (x[a] - x[active])

    # variance terms: d total / d sim, then sim = dot(x_u, x_v)
    pos_sims = gram[pos_pairs[:, 0], pos_pairs[:, 1]]
    neg_sims = gram[neg_pairs[:, 0], neg_pairs[:, 1]]
    n_pos, n_neg = pos_sims.size, neg_sims.size

    shrink = 1.0 - config.pos_tolerance
    lag = np.maximum(0.0, shrink * pos_sims.mean() - pos_sims)
    pos_coef = (2.0 / n_pos) * (shrink * lag.sum() / n_pos - lag)
    pos_coef *= config.variance_weight

    grow = 1.0 + config.neg_tolerance
    lead = np.maximum(0.0, neg_sims - grow * neg_sims.mean())
    neg_coef = (2.0 / n_neg) * (lead - grow * lead.sum() / n_neg)
    neg_coef *= config.variance_weight

    for (u, v), coef in zip(pos_pairs, pos_coef):
        grad[u] += coef * x[v]
        grad[v] += coef * x[u]
    for (u, v), coef in zip(neg_pairs, neg_coef):
        grad[u] += coef * x[v]
        grad[v] += coef * x[u]
    return grad
