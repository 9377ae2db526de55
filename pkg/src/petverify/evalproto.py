"""Verification metrics under a capped, seeded pair protocol.

Pair generation walks identities in bytewise order, enumerates each
identity's same-identity pairs in seeded random order, and accepts pairs
while the identity stays under per_identity_cap positive pairs and both
images stay under usage_cap total appearances. Negatives are seeded random
cross-identity pairs accepted under the same shared usage counts, targeting
one negative per positive (they fill to the achievable maximum when the caps
make the target impossible).

Metrics:

* roc_auc: Mann-Whitney rank estimator, ties credited 0.5.
* eer: threshold sweep over midpoints of adjacent distinct scores plus
  -inf/+inf sentinels; FPR = fraction of cross-identity pairs scoring >= t,
  FNR = fraction of same-identity pairs scoring < t; the sweep minimizes
  |FPR - FNR| (ties toward smaller eer, then smaller t) and reports
  (FPR + FNR) / 2 there.
* top_k: every image queries the rest of the store, cosine descending,
  ties broken by image_id bytewise ascending; queries whose identity has no
  other image are skipped and tallied.

Scoring is pure and chunked; with workers > 1 chunks are scored on threads
into index-addressed slots, so parallel and serial runs agree bitwise.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import (
    DegenerateLabelsError,
    EmbeddingRecord,
    EmptyGalleryError,
    InvalidConfigError,
    MetricReport,
    NonFiniteValueError,
    NoPositivePairsError,
    PairSet,
)
from .store import canonical_json

DEFAULT_KS = (1, 5, 10)


# --------------------------------------------------------------------------
# pair generation


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _identity_images(
    records: Sequence[EmbeddingRecord],
) -> tuple[dict[str, list[str]], dict[str, str]]:
    by_identity: dict[str, list[str]] = {}
    identity_of: dict[str, str] = {}
    for record in records:
        if record.image_id in identity_of:
            raise InvalidConfigError(f"duplicate image_id {record.image_id!r}")
        identity_of[record.image_id] = record.identity_id
        by_identity.setdefault(record.identity_id, []).append(record.image_id)
    for images in by_identity.values():
        images.sort(key=lambda s: s.encode("utf-8"))
    return by_identity, identity_of


def generate_pairs(
    records: Sequence[EmbeddingRecord],
    usage_cap: int = 5,
    per_identity_cap: int = 15,
    seed: int = 0,
) -> PairSet:
    """Build the capped verification pair set for a store."""
    if usage_cap < 1 or per_identity_cap < 1:
        raise InvalidConfigError("caps must be >= 1")
    by_identity, identity_of = _identity_images(records)
    if len(by_identity) < 2:
        # a lone identity could pair with itself but never with anyone else
        raise NoPositivePairsError("pair generation needs at least two identities")
    rng = _rng(seed)
    usage: dict[str, int] = {image_id: 0 for image_id in identity_of}

    positives: list[tuple[str, str]] = []
    for identity in sorted(by_identity, key=lambda s: s.encode("utf-8")):
        images = by_identity[identity]
        candidates = [
            (images[i], images[j])
            for i in range(len(images))
            for j in range(i + 1, len(images))
        ]
        accepted = 0
        for index in rng.permutation(len(candidates)):
            if accepted >= per_identity_cap:
                break
            a, b = candidates[index]
            if usage[a] >= usage_cap or usage[b] >= usage_cap:
                continue
            positives.append((a, b))
            usage[a] += 1
            usage[b] += 1
            accepted += 1
    if not positives:
        raise NoPositivePairsError("no identity yields a same-identity pair")

    all_images = sorted(identity_of, key=lambda s: s.encode("utf-8"))
    n = len(all_images)
    target = len(positives)
    negatives: list[tuple[str, str]] = []
    seen: set[frozenset[str]] = set()

    # fast path: rejection sampling
    budget = 100 * target + 1000
    while len(negatives) < target and budget > 0:
        budget -= 1
        i = int(rng.integers(n))
        j = int(rng.integers(n))
        if i == j:
            continue
        a, b = all_images[i], all_images[j]
        if identity_of[a] == identity_of[b]:
            continue
        if usage[a] >= usage_cap or usage[b] >= usage_cap:
            continue
        key = frozenset((a, b))
        if key in seen:
            continue
        seen.add(key)
        negatives.append((a, b))
        usage[a] += 1
        usage[b] += 1

    if len(negatives) < target:
        # the pool is nearly exhausted; enumerate what is left under the caps
        remaining = [img for img in all_images if usage[img] < usage_cap]
        leftovers = [
            (remaining[i], remaining[j])
            for i in range(len(remaining))
            for j in range(i + 1, len(remaining))
            if identity_of[remaining[i]] != identity_of[remaining[j]]
            and frozenset((remaining[i], remaining[j])) not in seen
        ]
        for index in rng.permutation(len(leftovers)):
            if len(negatives) >= target:
                break
            a, b = leftovers[index]
            if usage[a] >= usage_cap or usage[b] >= usage_cap:
                continue
            key = frozenset((a, b))
            if key in seen:
                continue
            seen.add(key)
            negatives.append((a, b))
            usage[a] += 1
            usage[b] += 1

    return PairSet(
        positives=tuple(positives),
        negatives=tuple(negatives),
        usage_cap=usage_cap,
        per_identity_cap=per_identity_cap,
        seed=seed,
    )


# --------------------------------------------------------------------------
# scoring


def pooled_vector(record: EmbeddingRecord) -> np.ndarray:
    """Token sequences mean-pool to one vector; single vectors pass through."""
    vec = record.vector.astype(np.float64)
    return vec.mean(axis=0) if vec.ndim == 2 else vec


def _unit_pooled_index(
    records: Sequence[EmbeddingRecord],
) -> tuple[list[str], np.ndarray, dict[str, int]]:
    image_ids = [record.image_id for record in records]
    matrix = np.stack([pooled_vector(record) for record in records])
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NonFiniteValueError("a pooled embedding has zero or non-finite norm")
    index = {image_id: row for row, image_id in enumerate(image_ids)}
    return image_ids, matrix / norms, index


def score_pair_set(
    records: Sequence[EmbeddingRecord],
    pairs: PairSet,
    chunk_size: int = 128,
    workers: int = 1,
) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Cosine scores and same-identity labels for every pair, positives first."""
    if chunk_size < 1 or workers < 1:
        raise InvalidConfigError("chunk_size and workers must be >= 1")
    _, unit, index = _unit_pooled_index(records)
    all_pairs = list(pairs.positives) + list(pairs.negatives)
    for a, b in all_pairs:
        if a not in index or b not in index:
            raise InvalidConfigError(f"pair references unknown image id {a!r}/{b!r}")
    left = np.array([index[a] for a, _ in all_pairs], dtype=np.intp)
    right = np.array([index[b] for _, b in all_pairs], dtype=np.intp)
    scores = np.empty(len(all_pairs), dtype=np.float64)

    def score_chunk(start: int) -> None:
        stop = min(start + chunk_size, len(all_pairs))
        scores[start:stop] = np.einsum(
            "ij,ij->i", unit[left[start:stop]], unit[right[start:stop]]
        )

    starts = range(0, len(all_pairs), chunk_size)
    if workers == 1:
        for start in starts:
            score_chunk(start)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(score_chunk, starts))

    labels = np.zeros(len(all_pairs), dtype=bool)
    labels[: len(pairs.positives)] = True
    return scores, labels


# --------------------------------------------------------------------------
# metrics


def _split_scores(
    scores: NDArray, labels: NDArray
) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(scores, dtype=np.float64).ravel()
    flags = np.asarray(labels, dtype=bool).ravel()
    if values.shape != flags.shape:
        raise InvalidConfigError("scores and labels must have equal length")
    pos, neg = values[flags], values[~flags]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabelsError("need at least one positive and one negative")
    return pos, neg


def roc_auc(scores: NDArray, labels: NDArray) -> float:
    """Mann-Whitney estimator: P(pos > neg) + 0.5 * P(pos == neg)."""
    pos, neg = _split_scores(scores, labels)
    pooled = np.concatenate([pos, neg])
    _, inverse, counts = np.unique(pooled, return_inverse=True, return_counts=True)
    cumulative = np.cumsum(counts)
    average_rank = cumulative - counts + (counts + 1) / 2.0  # 1-based
    ranks = average_rank[inverse]
    n_pos, n_neg = pos.size, neg.size
    rank_sum = float(ranks[:n_pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def eer(scores: NDArray, labels: NDArray) -> tuple[float, float]:
    """(equal error rate, threshold) by exhaustive candidate sweep."""
    pos, neg = _split_scores(scores, labels)
    distinct = np.unique(np.concatenate([pos, neg]))
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    candidates = np.concatenate(([-np.inf], midpoints, [np.inf]))

    best: tuple[float, float, float] | None = None
    for theta in candidates:
        fpr = float(np.mean(neg >= theta))
        fnr = float(np.mean(pos < theta))
        key = (abs(fpr - fnr), (fpr + fnr) / 2.0, theta)
        if best is None or key < best:
            best = key
    assert best is not None
    return best[1], best[2]


@dataclass(frozen=True)
class TopKResult:
    accuracies: dict[int, float]
    query_ids: tuple[str, ...]
    hits: dict[int, tuple[bool, ...]]  # per query, aligned with query_ids
    n_skipped: int


def rank_queries(
    records: Sequence[EmbeddingRecord], ks: Iterable[int] = DEFAULT_KS
) -> TopKResult:
    """Query-vs-rest retrieval accuracy with deterministic tie handling."""
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise InvalidConfigError("ks must be non-empty with every k >= 1")
    if len(records) < 2:
        raise EmptyGalleryError("retrieval needs at least two records")
    image_ids, unit, _ = _unit_pooled_index(records)
    if len(set(image_ids)) != len(image_ids):
        raise InvalidConfigError("duplicate image ids in store")
    identities = [record.identity_id for record in records]
    _, identity_codes = np.unique(np.array(identities, dtype=object), return_inverse=True)
    counts: dict[str, int] = {}
    for identity in identities:
        counts[identity] = counts.get(identity, 0) + 1

    # bytewise rank of each image id, for tie-breaking inside lexsort
    id_rank = np.argsort(
        np.argsort(np.array([s.encode("utf-8") for s in image_ids], dtype=object))
    )
    sims = unit @ unit.T
    n = len(records)

    query_ids: list[str] = []
    hits: dict[int, list[bool]] = {k: [] for k in ks}
    n_skipped = 0
    for q in range(n):
        if counts[identities[q]] < 2:
            n_skipped += 1
            continue
        gallery = np.concatenate([np.arange(q), np.arange(q + 1, n)])
        order = np.lexsort((id_rank[gallery], -sims[q, gallery]))
        ranked = gallery[order]
        query_ids.append(image_ids[q])
        same = identity_codes[ranked] == identity_codes[q]
        for k in ks:
            hits[k].append(bool(same[: min(k, len(ranked))].any()))

    if not query_ids:
        raise EmptyGalleryError("every identity is a singleton; no queries possible")
    return TopKResult(
        accuracies={k: float(np.mean(hits[k])) for k in ks},
        query_ids=tuple(query_ids),
        hits={k: tuple(v) for k, v in hits.items()},
        n_skipped=n_skipped,
    )


def top_k(
    records: Sequence[EmbeddingRecord], ks: Iterable[int] = DEFAULT_KS
) -> dict[int, float]:
    return rank_queries(records, ks).accuracies


# --------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class EvaluationResult:
    report: MetricReport
    pair_set: PairSet
    scores: NDArray[np.float64]
    labels: NDArray[np.bool_]
    retrieval: TopKResult
    eer_threshold: float


def config_digest(
    usage_cap: int, per_identity_cap: int, seed: int, ks: Sequence[int]
) -> str:
    payload = canonical_json(
        {
            "usage_cap": int(usage_cap),
            "per_identity_cap": int(per_identity_cap),
            "seed": int(seed),
            "ks": [int(k) for k in sorted(ks)],
        }
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def evaluate(
    records: Sequence[EmbeddingRecord],
    usage_cap: int = 5,
    per_identity_cap: int = 15,
    seed: int = 0,
    ks: Iterable[int] = DEFAULT_KS,
    chunk_size: int = 128,
    workers: int = 1,
) -> EvaluationResult:
    """Full protocol: pairs, scores, ROC AUC, EER and top-k in one report."""
    ks = sorted(set(int(k) for k in ks))
    pairs = generate_pairs(records, usage_cap, per_identity_cap, seed)
    scores, labels = score_pair_set(records, pairs, chunk_size, workers)
    auc_value = roc_auc(scores, labels)
    eer_value, threshold = eer(scores, labels)
    retrieval = rank_queries(records, ks)
    report = MetricReport(
        roc_auc=auc_value,
        eer=eer_value,
        top_k=retrieval.accuracies,
        n_pos=len(pairs.positives),
        n_neg=len(pairs.negatives),
        n_queries=len(retrieval.query_ids),
        seed=seed,
        config_digest=config_digest(usage_cap, per_identity_cap, seed, ks),
    )
    return EvaluationResult(
        report=report,
        pair_set=pairs,
        scores=scores,
        labels=labels,
        retrieval=retrieval,
        eer_threshold=threshold,
    )
