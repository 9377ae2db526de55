"""Capped pair generation and the verification metrics built on top of it."""

from __future__ import annotations

import hashlib

import numpy as np
import pytest

import oracles
from helpers import clustered_records, image_record, unit
from petverify.core import (
    DegenerateLabelsError,
    EmptyGalleryError,
    InvalidConfigError,
    Modality,
    EmbeddingRecord,
    NonFiniteValueError,
    NoPositivePairsError,
    PairSet,
    pair_set_violations,
)
from petverify.evalproto import (
    config_digest,
    eer,
    evaluate,
    generate_pairs,
    pooled_vector,
    rank_queries,
    roc_auc,
    score_pair_set,
    top_k,
)
from petverify.synth import SynthConfig, gen_population


def population(rng, identity_sizes, dim=5):
    """One record per image, random unit vectors, ids encode the identity."""
    records = []
    for index, size in enumerate(identity_sizes):
        name = f"pet{index:02d}"
        for image in range(size):
            vec = rng.standard_normal(dim)
            records.append(image_record(name, f"{name}-img{image}", unit(vec)))
    return records


def identity_of(records):
    return {record.image_id: record.identity_id for record in records}


def usage_counts(pairs):
    counts = {}
    for a, b in list(pairs.positives) + list(pairs.negatives):
        counts[a] = counts.get(a, 0) + 1
        counts[b] = counts.get(b, 0) + 1
    return counts


# --------------------------------------------------------------------------
# pair generation


def test_three_image_identity_yields_every_pair():
    rng = np.random.default_rng(11)
    records = population(rng, [3, 3])
    pairs = generate_pairs(records, usage_cap=5, per_identity_cap=15, seed=3)

    assert len(pairs.positives) == 6  # C(3,2) per identity
    for prefix in ("pet00", "pet01"):
        own = [p for p in pairs.positives if p[0].startswith(prefix)]
        assert len(own) == 3
        from_positives = {}
        for a, b in own:
            from_positives[a] = from_positives.get(a, 0) + 1
            from_positives[b] = from_positives.get(b, 0) + 1
        assert set(from_positives.values()) == {2}
    assert len(pairs.negatives) == len(pairs.positives)
    assert pair_set_violations(pairs, identity_of(records)) == []


def test_singleton_identity_contributes_no_positives():
    rng = np.random.default_rng(7)
    records = population(rng, [1, 2, 2])
    pairs = generate_pairs(records, seed=0)
    solo = "pet00-img0"
    assert all(solo not in pair for pair in pairs.positives)
    assert len(pairs.positives) == 2


def test_per_identity_cap_binds_at_thirty_images():
    rng = np.random.default_rng(5)
    records = population(rng, [30, 4, 4])
    pairs = generate_pairs(records, usage_cap=5, per_identity_cap=15, seed=0)

    counts = {"pet00": 0, "pet01": 0, "pet02": 0}
    for a, _ in pairs.positives:
        counts[a[:5]] += 1
    assert counts == {"pet00": 15, "pet01": 6, "pet02": 6}
    # negatives fall short of 27 here: every cross pair burns one of the 16
    # spare uses on the two small identities, and one pair burned two
    assert len(pairs.positives) == 27
    assert len(pairs.negatives) == 15
    assert max(usage_counts(pairs).values()) <= 5
    assert pair_set_violations(pairs, identity_of(records)) == []


def test_negatives_fill_to_the_achievable_maximum():
    # with two identities every negative consumes one of beta's two images;
    # after beta's own positive each has 4 uses left, so 8 negatives at most
    rng = np.random.default_rng(2)
    records = population(rng, [30, 2])
    pairs = generate_pairs(records, usage_cap=5, per_identity_cap=15, seed=1)
    assert len(pairs.positives) == 16
    assert len(pairs.negatives) == 8
    assert pair_set_violations(pairs, identity_of(records)) == []


def test_pair_generation_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(13)
    records = population(rng, [4, 4, 3, 5])
    first = generate_pairs(records, seed=42)
    again = generate_pairs(records, seed=42)
    other = generate_pairs(records, seed=43)
    assert first.positives == again.positives
    assert first.negatives == again.negatives
    assert (first.positives, first.negatives) != (other.positives, other.negatives)


def test_generated_sets_are_valid_across_seeded_populations():
    rng = np.random.default_rng(20240812)
    for trial in range(25):
        sizes = [int(rng.integers(1, 7)) for _ in range(int(rng.integers(2, 8)))]
        sizes[0] = max(sizes[0], 2)  # guarantee one positive-capable identity
        records = population(rng, sizes)
        usage_cap = int(rng.integers(1, 7))
        per_identity_cap = int(rng.integers(1, 20))
        pairs = generate_pairs(records, usage_cap, per_identity_cap, seed=trial)
        assert pair_set_violations(pairs, identity_of(records)) == []


def test_pair_generation_rejects_degenerate_stores():
    rng = np.random.default_rng(3)
    with pytest.raises(NoPositivePairsError, match="two identities"):
        generate_pairs(population(rng, [4]))
    with pytest.raises(NoPositivePairsError, match="same-identity pair"):
        generate_pairs(population(rng, [1, 1, 1]))
    with pytest.raises(InvalidConfigError, match="caps"):
        generate_pairs(population(rng, [2, 2]), usage_cap=0)
    records = population(rng, [2, 2])
    records.append(records[0])
    with pytest.raises(InvalidConfigError, match="duplicate image_id"):
        generate_pairs(records)


# --------------------------------------------------------------------------
# ROC AUC


def test_roc_auc_worked_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0
    assert roc_auc([0.9, 0.4, 0.6, 0.1], [True, True, False, False]) == 0.75
    assert roc_auc([0.3] * 6, [True, True, False, False, False, False]) == 0.5


def test_roc_auc_rejects_degenerate_labels():
    with pytest.raises(DegenerateLabelsError):
        roc_auc([0.1, 0.2], [True, True])
    with pytest.raises(DegenerateLabelsError):
        roc_auc([0.1, 0.2], [False, False])
    with pytest.raises(InvalidConfigError, match="equal length"):
        roc_auc([0.1, 0.2, 0.3], [True, False])


def test_rank_estimator_matches_trapezoid_integration():
    rng = np.random.default_rng(818)
    for trial in range(20):
        n_pos = int(rng.integers(1, 40))
        n_neg = int(rng.integers(1, 40))
        pos = rng.standard_normal(n_pos)
        neg = rng.standard_normal(n_neg)
        if trial % 2:  # quantize to force heavy ties
            pos, neg = np.round(pos, 1), np.round(neg, 1)
        scores = np.concatenate([pos, neg])
        labels = np.arange(scores.size) < n_pos
        auc = roc_auc(scores, labels)
        assert abs(auc - oracles.trapezoid_auc(list(pos), list(neg))) < 1e-9
        assert abs(auc - oracles.rank_auc(list(pos), list(neg))) < 1e-9


def test_inverted_scores_flip_auc():
    rng = np.random.default_rng(99)
    for trial in range(20):
        n_pos = int(rng.integers(2, 20))
        n_neg = int(rng.integers(2, 20))
        scores = rng.permutation(np.arange(n_pos + n_neg, dtype=np.float64))
        labels = np.arange(scores.size) < n_pos
        total = n_pos * n_neg
        wins = roc_auc(scores, labels) * total
        wins_inverted = roc_auc(-scores, labels) * total
        # tie-free, so both are integer win counts up to division rounding
        assert abs(wins - round(wins)) < 1e-9
        assert round(wins) + round(wins_inverted) == total
    # with a power-of-two comparison count the float identity is exact too
    scores = rng.permutation(np.arange(16, dtype=np.float64))
    labels = np.arange(16) < 8
    assert roc_auc(-scores, labels) == 1.0 - roc_auc(scores, labels)


# --------------------------------------------------------------------------
# EER


def test_eer_worked_examples():
    value, threshold = eer([0.9, 0.8, 0.1, 0.2], [True, True, False, False])
    assert value == 0.0
    assert threshold == 0.5

    value, threshold = eer([0.9, 0.4, 0.6, 0.1], [True, True, False, False])
    assert value == 0.5
    assert threshold == 0.5

    value, threshold = eer([0.1, 0.2, 0.8, 0.9], [True, True, False, False])
    assert value == 1.0
    with pytest.raises(DegenerateLabelsError):
        eer([0.5, 0.6], [True, True])


def test_eer_matches_oracle_sweep():
    rng = np.random.default_rng(515)
    for trial in range(20):
        n_pos = int(rng.integers(1, 30))
        n_neg = int(rng.integers(1, 30))
        pos = rng.standard_normal(n_pos)
        neg = rng.standard_normal(n_neg)
        if trial % 2:
            pos, neg = np.round(pos, 1), np.round(neg, 1)
        scores = np.concatenate([pos, neg])
        labels = np.arange(scores.size) < n_pos
        value, threshold = eer(scores, labels)
        oracle_value, oracle_threshold = oracles.eer_sweep(list(pos), list(neg))
        assert value == oracle_value
        assert threshold == oracle_threshold


def test_eer_invariant_under_monotone_transforms():
    rng = np.random.default_rng(616)
    for trial in range(10):
        scores = rng.standard_normal(30)  # symmetric around zero on purpose
        labels = np.concatenate([np.ones(15, bool), np.zeros(15, bool)])
        base, _ = eer(scores, labels)
        affine, _ = eer(2.0 * scores + 1.0, labels)
        cubed, _ = eer(scores**3, labels)
        assert base == affine == cubed


# --------------------------------------------------------------------------
# retrieval


def test_pooled_vector_mean_pools_tokens():
    tokens = EmbeddingRecord(
        identity_id="a", image_id="a-1", modality=Modality.TEXT_TOKENS,
        vector=np.array([[1.0, 0.0], [0.0, 1.0]]),
    )
    assert np.array_equal(pooled_vector(tokens), [0.5, 0.5])
    single = image_record("a", "a-2", [3.0, 4.0])
    assert np.array_equal(pooled_vector(single), [3.0, 4.0])


def test_top1_perfect_on_separated_clusters():
    records = clustered_records([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], copies=2)
    assert top_k(records, ks=[1]) == {1: 1.0}


def test_k_covering_the_gallery_is_always_a_hit():
    rng = np.random.default_rng(4)
    records = population(rng, [2, 2, 2], dim=6)
    assert top_k(records, ks=[10]) == {10: 1.0}


def test_topk_matches_bruteforce_oracle():
    rng = np.random.default_rng(20240813)
    ks = (1, 2, 3, 5)
    for trial in range(20):
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(3, 7)))]
        sizes[0] = max(sizes[0], 2)
        records = population(rng, sizes, dim=4)
        if trial % 3 == 0 and len(records) > 2:
            # duplicate one vector to exercise the tie break
            donor, target = records[0], records[-1]
            records[-1] = image_record(
                target.identity_id, target.image_id, donor.vector
            )
        result = rank_queries(records, ks=ks)
        entries = [
            (r.identity_id, r.image_id, [float(x) for x in r.vector])
            for r in records
        ]
        oracle_acc, oracle_skipped = oracles.top_k_bruteforce(entries, ks)
        assert result.accuracies == oracle_acc
        assert result.n_skipped == oracle_skipped


def test_cosine_ties_break_on_image_id_bytes():
    v, w = unit([1.0, 0.0]), unit([0.6, 0.8])
    records = [
        image_record("ann", "a-1", v),
        image_record("ann", "z-9", w),
        image_record("bob", "b-0", w),  # ties with z-9, wins bytewise
    ]
    result = rank_queries(records, ks=[1, 2])
    assert result.query_ids == ("a-1", "z-9")
    assert result.accuracies == {1: 0.0, 2: 1.0}
    assert result.n_skipped == 1


def test_singleton_identities_are_skipped_not_counted():
    records = clustered_records([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], copies=2)
    records.append(image_record("drifter", "drifter-img0", [0.0, 0.0, 1.0]))
    result = rank_queries(records, ks=[1])
    assert result.n_skipped == 1
    assert "drifter-img0" not in result.query_ids
    assert result.accuracies[1] == 1.0


def test_topk_non_decreasing_in_k():
    rng = np.random.default_rng(717)
    for trial in range(10):
        records = population(rng, [3, 3, 2, 4], dim=4)
        accuracies = top_k(records, ks=(1, 2, 3, 4, 6, 8))
        values = [accuracies[k] for k in sorted(accuracies)]
        assert all(a <= b for a, b in zip(values, values[1:]))


def test_retrieval_rejects_bad_input():
    rng = np.random.default_rng(1)
    with pytest.raises(EmptyGalleryError, match="two records"):
        rank_queries(population(rng, [1]))
    with pytest.raises(EmptyGalleryError, match="singleton"):
        rank_queries(population(rng, [1, 1, 1]))
    with pytest.raises(InvalidConfigError, match="k >= 1"):
        rank_queries(population(rng, [2, 2]), ks=[0, 1])
    with pytest.raises(InvalidConfigError, match="k >= 1"):
        rank_queries(population(rng, [2, 2]), ks=[])
    records = population(rng, [2, 2])
    records.append(image_record("odd", records[0].image_id, [1.0, 0.0, 0.0, 0.0, 0.0]))
    with pytest.raises(InvalidConfigError, match="duplicate"):
        rank_queries(records)
    records = population(rng, [2, 2])
    records.append(image_record("zero", "zero-img0", [0.0] * 5))
    with pytest.raises(NonFiniteValueError, match="norm"):
        rank_queries(records)


# --------------------------------------------------------------------------
# scoring


def test_scores_come_positives_first():
    records = population(np.random.default_rng(8), [3, 3], dim=6)
    pairs = generate_pairs(records, seed=0)
    scores, labels = score_pair_set(records, pairs)
    n_pos = len(pairs.positives)
    assert labels[:n_pos].all() and not labels[n_pos:].any()

    vectors = {r.image_id: [float(x) for x in r.vector] for r in records}
    a, b = pairs.positives[0]
    assert scores[0] == pytest.approx(oracles.cosine(vectors[a], vectors[b]), rel=1e-12)
    a, b = pairs.negatives[-1]
    assert scores[-1] == pytest.approx(oracles.cosine(vectors[a], vectors[b]), rel=1e-12)


def test_parallel_scoring_is_bitwise_equal():
    records = population(np.random.default_rng(9), [3] * 10, dim=8)
    pairs = generate_pairs(records, seed=5)
    serial = score_pair_set(records, pairs, chunk_size=7, workers=1)[0]
    threaded = score_pair_set(records, pairs, chunk_size=7, workers=8)[0]
    wide = score_pair_set(records, pairs, chunk_size=128, workers=1)[0]
    assert np.array_equal(serial, threaded)
    assert np.array_equal(serial, wide)


def test_scoring_rejects_bad_input():
    records = population(np.random.default_rng(10), [2, 2], dim=4)
    pairs = generate_pairs(records, seed=0)
    with pytest.raises(InvalidConfigError, match=">= 1"):
        score_pair_set(records, pairs, chunk_size=0)
    with pytest.raises(InvalidConfigError, match=">= 1"):
        score_pair_set(records, pairs, workers=0)
    phantom = PairSet(
        positives=(("pet00-img0", "ghost"),),
        negatives=(("pet00-img0", "pet01-img0"),),
    )
    with pytest.raises(InvalidConfigError, match="unknown image id"):
        score_pair_set(records, phantom)


# --------------------------------------------------------------------------
# full protocol


def test_evaluate_separable_population():
    config = SynthConfig(
        seed=1, n_identities=12, images_per_identity=3, dim_image=16, dim_text=16,
        noise_scale=0.05,
    )
    images, _ = gen_population(config)
    result = evaluate(images, seed=0)
    report = result.report
    assert report.roc_auc == 1.0
    assert report.eer == 0.0
    assert report.top_k == {1: 1.0, 5: 1.0, 10: 1.0}
    assert report.n_pos == report.n_neg == 36
    assert report.n_queries == 36
    assert report.seed == 0
    assert report.config_digest == config_digest(5, 15, 0, [1, 5, 10])
    assert np.isfinite(result.eer_threshold)


def test_evaluate_is_deterministic():
    config = SynthConfig(
        seed=2, n_identities=6, images_per_identity=3, dim_image=8, dim_text=8,
        noise_scale=0.3,
    )
    images, _ = gen_population(config)
    first = evaluate(images, seed=7, workers=4)
    second = evaluate(images, seed=7, workers=1)
    assert first.report == second.report
    assert first.pair_set == second.pair_set
    assert np.array_equal(first.scores, second.scores)


def test_evaluate_surfaces_pair_failures():
    rng = np.random.default_rng(14)
    with pytest.raises(NoPositivePairsError):
        evaluate(population(rng, [5]))


def test_config_digest_is_the_hash_of_the_canonical_payload():
    payload = b'{"usage_cap": 5, "per_identity_cap": 15, "seed": 0, "ks": [1, 5, 10]}'
    expected = hashlib.sha256(payload).hexdigest()
    assert config_digest(5, 15, 0, [10, 1, 5]) == expected  # ks order-insensitive
    assert config_digest(5, 15, 1, [1, 5, 10]) != expected
