import numpy as np
import pytest

from petverify.core import (
    InvalidConfigError,
    TooFewIdentitiesError,
    TooFewImagesError,
)
from petverify.sampler import plan_epoch


def population(n_identities, images_per_identity):
    return {
        f"id{i:03d}": [f"id{i:03d}-img{j}" for j in range(images_per_identity)]
        for i in range(n_identities)
    }


def assert_balanced(batches, population_map, n_per_batch):
    for batch in batches:
        assert batch.batch_size == 2 * n_per_batch
        identities = [identity for identity, _ in batch.entries]
        assert len(set(identities)) == n_per_batch
        for identity, (first, second) in batch.entries:
            assert first != second
            assert first in population_map[identity]
            assert second in population_map[identity]


def test_exact_partition_of_four_identities():
    pop = population(4, 2)
    batches = plan_epoch(pop, 2, seed=0)
    assert len(batches) == 2
    assert_balanced(batches, pop, 2)
    covered = {identity for batch in batches for identity, _ in batch.entries}
    assert covered == set(pop)


def test_full_population_single_batch_of_116():
    pop = population(58, 3)
    batches = plan_epoch(pop, 58, seed=1)
    assert len(batches) == 1
    assert batches[0].batch_size == 116
    assert_balanced(batches, pop, 58)


def test_balance_holds_across_many_seeded_epochs():
    pop = population(13, 4)
    for seed in range(200):
        batches = plan_epoch(pop, 5, seed=seed)
        assert len(batches) == 2  # 13 // 5, remainder of 3 dropped
        assert_balanced(batches, pop, 5)
        identities = [i for b in batches for i, _ in b.entries]
        assert len(identities) == len(set(identities))


def test_every_image_eventually_selected():
    # 7 images per identity, 200 epochs: each image should surface
    pop = population(3, 7)
    seen = {image for images in pop.values() for image in images}
    picked = set()
    for epoch in range(200):
        for batch in plan_epoch(pop, 3, seed=epoch):
            for _, (first, second) in batch.entries:
                picked.add(first)
                picked.add(second)
    assert picked == seen


def test_remainder_identities_rotate_with_the_seed():
    pop = population(5, 2)
    dropped = []
    for seed in range(30):
        batches = plan_epoch(pop, 2, seed=seed)
        covered = {identity for batch in batches for identity, _ in batch.entries}
        dropped.append(next(iter(set(pop) - covered)))
    # with 30 shuffles every identity should get dropped at least once
    assert set(dropped) == set(pop)


def test_determinism_and_seed_sensitivity():
    pop = population(10, 3)
    first = plan_epoch(pop, 5, seed=7)
    second = plan_epoch(pop, 5, seed=7)
    assert first == second
    assert any(plan_epoch(pop, 5, seed=s) != first for s in range(5))


def test_insertion_order_does_not_matter():
    pop = population(6, 2)
    reversed_pop = dict(reversed(list(pop.items())))
    assert plan_epoch(pop, 3, seed=4) == plan_epoch(reversed_pop, 3, seed=4)


def test_error_cases():
    with pytest.raises(TooFewImagesError):
        plan_epoch({"a": ["a-1"], "b": ["b-1", "b-2"]}, 1, seed=0)
    with pytest.raises(TooFewIdentitiesError):
        plan_epoch(population(3, 2), 4, seed=0)
    with pytest.raises(InvalidConfigError):
        plan_epoch(population(3, 2), 0, seed=0)


def test_image_choice_is_roughly_uniform():
    # over many epochs each of an identity's 4 images is used about equally
    pop = population(2, 4)
    counts = {image: 0 for image in pop["id000"]}
    for seed in range(400):
        for batch in plan_epoch(pop, 2, seed=seed):
            for identity, pair in batch.entries:
                if identity == "id000":
                    for image in pair:
                        counts[image] += 1
    total = sum(counts.values())
    assert total == 2 * 400
    expected = total / 4
    for image, count in counts.items():
        assert abs(count - expected) < 5 * np.sqrt(expected), counts
