"""Balanced identity sampling: every identity appears exactly twice per batch.

An epoch is a seeded shuffled partition of the identity list into groups of
n_identities_per_batch (remainder dropped), and for each identity in a group
two distinct images are drawn uniformly without replacement. Batch size is
therefore always 2 * n_identities_per_batch, which is what the batch loss
requires.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import InvalidConfigError, TooFewIdentitiesError, TooFewImagesError


@dataclass(frozen=True)
class BatchPlan:
    """Identities in batch order, each with its two chosen image ids."""

    entries: tuple[tuple[str, tuple[str, str]], ...]

    @property
    def batch_size(self) -> int:
        return 2 * len(self.entries)


def _bytewise(value: str) -> bytes:
    return value.encode("utf-8")


def plan_epoch(
    population: Mapping[str, Sequence[str]],
    n_identities_per_batch: int,
    seed: int,
) -> list[BatchPlan]:
    """Plan one epoch of balanced batches over {identity: image ids}.

    Deterministic: identities and image lists are put in bytewise order
    before any random draw, so equal populations plan identically whatever
    order the mapping was built in.
    """
    if n_identities_per_batch < 1:
        raise InvalidConfigError("n_identities_per_batch must be >= 1")
    identities = sorted(population, key=_bytewise)
    for identity in identities:
        if len(population[identity]) < 2:
            raise TooFewImagesError(
                f"identity {identity!r} has {len(population[identity])} image(s), needs >= 2"
            )
    if len(identities) < n_identities_per_batch:
        raise TooFewIdentitiesError(
            f"population has {len(identities)} identities, "
            f"batch needs {n_identities_per_batch}"
        )

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    order = rng.permutation(len(identities))
    shuffled = [identities[k] for k in order]

    batches: list[BatchPlan] = []
    n_batches = len(identities) // n_identities_per_batch
    for b in range(n_batches):
        group = shuffled[b * n_identities_per_batch : (b + 1) * n_identities_per_batch]
        entries = []
        for identity in group:
            images = sorted(population[identity], key=_bytewise)
            first, second = rng.choice(len(images), size=2, replace=False)
            entries.append((identity, (images[first], images[second])))
        batches.append(BatchPlan(entries=tuple(entries)))
    return batches
