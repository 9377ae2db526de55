"""Small builders shared across test modules."""

from __future__ import annotations

import numpy as np

from petverify.core import EmbeddingRecord, Modality


def unit(values):
    arr = np.asarray(values, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def image_record(identity, image, values):
    return EmbeddingRecord(
        identity_id=identity, image_id=image, modality=Modality.IMAGE,
        vector=np.asarray(values, dtype=np.float64),
    )


def balanced_batch(rng, n_identities, dim):
    """Random unit rows labeled identity-balanced: 2 rows per identity."""
    rows = rng.standard_normal((2 * n_identities, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    identities = [f"id{i // 2}" for i in range(2 * n_identities)]
    return rows, identities


def clustered_records(centers, copies, modality=Modality.IMAGE):
    """One record per (identity, copy), all copies identical to the center."""
    records = []
    for index, center in enumerate(centers):
        for copy in range(copies):
            records.append(
                EmbeddingRecord(
                    identity_id=f"id{index}",
                    image_id=f"id{index}-img{copy}",
                    modality=modality,
                    vector=unit(center),
                )
            )
    return records
