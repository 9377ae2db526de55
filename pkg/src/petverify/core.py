"""Shared domain types for embedding stores, pair protocols and metric reports.

Everything downstream (stores, samplers, losses, fusion, evaluation) speaks in
terms of these records and configs. The types are deliberately behavior-free:
constructors only normalize layout, and the validate_* helpers enforce the
invariants that the binary store and the evaluation protocol rely on.

Identity and image ids are opaque UTF-8 strings; whenever an ordering is
needed it is bytewise on the UTF-8 encoding (plain ``sorted`` on str matches
this for the id alphabets we emit, but comparisons are done on bytes to keep
the contract exact).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray


# --------------------------------------------------------------------------
# error vocabulary
#
# Every domain failure maps to one of these, each with a stable snake_case
# code that the CLI reports in its machine-readable error envelope.


class PetverifyError(Exception):
    """Base class for all domain errors."""

    code = "error"


class DimMismatchError(PetverifyError):
    code = "dim_mismatch"


class NonFiniteValueError(PetverifyError):
    code = "non_finite_value"


class EmptyIdError(PetverifyError):
    code = "empty_id"


class EmptyTokenSequenceError(PetverifyError):
    code = "empty_token_sequence"


class MixedDimsError(PetverifyError):
    code = "mixed_dims"


class StoreIOError(PetverifyError):
    code = "io_failure"


class BadMagicError(PetverifyError):
    code = "bad_magic"


class UnsupportedVersionError(PetverifyError):
    code = "unsupported_version"


class TruncatedFileError(PetverifyError):
    code = "truncated_file"


class InvalidConfigError(PetverifyError):
    code = "invalid_config"


class TooFewImagesError(PetverifyError):
    code = "too_few_images"


class TooFewIdentitiesError(PetverifyError):
    code = "too_few_identities"


class EmptyPairListError(PetverifyError):
    code = "empty_pair_list"


class UnbalancedBatchError(PetverifyError):
    code = "unbalanced_batch"


class NotNormalizedError(PetverifyError):
    code = "not_normalized"


class StrategyMismatchError(PetverifyError):
    code = "strategy_mismatch"


class ShapeMismatchError(PetverifyError):
    code = "shape_mismatch"


class NoPositivePairsError(PetverifyError):
    code = "no_positive_pairs"


class DegenerateLabelsError(PetverifyError):
    code = "degenerate_labels"


class EmptyGalleryError(PetverifyError):
    code = "empty_gallery"


class LengthMismatchError(PetverifyError):
    code = "length_mismatch"


# --------------------------------------------------------------------------
# records


class Modality(enum.Enum):
    """What a record's vector payload represents.

    The value doubles as the wire byte in the binary store. The enum is
    closed: store readers reject any other byte.
    """

    IMAGE = 0
    TEXT_TOKENS = 1
    FUSED = 2


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One embedding: a single vector, or a token sequence for text.

    ``vector`` is float32, shape (dim,) for IMAGE and FUSED records and
    (n_tokens, dim) for TEXT_TOKENS records. The array is copied on
    construction and marked read-only.
    """

    identity_id: str
    image_id: str
    modality: Modality
    vector: NDArray[np.float32]
    dim: int = -1  # inferred from vector when left at the sentinel

    def __post_init__(self) -> None:
        arr = np.array(self.vector, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "vector", arr)
        if self.dim < 0:
            inferred = arr.shape[-1] if arr.ndim > 0 else 0
            object.__setattr__(self, "dim", int(inferred))

    @property
    def token_count(self) -> int:
        return self.vector.shape[0] if self.vector.ndim == 2 else 1


def validate_record(record: EmbeddingRecord) -> None:
    """Check every record invariant; raise the specific error on the first hit.

    Total over all inputs: a record either passes or raises one of
    EmptyIdError, NonFiniteValueError, EmptyTokenSequenceError or
    DimMismatchError. Never returns a partial verdict.
    """
    if len(record.identity_id) == 0 or len(record.image_id) == 0:
        raise EmptyIdError(
            f"record {record.image_id!r}: identity_id and image_id must be non-empty"
        )
    vec = record.vector
    if record.modality is Modality.TEXT_TOKENS:
        if vec.ndim != 2:
            raise DimMismatchError(
                f"record {record.image_id!r}: token sequence must be 2-d, got {vec.ndim}-d"
            )
        if vec.shape[0] == 0:
            raise EmptyTokenSequenceError(
                f"record {record.image_id!r}: token sequence is empty"
            )
    else:
        if vec.ndim != 1:
            raise DimMismatchError(
                f"record {record.image_id!r}: single-vector modality must be 1-d, got {vec.ndim}-d"
            )
    if vec.shape[-1] != record.dim or record.dim <= 0:
        raise DimMismatchError(
            f"record {record.image_id!r}: vector width {vec.shape[-1]} != dim {record.dim}"
        )
    if not np.all(np.isfinite(vec)):
        raise NonFiniteValueError(
            f"record {record.image_id!r}: vector contains NaN or Inf"
        )


@dataclass(frozen=True, eq=False)
class Triplet:
    """Anchor/positive share an identity; the negative must not."""

    anchor: EmbeddingRecord
    positive: EmbeddingRecord
    negative: EmbeddingRecord

    def __post_init__(self) -> None:
        if self.anchor.identity_id != self.positive.identity_id:
            raise ValueError("anchor and positive must share identity_id")
        if self.negative.identity_id == self.anchor.identity_id:
            raise ValueError("negative must come from a different identity")


# --------------------------------------------------------------------------
# pair sets


@dataclass(frozen=True)
class PairSet:
    """Verification pairs under the usage caps they were generated with.

    positives hold same-identity image id pairs, negatives cross-identity
    pairs. Caps travel with the data so a pair set is checkable on its own.
    """

    positives: tuple[tuple[str, str], ...]
    negatives: tuple[tuple[str, str], ...]
    usage_cap: int = 5
    per_identity_cap: int = 15
    seed: int = 0


def pair_set_violations(
    pairs: PairSet, identity_by_image: Mapping[str, str]
) -> list[str]:
    """Standalone verifier: list every cap/label violation, empty means valid.

    Checks that positives are same-identity, negatives cross-identity, no
    image exceeds usage_cap across positives + negatives together, no
    identity exceeds per_identity_cap positive pairs, and no pair repeats
    (unordered).
    """
    violations: list[str] = []
    usage: dict[str, int] = {}
    per_identity: dict[str, int] = {}
    seen: set[frozenset[str]] = set()

    def bump(image_id: str) -> None:
        usage[image_id] = usage.get(image_id, 0) + 1

    for a, b in pairs.positives:
        if identity_by_image.get(a) != identity_by_image.get(b):
            violations.append(f"positive pair ({a!r}, {b!r}) spans identities")
        key = frozenset((a, b))
        if a == b or key in seen:
            violations.append(f"duplicate or degenerate pair ({a!r}, {b!r})")
        seen.add(key)
        bump(a)
        bump(b)
        ident = identity_by_image.get(a, "")
        per_identity[ident] = per_identity.get(ident, 0) + 1
    for a, b in pairs.negatives:
        if identity_by_image.get(a) == identity_by_image.get(b):
            violations.append(f"negative pair ({a!r}, {b!r}) shares an identity")
        key = frozenset((a, b))
        if a == b or key in seen:
            violations.append(f"duplicate or degenerate pair ({a!r}, {b!r})")
        seen.add(key)
        bump(a)
        bump(b)

    for image_id, count in usage.items():
        if count > pairs.usage_cap:
            violations.append(
                f"image {image_id!r} used {count} times, cap {pairs.usage_cap}"
            )
    for ident, count in per_identity.items():
        if count > pairs.per_identity_cap:
            violations.append(
                f"identity {ident!r} has {count} positive pairs, cap {pairs.per_identity_cap}"
            )
    return violations


# --------------------------------------------------------------------------
# reports and configs


@dataclass(frozen=True)
class MetricReport:
    """Verification metrics for one evaluated store."""

    roc_auc: float
    eer: float
    top_k: Mapping[int, float]
    n_pos: int
    n_neg: int
    n_queries: int
    seed: int
    config_digest: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "top_k", dict(self.top_k))


@dataclass(frozen=True)
class LossConfig:
    """Weights and tolerances of the combined metric-learning objective."""

    margin: float = 0.45
    pos_tolerance: float = 0.01
    neg_tolerance: float = 0.01
    triplet_weight: float = 1.0
    variance_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise InvalidConfigError("margin must be >= 0")
        if self.pos_tolerance < 0 or self.neg_tolerance < 0:
            raise InvalidConfigError("tolerances must be >= 0")


def identity_index(
    records: Sequence[EmbeddingRecord],
) -> dict[str, list[EmbeddingRecord]]:
    """Group records by identity, preserving record order within a group."""
    by_identity: dict[str, list[EmbeddingRecord]] = {}
    for record in records:
        by_identity.setdefault(record.identity_id, []).append(record)
    return by_identity
