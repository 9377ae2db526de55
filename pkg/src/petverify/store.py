"""Binary embedding container and deterministic JSON serialization.

The .pvem container and every JSON artifact (metric reports, loss histories,
pair sets, manifests) are specified byte-for-byte in FORMATS.md at the repo
root. Two rules make outputs reproducible across runs:

* all multi-byte integers and floats in .pvem are little-endian, and
* JSON is emitted by the canonical writer below (fixed key order, floats at
  17 significant digits) so identical values give identical bytes.

Stores load fully into memory; there is no streaming or mmap path.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import (
    BadMagicError,
    EmbeddingRecord,
    MetricReport,
    MixedDimsError,
    Modality,
    StoreIOError,
    TruncatedFileError,
    UnsupportedVersionError,
    validate_record,
)

MAGIC = b"PVEM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count
_U16 = struct.Struct("<H")


# --------------------------------------------------------------------------
# atomic file helpers
#
# Outputs are written to a temp file in the target directory and renamed into
# place, so a failure mid-write never leaves a partial file behind.


def write_bytes_atomic(path: str | os.PathLike[str], data: bytes) -> None:
    target = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp, target)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise StoreIOError(f"cannot write {target}: {exc}") from exc


def write_text_atomic(path: str | os.PathLike[str], text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def file_digest(path: str | os.PathLike[str]) -> str:
    """sha256 hex digest of a file's bytes."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# .pvem writing


def _encode_id(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"id longer than u16 length prefix allows: {len(raw)} bytes")
    return _U16.pack(len(raw)) + raw


def store_bytes(
    records: Sequence[EmbeddingRecord], *, dim: int | None = None
) -> bytes:
    """Serialize records to .pvem bytes.

    All records must validate, share one dim and have unique image ids. For
    an empty record list the header still needs a dim; it defaults to 1.
    """
    if records:
        inferred = records[0].dim
        if dim is not None and dim != inferred:
            raise MixedDimsError(f"explicit dim {dim} != record dim {inferred}")
        dim = inferred
    elif dim is None:
        dim = 1
    if dim < 1:
        raise ValueError(f"store dim must be >= 1, got {dim}")

    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(records))]
    seen: set[str] = set()
    for record in records:
        validate_record(record)
        if record.dim != dim:
            raise MixedDimsError(
                f"record {record.image_id!r} has dim {record.dim}, store dim {dim}"
            )
        if record.image_id in seen:
            raise ValueError(f"duplicate image_id {record.image_id!r} in store")
        seen.add(record.image_id)
        token_count = record.token_count
        if token_count > 0xFFFF:
            raise ValueError(f"token count {token_count} exceeds u16")
        chunks.append(_encode_id(record.identity_id))
        chunks.append(_encode_id(record.image_id))
        chunks.append(bytes([record.modality.value]))
        chunks.append(_U16.pack(token_count))
        chunks.append(np.ascontiguousarray(record.vector, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_store(
    records: Sequence[EmbeddingRecord],
    path: str | os.PathLike[str],
    *,
    dim: int | None = None,
) -> int:
    """Write records to a .pvem file; returns the byte count written."""
    blob = store_bytes(records, dim=dim)
    write_bytes_atomic(path, blob)
    return len(blob)


# --------------------------------------------------------------------------
# .pvem reading


def _take(data: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    end = offset + n
    if end > len(data):
        raise TruncatedFileError(f"file ends inside {what} at offset {offset}")
    return data[offset:end], end


def _take_id(data: bytes, offset: int, what: str) -> tuple[str, int]:
    raw_len, offset = _take(data, offset, 2, f"{what} length")
    (n,) = _U16.unpack(raw_len)
    raw, offset = _take(data, offset, n, what)
    try:
        return raw.decode("utf-8"), offset
    except UnicodeDecodeError as exc:
        raise StoreIOError(f"{what} is not valid UTF-8 at offset {offset}") from exc


def records_from_bytes(data: bytes) -> list[EmbeddingRecord]:
    """Parse .pvem bytes; strict about every structural invariant."""
    if len(data) < 4:
        raise TruncatedFileError("file shorter than the 4-byte magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    _, version, dim, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"version {version} not supported (expected {FORMAT_VERSION})"
        )
    if dim < 1:
        raise StoreIOError(f"header dim must be >= 1, got {dim}")

    records: list[EmbeddingRecord] = []
    offset = _HEADER.size
    for index in range(count):
        identity_id, offset = _take_id(data, offset, f"record {index} identity_id")
        image_id, offset = _take_id(data, offset, f"record {index} image_id")
        raw_mod, offset = _take(data, offset, 1, f"record {index} modality")
        try:
            modality = Modality(raw_mod[0])
        except ValueError as exc:
            raise StoreIOError(
                f"record {index} has unknown modality byte {raw_mod[0]}"
            ) from exc
        raw_tc, offset = _take(data, offset, 2, f"record {index} token count")
        (token_count,) = _U16.unpack(raw_tc)
        if modality is not Modality.TEXT_TOKENS and token_count != 1:
            raise StoreIOError(
                f"record {index}: token_count {token_count} on single-vector modality"
            )
        payload, offset = _take(
            data, offset, 4 * token_count * dim, f"record {index} payload"
        )
        vec = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True)
        if modality is Modality.TEXT_TOKENS:
            vec = vec.reshape(token_count, dim)
        record = EmbeddingRecord(identity_id, image_id, modality, vec, dim)
        validate_record(record)
        records.append(record)
    if offset != len(data):
        raise TruncatedFileError(
            f"{len(data) - offset} trailing bytes after the declared {count} records"
        )
    return records


def read_store(path: str | os.PathLike[str]) -> list[EmbeddingRecord]:
    """Load a .pvem file fully into memory."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read {path}: {exc}") from exc
    return records_from_bytes(data)


# --------------------------------------------------------------------------
# canonical JSON
#
# json.dumps would work, but its float repr is shortest-roundtrip rather than
# a fixed width, and key order would depend on dict construction. A dedicated
# writer keeps every emitted artifact byte-stable for identical values.


def format_float(value: float) -> str:
    """17 significant digits, always spelled as a float, round-trip exact."""
    x = float(value)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    text = format(x, ".17g")
    if not any(c in text for c in ".eE"):
        text += ".0"
    return text


def canonical_json(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if value is None:
        return "null"
    if isinstance(value, dict):
        items = ", ".join(
            f"{json.dumps(str(k), ensure_ascii=False)}: {canonical_json(v)}"
            for k, v in value.items()
        )
        return "{" + items + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(canonical_json(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} canonically")


def write_json(path: str | os.PathLike[str], value: Any) -> None:
    write_text_atomic(path, canonical_json(value) + "\n")


def read_json(path: str | os.PathLike[str]) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StoreIOError(f"cannot read {path}: {exc}") from exc
    return json.loads(text)


# --------------------------------------------------------------------------
# metric report i/o


def report_to_dict(report: MetricReport) -> dict[str, Any]:
    return {
        "roc_auc": float(report.roc_auc),
        "eer": float(report.eer),
        "top_k": {str(k): float(report.top_k[k]) for k in sorted(report.top_k)},
        "n_pos": int(report.n_pos),
        "n_neg": int(report.n_neg),
        "n_queries": int(report.n_queries),
        "seed": int(report.seed),
        "config_digest": report.config_digest,
    }


def report_from_dict(payload: dict[str, Any]) -> MetricReport:
    return MetricReport(
        roc_auc=float(payload["roc_auc"]),
        eer=float(payload["eer"]),
        top_k={int(k): float(v) for k, v in payload["top_k"].items()},
        n_pos=int(payload["n_pos"]),
        n_neg=int(payload["n_neg"]),
        n_queries=int(payload["n_queries"]),
        seed=int(payload["seed"]),
        config_digest=str(payload["config_digest"]),
    )


def write_report(report: MetricReport, path: str | os.PathLike[str]) -> None:
    write_json(path, report_to_dict(report))


def read_report(path: str | os.PathLike[str]) -> MetricReport:
    return report_from_dict(read_json(path))
