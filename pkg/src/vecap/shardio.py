"""JSONL record shards and binary embedding matrices.

Record shards are UTF-8 JSON-lines, one :class:`ImageTextRecord` per line.
A shard whose final byte is not ``\\n`` was left behind by an interrupted
writer and must be treated as corrupt.

Embedding files are ``b"VECAPEMB"`` + u32 count + u32 dim (little-endian),
followed by ``count * dim`` little-endian float32 values, row-major.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

FLAG_REFUSAL = "refusal_fallback"
FLAG_TRUNCATED = "alttext_truncated"
FLAG_FAILED = "failed"
KNOWN_FLAGS = frozenset({FLAG_REFUSAL, FLAG_TRUNCATED, FLAG_FAILED})

_FIELDS = ("record_id", "image_ref", "alt_texts", "alt_scores", "vec", "vecap", "flags")
_REQUIRED = ("record_id", "image_ref", "alt_texts")

EMB_MAGIC = b"VECAPEMB"
_EMB_HEADER = struct.Struct("<8sII")


class ShardError(Exception):
    """Base class for shard read/write problems."""


class InvalidRecord(ShardError, ValueError):
    pass


class MissingField(InvalidRecord):
    def __init__(self, name: str):
        super().__init__(f"missing field {name!r}")
        self.name = name


class MalformedLine(ShardError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class CorruptShard(ShardError):
    """The shard does not end with a newline (interrupted write)."""


class EmbeddingFormatError(ShardError):
    pass


class BadMagic(EmbeddingFormatError):
    pass


class DimMismatch(EmbeddingFormatError, ValueError):
    pass


class TruncatedPayload(EmbeddingFormatError):
    pass


@dataclass(frozen=True)
class ImageTextRecord:
    record_id: str
    image_ref: str
    alt_texts: tuple[str, ...]
    alt_scores: tuple[float, ...] | None = None
    vec: str | None = None
    vecap: str | None = None
    flags: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        # accept lists/sets from callers, store immutable versions
        object.__setattr__(self, "alt_texts", tuple(self.alt_texts))
        if self.alt_scores is not None:
            object.__setattr__(self, "alt_scores", tuple(float(s) for s in self.alt_scores))
        object.__setattr__(self, "flags", frozenset(self.flags))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.record_id, str) or not self.record_id:
            raise InvalidRecord("record_id must be a non-empty string")
        if not isinstance(self.image_ref, str):
            raise InvalidRecord("image_ref must be a string")
        if not self.alt_texts:
            raise InvalidRecord("alt_texts must be non-empty")
        for text in self.alt_texts:
            if not isinstance(text, str) or not text.strip():
                raise InvalidRecord("alt_texts entries must be non-empty strings")
        if self.alt_scores is not None and len(self.alt_scores) != len(self.alt_texts):
            raise InvalidRecord(
                f"alt_scores has length {len(self.alt_scores)}, alt_texts has {len(self.alt_texts)}"
            )
        for name in ("vec", "vecap"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise InvalidRecord(f"{name} must be a string")
        if self.vecap is not None and self.vec is None:
            raise InvalidRecord("vecap present without vec")
        unknown = self.flags - KNOWN_FLAGS
        if unknown:
            raise InvalidRecord(f"unknown flags {sorted(unknown)}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "record_id": self.record_id,
            "image_ref": self.image_ref,
            "alt_texts": list(self.alt_texts),
        }
        if self.alt_scores is not None:
            out["alt_scores"] = list(self.alt_scores)
        if self.vec is not None:
            out["vec"] = self.vec
        if self.vecap is not None:
            out["vecap"] = self.vecap
        out["flags"] = sorted(self.flags)
        return out

    @classmethod
    def from_dict(cls, obj: Any) -> "ImageTextRecord":
        if not isinstance(obj, dict):
            raise InvalidRecord("record must be a JSON object")
        for name in _REQUIRED:
            if name not in obj:
                raise MissingField(name)
        extra = set(obj) - set(_FIELDS)
        if extra:
            raise InvalidRecord(f"unknown fields {sorted(extra)}")
        alt_texts = obj["alt_texts"]
        if not isinstance(alt_texts, list):
            raise InvalidRecord("alt_texts must be a list")
        scores = obj.get("alt_scores")
        if scores is not None:
            if not isinstance(scores, list) or not all(
                isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
            ):
                raise InvalidRecord("alt_scores must be a list of numbers")
        flags = obj.get("flags", [])
        if not isinstance(flags, list) or not all(isinstance(f, str) for f in flags):
            raise InvalidRecord("flags must be a list of strings")
        return cls(
            record_id=obj["record_id"],
            image_ref=obj["image_ref"],
            alt_texts=tuple(alt_texts),
            alt_scores=None if scores is None else tuple(scores),
            vec=obj.get("vec"),
            vecap=obj.get("vecap"),
            flags=frozenset(flags),
        )


def record_to_line(rec: ImageTextRecord) -> str:
    return json.dumps(rec.to_dict(), ensure_ascii=False)


class RecordReader:
    """Iterate records from a JSONL shard, skipping and counting bad lines.

    After iteration, ``malformed`` holds one :class:`MalformedLine` per
    skipped line and ``complete`` tells whether the file ended cleanly.
    With ``strict=True`` the first malformed line is raised instead.
    """

    def __init__(self, path: str | os.PathLike, strict: bool = False):
        self.path = Path(path)
        self.strict = strict
        self.malformed: list[MalformedLine] = []
        self.complete = True

    @property
    def skipped(self) -> int:
        return len(self.malformed)

    def __iter__(self) -> Iterator[ImageTextRecord]:
        with open(self.path, "rb") as fh:
            line_no = 0
            for raw in fh:
                line_no += 1
                if not raw.endswith(b"\n"):
                    self.complete = False
                    logger.warning("%s: no terminal newline, shard is corrupt", self.path)
                    if self.strict:
                        raise CorruptShard(f"{self.path}: missing terminal newline")
                if not raw.strip():
                    continue
                try:
                    obj = json.loads(raw.decode("utf-8"))
                    rec = ImageTextRecord.from_dict(obj)
                except (UnicodeDecodeError, json.JSONDecodeError, InvalidRecord) as exc:
                    err = MalformedLine(line_no, str(exc))
                    if self.strict:
                        raise err from exc
                    logger.warning("%s: %s", self.path, err)
                    self.malformed.append(err)
                    continue
                yield rec


def read_records(path: str | os.PathLike, strict: bool = False) -> Iterator[ImageTextRecord]:
    return iter(RecordReader(path, strict=strict))


def write_records(path: str | os.PathLike, records: Iterable[ImageTextRecord]) -> int:
    """Write records as JSONL and return how many were written.

    Sequences are validated up front so nothing is written if any record is
    invalid. If writing is interrupted part-way (including by Ctrl-C), the
    trailing newline of the last complete line is removed so the file reads
    as corrupt.
    """
    if isinstance(records, Sequence):
        for rec in records:
            rec.validate()
    count = 0
    with open(path, "wb") as fh:
        try:
            for rec in records:
                rec.validate()
                fh.write(record_to_line(rec).encode("utf-8") + b"\n")
                count += 1
        except BaseException:
            _mark_partial(fh)
            raise
    return count


def _mark_partial(fh) -> None:
    try:
        fh.flush()
        size = fh.tell()
        if size > 0:
            fh.truncate(size - 1)
        else:
            # an empty file would read as a clean, empty shard
            fh.write(b"{")
    except OSError:
        logger.exception("could not mark partial shard")


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype="<f4")
        if arr.ndim != 2:
            raise DimMismatch(f"expected a 2-d matrix, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise DimMismatch("dim must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def is_normalized(self, atol: float = 1e-5) -> bool:
        norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= atol))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


def write_embeddings(matrix: EmbeddingMatrix | np.ndarray, path: str | os.PathLike) -> None:
    if not isinstance(matrix, EmbeddingMatrix):
        matrix = EmbeddingMatrix(matrix)
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, matrix.count, matrix.dim))
        fh.write(matrix.data.tobytes(order="C"))


def read_embeddings(path: str | os.PathLike, expected_dim: int | None = None) -> EmbeddingMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _EMB_HEADER.size:
        if not blob.startswith(EMB_MAGIC[: len(blob)]) or len(blob) < len(EMB_MAGIC):
            raise BadMagic(f"{path}: not an embedding file")
        raise TruncatedPayload(f"{path}: header is truncated")
    magic, count, dim = _EMB_HEADER.unpack_from(blob)
    if magic != EMB_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if dim == 0:
        raise DimMismatch(f"{path}: dim is 0")
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatch(f"{path}: dim {dim}, expected {expected_dim}")
    want = count * dim * 4
    payload = blob[_EMB_HEADER.size:]
    if len(payload) < want:
        raise TruncatedPayload(f"{path}: header says {count}x{dim}, payload holds {len(payload)} bytes")
    if len(payload) > want:
        raise EmbeddingFormatError(f"{path}: {len(payload) - want} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return EmbeddingMatrix(data)
