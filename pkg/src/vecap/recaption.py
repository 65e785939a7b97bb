"""Two-stage recaptioning: image captioning (VeC), then LLM fusion (VeCap).

Stage one asks a multimodal captioner for an AltText-independent caption.
Stage two asks a text LLM to fuse the AltText with that caption. Two
failure modes are handled in stage two: over-long AltTexts are truncated
before fusion, and refusals are retried with the generated caption as the
only input.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass

from .llmclient import BatchRequest, LLMClient, LLMClientError, RetryPolicy
from .sampler import hcs_index
from .shardio import (
    FLAG_FAILED,
    FLAG_REFUSAL,
    FLAG_TRUNCATED,
    ImageTextRecord,
    RecordReader,
    write_records,
)

logger = logging.getLogger(__name__)

VEC_PROMPT = "Describe the image concisely, less than 20 words"
FUSION_INSTRUCTION = (
    "Rephrase the following two sentences into one short sentence while adhering to the "
    "provided instructions: Place attributes before noun entities without introducing new "
    'meaning. Do not start with "The image".'
)
DEFAULT_REFUSAL_MARKERS = ("i am sorry", "i'm sorry", "i cannot", "as an ai")


class EmptyVec(ValueError):
    pass


class PipelineError(Exception):
    def __init__(self, record_id: str, cause: Exception):
        super().__init__(f"record {record_id}: {cause}")
        self.record_id = record_id
        self.cause = cause


@dataclass(frozen=True)
class RecaptionConfig:
    max_alttext_chars: int = 300
    refusal_markers: tuple[str, ...] = DEFAULT_REFUSAL_MARKERS
    vec_prompt: str = VEC_PROMPT
    fusion_instruction: str = FUSION_INSTRUCTION

    def __post_init__(self) -> None:
        object.__setattr__(self, "refusal_markers", tuple(m.lower() for m in self.refusal_markers))
        if not self.refusal_markers:
            raise ValueError("refusal_markers must not be empty")
        if self.max_alttext_chars < 20:
            raise ValueError("max_alttext_chars must be >= 20")


@dataclass
class PipelineStats:
    records: int = 0
    enriched: int = 0
    skipped: int = 0
    refusals: int = 0
    truncations: int = 0
    failed: int = 0
    malformed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_vec_prompt() -> str:
    return VEC_PROMPT


def build_fusion_prompt(alt_text: str, vec: str, instruction: str = FUSION_INSTRUCTION) -> str:
    if not vec or not vec.strip():
        raise EmptyVec("fusion needs a generated caption")
    if alt_text:
        return f"{instruction} 1. {alt_text}; 2. {vec}"
    return f"{instruction} 1. {vec}"


def detect_refusal(text: str, markers: Iterable[str] = DEFAULT_REFUSAL_MARKERS) -> bool:
    norm = text.strip().lower().replace("’", "'")
    return any(norm.startswith(m) for m in markers)


def truncate_alttext(alt: str, max_chars: int) -> tuple[str, bool]:
    """Shorten ``alt`` to at most ``max_chars``, preferring a word boundary."""
    if max_chars < 20:
        raise ValueError("max_chars must be >= 20")
    if len(alt) <= max_chars:
        return alt, False
    # a whitespace exactly at max_chars means the first max_chars chars end on a word
    window = alt[: max_chars + 1]
    cut = max((i for i, ch in enumerate(window) if ch.isspace()), default=-1)
    if cut > 0:
        head = alt[:cut].rstrip()
        if head:
            return head, True
    return alt[:max_chars], True


def fusion_alttext(rec: ImageTextRecord) -> str:
    """AltText used for fusion: highest scored if scores exist, else the first."""
    if rec.alt_scores is not None:
        return rec.alt_texts[hcs_index(rec.alt_scores)]
    return rec.alt_texts[0]


def _fusion_input(rec: ImageTextRecord, cfg: RecaptionConfig) -> tuple[str, bool]:
    return truncate_alttext(fusion_alttext(rec), cfg.max_alttext_chars)


def _is_done(rec: ImageTextRecord) -> bool:
    return rec.vec is not None and rec.vecap is not None


def recaption_record(
    rec: ImageTextRecord,
    cfg: RecaptionConfig,
    captioner: str,
    fuser: str,
    client: LLMClient | None = None,
    policy: RetryPolicy = RetryPolicy(),
) -> ImageTextRecord:
    """Enrich one record with ``vec`` and ``vecap``; a no-op if both exist."""
    if _is_done(rec):
        return rec
    client = client or LLMClient()
    try:
        vec = rec.vec
        if vec is None:
            resp = client.complete_batch(
                captioner, BatchRequest([cfg.vec_prompt], f"vec-{rec.record_id}", [rec.image_ref]), policy
            )
            vec = resp.completions[0]
        alt, truncated = _fusion_input(rec, cfg)
        prompt = build_fusion_prompt(alt, vec, cfg.fusion_instruction)
        fused = client.complete_batch(fuser, BatchRequest([prompt], f"fuse-{rec.record_id}"), policy)
        vecap = fused.completions[0]
        refused = detect_refusal(vecap, cfg.refusal_markers)
        if refused:
            retry = build_fusion_prompt("", vec, cfg.fusion_instruction)
            vecap = client.complete_batch(
                fuser, BatchRequest([retry], f"refuse-{rec.record_id}"), policy
            ).completions[0]
            vecap = _settle_refused(vecap, vec, cfg)
    except (LLMClientError, EmptyVec) as exc:
        raise PipelineError(rec.record_id, exc) from exc
    return _enriched(rec, vec, vecap, truncated, refused)


def _settle_refused(vecap: str, vec: str, cfg: RecaptionConfig) -> str:
    # a second refusal on caption-only input: keep the caption itself
    if detect_refusal(vecap, cfg.refusal_markers) or not vecap.strip():
        return vec
    return vecap


def _enriched(rec: ImageTextRecord, vec: str, vecap: str, truncated: bool, refused: bool) -> ImageTextRecord:
    flags = set(rec.flags) - {FLAG_FAILED, FLAG_TRUNCATED, FLAG_REFUSAL}
    if truncated:
        flags.add(FLAG_TRUNCATED)
    if refused:
        flags.add(FLAG_REFUSAL)
    return dataclasses.replace(rec, vec=vec, vecap=vecap, flags=frozenset(flags))


def _failed(rec: ImageTextRecord) -> ImageTextRecord:
    return dataclasses.replace(rec, flags=rec.flags | {FLAG_FAILED})


@dataclass
class _Work:
    rec: ImageTextRecord
    vec: str | None = None
    truncated: bool = False
    vecap: str | None = None
    refused: bool = False
    error: Exception | None = None


class ShardRecaptioner:
    """Batched enrichment of record chunks through the two endpoints."""

    def __init__(
        self,
        cfg: RecaptionConfig,
        captioner: str,
        fuser: str,
        client: LLMClient | None = None,
        batch_size: int = 64,
        workers: int = 4,
        policy: RetryPolicy = RetryPolicy(),
    ):
        self.cfg = cfg
        self.captioner = captioner
        self.fuser = fuser
        self.client = client or LLMClient()
        self.batch_size = batch_size
        self.workers = workers
        self.policy = policy
        self.stats = PipelineStats()

    def _complete(
        self, endpoint: str, jobs: list[_Work], prompts: list[str], tag: str,
        image_refs: list[str] | None = None,
    ) -> Iterator[tuple[_Work, str | None]]:
        batches = self.client.iter_batches(
            prompts, self.batch_size, self.workers, endpoint, self.policy,
            image_refs=image_refs, id_prefix=tag,
        )
        for start, stop, result in batches:
            for offset, job in enumerate(jobs[start:stop]):
                if isinstance(result, Exception):
                    job.error = result
                    yield job, None
                else:
                    yield job, result.completions[offset]

    def process(self, chunk: Sequence[ImageTextRecord], chunk_no: int = 0) -> list[ImageTextRecord]:
        jobs = [_Work(rec, vec=rec.vec) for rec in chunk]
        todo = [j for j in jobs if not _is_done(j.rec)]

        need_vec = [j for j in todo if j.vec is None]
        if need_vec:
            prompts = [self.cfg.vec_prompt] * len(need_vec)
            refs = [j.rec.image_ref for j in need_vec]
            for job, text in self._complete(self.captioner, need_vec, prompts, f"c{chunk_no}-vec", refs):
                if text is not None:
                    if text.strip():
                        job.vec = text
                    else:
                        job.error = EmptyVec("captioner returned an empty caption")

        fuse = [j for j in todo if j.error is None]
        prompts = []
        for job in fuse:
            alt, job.truncated = _fusion_input(job.rec, self.cfg)
            prompts.append(build_fusion_prompt(alt, job.vec, self.cfg.fusion_instruction))
        if fuse:
            for job, text in self._complete(self.fuser, fuse, prompts, f"c{chunk_no}-fuse"):
                if text is not None:
                    job.vecap = text
                    job.refused = detect_refusal(text, self.cfg.refusal_markers)

        refused = [j for j in fuse if j.error is None and j.refused]
        if refused:
            prompts = [build_fusion_prompt("", j.vec, self.cfg.fusion_instruction) for j in refused]
            for job, text in self._complete(self.fuser, refused, prompts, f"c{chunk_no}-refusal"):
                if text is not None:
                    job.vecap = _settle_refused(text, job.vec, self.cfg)

        out = []
        for job in jobs:
            self.stats.records += 1
            if _is_done(job.rec):
                self.stats.skipped += 1
                out.append(job.rec)
            elif job.error is not None:
                self.stats.failed += 1
                logger.warning("record %s failed: %s", job.rec.record_id, job.error)
                out.append(_failed(job.rec))
            else:
                self.stats.enriched += 1
                self.stats.refusals += job.refused
                self.stats.truncations += job.truncated
                out.append(_enriched(job.rec, job.vec, job.vecap, job.truncated, job.refused))
        return out

    def run(self, records: Iterable[ImageTextRecord], chunk_size: int | None = None) -> Iterator[ImageTextRecord]:
        chunk_size = chunk_size or self.batch_size * self.workers * 4
        chunk: list[ImageTextRecord] = []
        chunk_no = 0
        for rec in records:
            chunk.append(rec)
            if len(chunk) >= chunk_size:
                yield from self.process(chunk, chunk_no)
                chunk, chunk_no = [], chunk_no + 1
        if chunk:
            yield from self.process(chunk, chunk_no)


def recaption_shard(
    in_path: str | os.PathLike,
    out_path: str | os.PathLike,
    cfg: RecaptionConfig,
    captioner: str,
    fuser: str,
    client: LLMClient | None = None,
    batch_size: int = 64,
    workers: int = 4,
    policy: RetryPolicy = RetryPolicy(),
) -> PipelineStats:
    """Enrich every record of ``in_path`` and write them, in order, to ``out_path``.

    Per-record endpoint failures never abort the shard: such records are
    written unchanged apart from a ``failed`` flag. I/O errors propagate.
    """
    reader = RecordReader(in_path)
    runner = ShardRecaptioner(cfg, captioner, fuser, client, batch_size, workers, policy)
    write_records(out_path, runner.run(reader))
    runner.stats.malformed = reader.skipped
    return runner.stats
