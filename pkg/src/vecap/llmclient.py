"""Batch text-generation client.

Wire protocol: ``POST <endpoint>/v1/batch_complete`` with
``{"request_id": str, "prompts": [str, ...]}`` (plus an optional
``"image_refs"`` list for captioning endpoints); a 200 response carries
``{"request_id": str, "completions": [str, ...]}`` in prompt order.
429 and 5xx responses, timeouts and connection failures are retried with
exponential backoff and full jitter; any other status is fatal.
"""
from __future__ import annotations

import itertools
import logging
import os
import random
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import requests

logger = logging.getLogger(__name__)

TOKEN_ENV = "VECAP_LLM_TOKEN"
BATCH_PATH = "/v1/batch_complete"


class LLMClientError(Exception):
    pass


class TransportError(LLMClientError):
    """The endpoint could not be reached or kept failing."""

    def __init__(self, message: str, attempts: int = 0, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class ProtocolError(LLMClientError):
    """The endpoint answered 200 with a body that breaks the protocol."""


class BatchFailed(LLMClientError):
    """A scheduled batch failed; ``start``/``stop`` index the input stream."""

    def __init__(self, start: int, stop: int, cause: Exception):
        super().__init__(f"batch [{start}, {stop}) failed: {cause}")
        self.start = start
        self.stop = stop
        self.cause = cause


@dataclass(frozen=True)
class BatchRequest:
    prompts: tuple[str, ...]
    request_id: str
    image_refs: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompts", tuple(self.prompts))
        if not self.prompts:
            raise ValueError("a batch needs at least one prompt")
        if any(not p for p in self.prompts):
            raise ValueError("empty prompt in batch")
        if self.image_refs is not None:
            object.__setattr__(self, "image_refs", tuple(self.image_refs))
            if len(self.image_refs) != len(self.prompts):
                raise ValueError("image_refs must align with prompts")

    def to_json(self) -> dict:
        body = {"request_id": self.request_id, "prompts": list(self.prompts)}
        if self.image_refs is not None:
            body["image_refs"] = list(self.image_refs)
        return body


@dataclass(frozen=True)
class BatchResponse:
    completions: tuple[str, ...]
    request_id: str
    attempts: int = 1


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 0.25
    max_delay: float = 4.0
    timeout: float = 60.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay < 0 or self.max_delay < 0:
            raise ValueError("delays must be non-negative")

    def backoff(self, retry: int, rng: random.Random) -> float:
        """Full-jitter delay before retry number ``retry`` (0-based)."""
        return rng.uniform(0.0, min(self.max_delay, self.base_delay * 2**retry))


def _retryable(status: int) -> bool:
    return status == 429 or 500 <= status < 600


class LLMClient:
    """Thread-safe client for the batch completion protocol.

    A bearer token is read from ``VECAP_LLM_TOKEN`` unless given explicitly.
    ``sleep`` and ``rng`` are injectable so tests can skip real backoff.
    """

    def __init__(
        self,
        token: str | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._local = threading.local()
        self._ids = itertools.count()

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = requests.Session()
            if self.token:
                sess.headers["Authorization"] = f"Bearer {self.token}"
            self._local.session = sess
        return sess

    def _delay(self, policy: RetryPolicy, retry: int) -> float:
        with self._rng_lock:
            return policy.backoff(retry, self._rng)

    def complete_batch(
        self, endpoint: str, req: BatchRequest, policy: RetryPolicy = RetryPolicy()
    ) -> BatchResponse:
        url = endpoint.rstrip("/") + BATCH_PATH
        last_error = "no attempt made"
        last_status = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                resp = self._session().post(url, json=req.to_json(), timeout=policy.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error, last_status = f"{type(exc).__name__}: {exc}", None
            else:
                if resp.status_code == 200:
                    return self._parse(req, resp, attempt)
                if not _retryable(resp.status_code):
                    raise TransportError(
                        f"{url} returned fatal status {resp.status_code}",
                        attempts=attempt,
                        status=resp.status_code,
                    )
                last_error, last_status = f"status {resp.status_code}", resp.status_code
            if attempt < policy.max_attempts:
                delay = self._delay(policy, attempt - 1)
                logger.info(
                    "request %s attempt %d failed (%s), retrying in %.3fs",
                    req.request_id, attempt, last_error, delay,
                )
                self._sleep(delay)
        raise TransportError(
            f"{url}: giving up after {policy.max_attempts} attempts ({last_error})",
            attempts=policy.max_attempts,
            status=last_status,
        )

    @staticmethod
    def _parse(req: BatchRequest, resp: requests.Response, attempt: int) -> BatchResponse:
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response to {req.request_id} is not JSON") from exc
        if not isinstance(body, dict):
            raise ProtocolError("response body must be a JSON object")
        completions = body.get("completions")
        if not isinstance(completions, list) or not all(isinstance(c, str) for c in completions):
            raise ProtocolError("response lacks a list of string completions")
        if len(completions) != len(req.prompts):
            raise ProtocolError(
                f"{req.request_id}: {len(completions)} completions for {len(req.prompts)} prompts"
            )
        if body.get("request_id") != req.request_id:
            raise ProtocolError(
                f"request_id mismatch: sent {req.request_id!r}, got {body.get('request_id')!r}"
            )
        return BatchResponse(tuple(completions), req.request_id, attempts=attempt)

    def iter_batches(
        self,
        items: Iterable[str],
        batch_size: int,
        workers: int,
        endpoint: str,
        policy: RetryPolicy = RetryPolicy(),
        image_refs: Iterable[str] | None = None,
        id_prefix: str | None = None,
    ) -> Iterator[tuple[int, int, BatchResponse | LLMClientError]]:
        """Yield ``(start, stop, response_or_error)`` per batch, in input order.

        At most ``workers`` batches are in flight at once. Client errors are
        yielded rather than raised so callers can pass failed items through.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if workers < 1:
            raise ValueError("workers must be >= 1")
        prefix = id_prefix or f"req{next(self._ids)}"

        def run(req: BatchRequest) -> BatchResponse:
            return self.complete_batch(endpoint, req, policy)

        batches = _chunk(items, image_refs, batch_size)
        window: deque[tuple[int, int, Future]] = deque()
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="llm-batch") as pool:
            start = 0
            try:
                for n, (prompts, refs) in enumerate(batches):
                    req = BatchRequest(prompts, f"{prefix}-{n}", refs)
                    window.append((start, start + len(prompts), pool.submit(run, req)))
                    start += len(prompts)
                    if len(window) >= workers:
                        yield _settle(*window.popleft())
                while window:
                    yield _settle(*window.popleft())
            finally:
                for _, _, fut in window:
                    fut.cancel()

    def schedule(
        self,
        items: Iterable[str],
        batch_size: int,
        workers: int,
        endpoint: str,
        policy: RetryPolicy = RetryPolicy(),
    ) -> Iterator[str]:
        """Stream completions for ``items`` in input order.

        Raises :class:`BatchFailed` carrying the failing batch's index range.
        """
        for start, stop, result in self.iter_batches(items, batch_size, workers, endpoint, policy):
            if isinstance(result, Exception):
                raise BatchFailed(start, stop, result) from result
            yield from result.completions


def _settle(start: int, stop: int, fut: Future) -> tuple[int, int, BatchResponse | LLMClientError]:
    try:
        return start, stop, fut.result()
    except LLMClientError as exc:
        return start, stop, exc


def _chunk(
    items: Iterable[str], refs: Iterable[str] | None, size: int
) -> Iterator[tuple[list[str], list[str] | None]]:
    it = iter(items)
    ref_it = iter(refs) if refs is not None else None
    while True:
        prompts = list(itertools.islice(it, size))
        if not prompts:
            return
        if ref_it is None:
            yield prompts, None
        else:
            batch_refs = list(itertools.islice(ref_it, len(prompts)))
            if len(batch_refs) != len(prompts):
                raise ValueError("image_refs shorter than prompts")
            yield prompts, batch_refs


def complete_batch(
    endpoint: str, req: BatchRequest, policy: RetryPolicy = RetryPolicy(), client: LLMClient | None = None
) -> BatchResponse:
    return (client or LLMClient()).complete_batch(endpoint, req, policy)


def schedule(
    items: Iterable[str],
    batch_size: int,
    workers: int,
    endpoint: str,
    policy: RetryPolicy = RetryPolicy(),
    client: LLMClient | None = None,
) -> Iterator[str]:
    return (client or LLMClient()).schedule(items, batch_size, workers, endpoint, policy)
