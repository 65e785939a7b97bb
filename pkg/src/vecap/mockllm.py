"""Deterministic in-process server speaking the batch completion protocol.

Behaviour is driven by a :class:`MockScript`: an ordered list of rules, each
matching prompts by substring. The first rule whose substring occurs in a
prompt (and whose ``times`` budget is not spent) fires; if none does, the
prompt is echoed back. A rule either returns text, returns the canned
refusal, fails the whole request with an HTTP status, or drops the prompt's
completion (to provoke protocol errors).

Response templates may contain ``{prompt}`` and ``{image_ref}``.

Every request is logged with server-side timestamps so tests can check
attempt counts, batch sizes and concurrency.
"""
from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

logger = logging.getLogger(__name__)

REFUSAL_TEXT = "I am sorry that I cannot comply."


class BindError(OSError):
    pass


@dataclass
class MockRule:
    match: str = ""
    respond: str | None = None
    refusal: bool = False
    status: int | None = None
    drop: bool = False
    times: int | None = None
    delay_ms: float = 0.0
    jitter_ms: float = 0.0

    def __post_init__(self) -> None:
        kinds = sum([self.respond is not None, self.refusal, self.status is not None, self.drop])
        if kinds > 1:
            raise ValueError("a rule may set only one of respond/refusal/status/drop")
        if self.times is not None and self.times < 0:
            raise ValueError("times must be non-negative")

    def render(self, prompt: str, image_ref: str | None) -> str:
        if self.refusal:
            return REFUSAL_TEXT
        if self.respond is None:
            return prompt
        return self.respond.replace("{prompt}", prompt).replace("{image_ref}", image_ref or "")


@dataclass
class MockScript:
    rules: list[MockRule] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "MockScript":
        unknown = set(obj) - {"rules", "seed"}
        if unknown:
            raise ValueError(f"unknown script keys {sorted(unknown)}")
        return cls(rules=[MockRule(**r) for r in obj.get("rules", [])], seed=int(obj.get("seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RequestRecord:
    seq: int
    request_id: str
    prompts: tuple[str, ...]
    status: int
    started: float
    finished: float

    @property
    def batch_size(self) -> int:
        return len(self.prompts)


class _Engine:
    """Rule evaluation and request bookkeeping shared by handler threads."""

    def __init__(self, script: MockScript):
        self.script = script
        self._remaining = [r.times for r in script.rules]
        self._rng = random.Random(script.seed)
        self._lock = threading.Lock()
        self._log: list[RequestRecord] = []
        self._in_flight = 0
        self.max_in_flight = 0

    def enter(self) -> None:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)

    def leave(self, record: RequestRecord) -> None:
        with self._lock:
            self._in_flight -= 1
            self._log.append(
                RequestRecord(len(self._log), record.request_id, record.prompts,
                              record.status, record.started, record.finished)
            )

    def snapshot(self) -> list[RequestRecord]:
        with self._lock:
            return list(self._log)

    def plan(self, prompts: list[str]) -> tuple[list[MockRule | None], float]:
        chosen: list[MockRule | None] = []
        delay = 0.0
        request_status_used: set[int] = set()
        with self._lock:
            for prompt in prompts:
                rule_idx = None
                for i, rule in enumerate(self.script.rules):
                    if rule.match not in prompt:
                        continue
                    if self._remaining[i] is not None and self._remaining[i] <= 0:
                        continue
                    rule_idx = i
                    break
                if rule_idx is None:
                    chosen.append(None)
                    continue
                rule = self.script.rules[rule_idx]
                # status rules spend their budget once per request, others once per prompt
                if self._remaining[rule_idx] is not None:
                    if rule.status is None or rule_idx not in request_status_used:
                        self._remaining[rule_idx] -= 1
                if rule.status is not None:
                    request_status_used.add(rule_idx)
                jitter = self._rng.uniform(0.0, rule.jitter_ms) if rule.jitter_ms else 0.0
                delay = max(delay, rule.delay_ms + jitter)
                chosen.append(rule)
        return chosen, delay / 1000.0


class _Handler(BaseHTTPRequestHandler):
    engine: _Engine  # set on the per-server subclass

    def log_message(self, fmt, *args):
        logger.debug("mockllm: " + fmt, *args)

    def _reply(self, status: int, body: dict | None = None) -> None:
        payload = json.dumps(body if body is not None else {"error": HTTPStatus(status).phrase}).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_POST(self):
        engine = self.engine
        started = time.monotonic()
        engine.enter()
        request_id, prompts, status, body = "", (), 500, None
        try:
            request_id, prompts, status, body = self._handle()
        finally:
            # logged before replying so a client never sees an unlogged response
            engine.leave(RequestRecord(0, request_id, prompts, status, started, time.monotonic()))
        self._reply(status, body)

    def _handle(self) -> tuple[str, tuple[str, ...], int, dict | None]:
        if self.path.rstrip("/") != "/v1/batch_complete":
            return "", (), 404, None
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length))
            request_id = str(body["request_id"])
            prompts = tuple(body["prompts"])
            refs = body.get("image_refs") or [None] * len(prompts)
        except (ValueError, KeyError, TypeError):
            return "", (), 400, None
        rules, delay = self.engine.plan(list(prompts))
        if delay:
            time.sleep(delay)
        failing = next((r.status for r in rules if r is not None and r.status is not None), None)
        if failing is not None:
            return request_id, prompts, failing, None
        completions = []
        for prompt, ref, rule in zip(prompts, refs, rules):
            if rule is None:
                completions.append(prompt)
            elif not rule.drop:
                completions.append(rule.render(prompt, ref))
        return request_id, prompts, 200, {"request_id": request_id, "completions": completions}


class MockLLMServer:
    """Handle for a running mock; use as a context manager or call ``close``."""

    def __init__(self, script: MockScript | None = None, port: int = 0, host: str = "127.0.0.1"):
        self.engine = _Engine(script or MockScript())
        handler = type("MockHandler", (_Handler,), {"engine": self.engine})
        try:
            self._server = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from exc
        # non-daemon handler threads so close() drains in-flight requests
        self._server.daemon_threads = False
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05}, name="mockllm", daemon=True
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host = self._server.server_address[0]
        return f"http://{host}:{self.port}"

    @property
    def log(self) -> list[RequestRecord]:
        return self.engine.snapshot()

    def attempts(self, request_id: str) -> int:
        return sum(1 for r in self.log if r.request_id == request_id)

    def max_overlap(self) -> int:
        """Largest number of requests whose logged intervals overlap."""
        events = []
        for r in self.log:
            events.append((r.started, 1))
            events.append((r.finished, -1))
        # ends sort before starts at equal timestamps
        events.sort(key=lambda e: (e[0], e[1]))
        best = cur = 0
        for _, delta in events:
            cur += delta
            best = max(best, cur)
        return best

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self) -> "MockLLMServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(script: MockScript | None = None, port: int = 0, host: str = "127.0.0.1") -> MockLLMServer:
    return MockLLMServer(script, port=port, host=host)
