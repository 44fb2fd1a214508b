"""Text generation backends: an OpenAI-compatible HTTP client and an offline mock.

This is the only module that talks to the network. Every call goes through
``Backend.generate``, which enforces the context-window ceiling before any
request is made, caps concurrency, and journals the call.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone

import httpx

from .segmentation import TokenizerSpec, count_tokens, max_prefix_end, split_sentences

logger = logging.getLogger(__name__)

MOCK_STYLES = ("echo-head", "cite-all", "cite-subset")
_FENCED = re.compile(r"^---\n(.*?)\n---$", re.MULTILINE | re.DOTALL)
_LABEL_AT_LINE_END = re.compile(r"\s*\[(\d+)\][ \t]*(?=\n|$)")
_ANY_MARKER = re.compile(r"\[[^\[\]]*\]")


@dataclass
class BackendConfig:
    kind: str = "mock"
    base_url: str = "http://localhost:8000/v1"
    model: str = "local-model"
    max_output_tokens: int = 1200
    temperature: float = 0.0
    request_timeout: float = 120.0
    max_retries: int = 3
    parallelism: int = 4
    context_window: int = 128_000
    api_key_env: str = "CAHM_API_KEY"
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    mock_style: str = "echo-head"
    mock_sentences: int = 3
    mock_fixed_tokens: int | None = None

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.mock_style not in MOCK_STYLES:
            raise ValueError(f"unknown mock style {self.mock_style!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> BackendConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class GenRequest:
    prompt: str
    tag: str = ""


@dataclass(frozen=True)
class GenResult:
    text: str
    prompt_tokens: int
    output_tokens: int
    latency: float = 0.0
    retries: int = 0


class BackendError(RuntimeError):
    def __init__(self, message: str, tag: str = ""):
        super().__init__(f"[{tag}] {message}" if tag else message)
        self.tag = tag


class ContextOverflowError(BackendError):
    pass


class NonRetryableError(BackendError):
    def __init__(self, message: str, tag: str = "", status: int | None = None):
        super().__init__(message, tag)
        self.status = status


class RetriesExhaustedError(BackendError):
    pass


class _Transient(Exception):
    pass


class Backend:
    """Shared plumbing: pre-flight window check, concurrency limit, journal."""

    def __init__(self, cfg: BackendConfig, tokenizer: TokenizerSpec | None = None):
        self.cfg = cfg
        self.tokenizer = tokenizer or TokenizerSpec()
        self._slots = threading.BoundedSemaphore(cfg.parallelism)
        self._lock = threading.Lock()
        self._journal: list[dict] = []
        self.in_flight = 0
        self.max_in_flight = 0

    def generate(self, req: GenRequest) -> GenResult:
        prompt_tokens = count_tokens(req.prompt, self.tokenizer)
        if prompt_tokens + self.cfg.max_output_tokens > self.cfg.context_window:
            raise ContextOverflowError(
                f"prompt of {prompt_tokens} tokens + {self.cfg.max_output_tokens} output tokens "
                f"exceeds context window {self.cfg.context_window}",
                req.tag,
            )
        with self._slots:
            with self._lock:
                self.in_flight += 1
                self.max_in_flight = max(self.max_in_flight, self.in_flight)
            t0 = time.perf_counter()
            try:
                text, output_tokens, retries = self._complete(req)
            except BackendError as exc:
                self._record(req.tag, prompt_tokens, 0, time.perf_counter() - t0, 0, error=str(exc))
                raise
            finally:
                with self._lock:
                    self.in_flight -= 1
        if output_tokens is None:
            output_tokens = count_tokens(text, self.tokenizer)
        result = GenResult(text, prompt_tokens, output_tokens, time.perf_counter() - t0, retries)
        self._record(req.tag, prompt_tokens, output_tokens, result.latency, retries)
        return result

    def _complete(self, req: GenRequest) -> tuple[str, int | None, int]:
        raise NotImplementedError

    def _record(self, tag, prompt_tokens, output_tokens, latency, retries, error=None):
        entry = {
            "tag": tag,
            "ok": error is None,
            "prompt_tokens": prompt_tokens,
            "output_tokens": output_tokens,
            "retries": retries,
            "latency": round(latency, 6),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        if error is not None:
            entry["error"] = error
        with self._lock:
            self._journal.append(entry)

    def drain_journal(self, tags: set[str] | None = None) -> list[dict]:
        """Remove and return journal entries (optionally only those with matching tags)."""
        with self._lock:
            if tags is None:
                out, self._journal = self._journal, []
            else:
                out = [e for e in self._journal if e["tag"] in tags]
                self._journal = [e for e in self._journal if e["tag"] not in tags]
        return out


class HttpBackend(Backend):
    """Chat-completions client with exponential backoff on transient failures."""

    def __init__(
        self,
        cfg: BackendConfig,
        tokenizer: TokenizerSpec | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        super().__init__(cfg, tokenizer)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers=headers,
            timeout=cfg.request_timeout,
            transport=transport,
        )
        self._sleep = sleep

    def close(self):
        self._client.close()

    def _payload(self, prompt: str) -> dict:
        return {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }

    def _complete(self, req):
        last = ""
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                delay = min(self.cfg.backoff_base * 2 ** (attempt - 1), self.cfg.backoff_max)
                logger.warning("%s: retry %d after %s, sleeping %.1fs", req.tag, attempt, last, delay)
                self._sleep(delay)
            try:
                return (*self._attempt(req), attempt)
            except _Transient as exc:
                last = str(exc)
        raise RetriesExhaustedError(
            f"gave up after {self.cfg.max_retries + 1} attempts: {last}", req.tag
        )

    def _attempt(self, req) -> tuple[str, int | None]:
        try:
            resp = self._client.post("/chat/completions", json=self._payload(req.prompt))
        except httpx.TimeoutException as exc:
            raise _Transient(f"timeout ({exc.__class__.__name__})") from exc
        except httpx.TransportError as exc:
            raise _Transient(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Transient(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise NonRetryableError(
                f"HTTP {resp.status_code}: {resp.text[:500]}", req.tag, status=resp.status_code
            )
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise _Transient(f"malformed response: {resp.text[:200]}") from exc
        if not text.strip():
            raise _Transient("empty completion")
        usage = body.get("usage") or {}
        return text.strip(), usage.get("completion_tokens")


# --- mock -------------------------------------------------------------------


def _digest(prompt: str) -> int:
    return int(hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16], 16)


def fenced_blocks(prompt: str) -> list[str]:
    return _FENCED.findall(prompt)


def labeled_passages(block: str) -> list[tuple[int, str]]:
    """(label, text) pairs from a block of ``<text> [n]`` lines."""
    out = []
    pos = 0
    for m in _LABEL_AT_LINE_END.finditer(block):
        out.append((int(m.group(1)), block[pos:m.start()].strip()))
        pos = m.end()
    return out


def _claim(text: str, max_words: int = 12) -> str:
    sentences = split_sentences(_ANY_MARKER.sub("", text))
    words = (sentences[0] if sentences else "").split()[:max_words]
    claim = " ".join(words).rstrip(".!?;:,") or "Unlabeled point"
    return claim[0].upper() + claim[1:] + "."


def _echo_head(prompt: str, k: int) -> str:
    blocks = fenced_blocks(prompt)
    source = blocks[0] if blocks else prompt
    sentences = [" ".join(s.split()) for s in split_sentences(source)]
    return " ".join(sentences[:k]) or f"Digest {_digest(prompt) % 10**8}."


def _cite(prompt: str, subset: bool) -> str | None:
    for block in reversed(fenced_blocks(prompt)):
        items = labeled_passages(block)
        if items:
            break
    else:
        return None
    if not subset:
        return " ".join(f"{_claim(text)} [{label}]" for label, text in items)
    rng = random.Random(_digest(prompt))
    picks = []
    for label, text in items:
        picks.extend([(label, text)] * rng.choice((0, 0, 1, 2)))
    if not picks:
        picks = [items[rng.randrange(len(items))]]
    rng.shuffle(picks)
    return " ".join(f"{_claim(text)} [{label}]" for label, text in picks)


def _fit_length(seed_text: str, n_tokens: int, spec: TokenizerSpec) -> str:
    words = _ANY_MARKER.sub("", seed_text).split() or ["lorem", "ipsum"]
    parts, total = [], 0
    i = 0
    while total < (n_tokens + 2) * 8 or i < n_tokens + 2:
        w = words[i % len(words)]
        parts.append(w)
        total += len(w) + 1
        i += 1
    filler = " ".join(parts)
    end = max_prefix_end(filler, 0, n_tokens, spec)
    body = filler[:end].rstrip()
    return body[:-1] + "." if body else "."


def mock_generate(
    req: GenRequest,
    style: str = "echo-head",
    *,
    sentences: int = 3,
    fixed_tokens: int | None = None,
    tokenizer: TokenizerSpec | None = None,
) -> GenResult:
    """Deterministic stand-in for a model call; output depends only on the prompt.

    ``echo-head`` returns the first ``sentences`` sentences of the first fenced
    block. ``cite-all`` emits one short claim per labeled passage found in the
    last labeled block, each suffixed with its label; ``cite-subset`` does the
    same for a digest-seeded multiset of labels. Cite styles fall back to
    echo-head when the prompt has no labeled block. ``fixed_tokens`` pads or
    trims the echo-head text to exactly that many tokens.
    """
    if style not in MOCK_STYLES:
        raise ValueError(f"unknown mock style {style!r}")
    tokenizer = tokenizer or TokenizerSpec()
    text = None
    if style != "echo-head":
        text = _cite(req.prompt, subset=style == "cite-subset")
    if text is None:
        text = _echo_head(req.prompt, sentences)
        if fixed_tokens is not None:
            text = _fit_length(text, fixed_tokens, tokenizer)
    return GenResult(
        text,
        count_tokens(req.prompt, tokenizer),
        count_tokens(text, tokenizer),
    )


class MockBackend(Backend):
    def _complete(self, req):
        res = mock_generate(
            req,
            self.cfg.mock_style,
            sentences=self.cfg.mock_sentences,
            fixed_tokens=self.cfg.mock_fixed_tokens,
            tokenizer=self.tokenizer,
        )
        return res.text, res.output_tokens, 0


def make_backend(cfg: BackendConfig, tokenizer: TokenizerSpec | None = None) -> Backend:
    if cfg.kind == "mock":
        return MockBackend(cfg, tokenizer)
    return HttpBackend(cfg, tokenizer)
