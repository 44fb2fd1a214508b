"""Token counting and lossless text decomposition.

Everything here is a pure function of (text, config). Chunks and passages are
exact slices of their input, so joining them back in order reproduces the
input byte for byte.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

SCHEMES = ("whitespace-words", "byte-approx", "external-vocab")
BYTES_PER_TOKEN = 4
MIN_CHUNK_TOKENS = 64
MIN_PASSAGE_TOKENS = 10

ABBREVIATIONS = frozenset(
    """
    mr mrs ms dr prof sr jr st vs v etc e.g i.e inc ltd co corp no nos fig al
    gen col lt sgt capt rep sen gov pres jan feb mar apr jun jul aug sep sept
    oct nov dec approx dept univ est cf ch sec art para pp vol ed eds u.s u.k
    """.split()
)

_SENTENCE_END = re.compile(r"[.!?]+[\"'”’)\]]*(\s+)(?=[\"'“‘(\[]?[A-Z0-9\"'“‘])")
_WORD_BEFORE = re.compile(r"([\w.]+)\.$")
_PUNCT = re.compile(r"[^\w\s]")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSpec:
    scheme: str = "byte-approx"
    vocab_path: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown tokenizer scheme {self.scheme!r}")
        if self.scheme == "external-vocab" and not self.vocab_path:
            raise ConfigurationError("external-vocab tokenizer needs vocab_path")

    def count(self, text: str) -> int:
        return count_tokens(text, self)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "vocab_path": self.vocab_path}

    @classmethod
    def from_dict(cls, data: dict) -> TokenizerSpec:
        return cls(scheme=data.get("scheme", "byte-approx"), vocab_path=data.get("vocab_path"))


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    reference_summary: str | None = None
    domain_tag: str | None = None


@dataclass(frozen=True)
class Span:
    doc_id: str
    start: int
    end: int

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "start": self.start, "end": self.end}

    @classmethod
    def from_dict(cls, data: dict) -> Span:
        return cls(data["doc_id"], data["start"], data["end"])


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    text: str
    token_count: int
    start: int = 0
    end: int = 0


@dataclass(frozen=True)
class Passage:
    label: int
    text: str
    token_count: int
    origin: Span = field(default_factory=lambda: Span("", 0, 0))

    def relabel(self, label: int) -> Passage:
        return Passage(label, self.text, self.token_count, self.origin)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "text": self.text,
            "token_count": self.token_count,
            "origin": self.origin.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Passage:
        return cls(data["label"], data["text"], data["token_count"], Span.from_dict(data["origin"]))


# --- token counting ---------------------------------------------------------


@lru_cache(maxsize=8)
def _load_vocab(path: str) -> tuple[frozenset[str], int]:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"vocabulary file not found: {path}")
    tokens = [line.rstrip("\n") for line in p.read_text(encoding="utf-8").splitlines()]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise ConfigurationError(f"vocabulary file is empty: {path}")
    return frozenset(tokens), max(len(t) for t in tokens)


def _count_vocab(text: str, path: str) -> int:
    # Greedy longest match; characters outside the vocabulary cost one token each.
    vocab, longest = _load_vocab(path)
    i, n = 0, 0
    while i < len(text):
        step = 1
        for size in range(min(longest, len(text) - i), 1, -1):
            if text[i : i + size] in vocab:
                step = size
                break
        i += step
        n += 1
    return n


def count_tokens(text: str, spec: TokenizerSpec | None = None) -> int:
    spec = spec or TokenizerSpec()
    if not text:
        return 0
    if spec.scheme == "whitespace-words":
        return len(text.split())
    if spec.scheme == "byte-approx":
        return math.ceil(len(text.encode("utf-8")) / BYTES_PER_TOKEN)
    return _count_vocab(text, spec.vocab_path)


def max_prefix_end(text: str, start: int, limit: int, spec: TokenizerSpec) -> int:
    """Largest ``end`` such that ``text[start:end]`` costs at most ``limit`` tokens."""
    n = len(text)
    if spec.scheme == "byte-approx":
        # every char is at least one byte, so this many chars already overshoots
        hi = min(n, start + BYTES_PER_TOKEN * limit + 1)
        if hi == n and count_tokens(text[start:], spec) <= limit:
            return n
    else:
        step = max(limit, 1)
        hi = min(n, start + step)
        while count_tokens(text[start:hi], spec) <= limit:
            if hi == n:
                return n
            step *= 2
            hi = min(n, start + step)
    lo = start
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count_tokens(text[start:mid], spec) <= limit:
            lo = mid
        else:
            hi = mid - 1
    return lo


# --- sentences --------------------------------------------------------------


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) offsets of each sentence, surrounding whitespace excluded."""
    spans = []
    pos = 0
    for m in _SENTENCE_END.finditer(text):
        end = m.start(1)
        if text[m.start()] == "." and _is_abbreviation(text[pos:m.start() + 1]):
            continue
        _append_span(text, pos, end, spans)
        pos = m.end()
    _append_span(text, pos, len(text), spans)
    return spans


def _append_span(text: str, start: int, end: int, spans: list) -> None:
    piece = text[start:end]
    stripped = piece.strip()
    if stripped:
        lead = len(piece) - len(piece.lstrip())
        spans.append((start + lead, start + lead + len(stripped)))


def _is_abbreviation(head: str) -> bool:
    m = _WORD_BEFORE.search(head)
    return bool(m) and m.group(1).lower() in ABBREVIATIONS


def split_sentences(text: str) -> list[str]:
    return [text[s:e] for s, e in sentence_spans(text)]


def sentence_boundaries(text: str) -> list[int]:
    """Offsets where a new sentence begins (after the inter-sentence whitespace)."""
    return [s for s, _ in sentence_spans(text)[1:]]


# --- chunks and passages ----------------------------------------------------


def _last_whitespace_end(text: str, start: int, end: int) -> int | None:
    for i in range(end - 1, start, -1):
        if text[i - 1].isspace() and not text[i].isspace():
            return i
    return None


def _chunk_end(text: str, start: int, limit: int, spec: TokenizerSpec) -> int:
    hi = max_prefix_end(text, start, limit, spec)
    if hi >= len(text):
        return len(text)
    window = text[start:hi + 1]
    # sentence ends only count when they keep at least half of the budget
    floor = start + (hi - start) // 2
    for b in reversed(sentence_boundaries(window)):
        if start + b <= hi and start + b > floor:
            return start + b
    ws = _last_whitespace_end(text, start, hi + 1 if hi < len(text) else hi)
    if ws is not None and ws <= hi:
        return ws
    return max(hi, start + 1)


def chunk_document(doc: Document, limit: int = 8000, spec: TokenizerSpec | None = None) -> list[Chunk]:
    spec = spec or TokenizerSpec()
    if limit < MIN_CHUNK_TOKENS:
        raise ValueError(f"chunk limit must be >= {MIN_CHUNK_TOKENS}, got {limit}")
    if not doc.text:
        raise ValueError(f"document {doc.id!r} is empty")
    chunks = []
    start = 0
    while start < len(doc.text):
        end = _chunk_end(doc.text, start, limit, spec)
        piece = doc.text[start:end]
        chunks.append(Chunk(doc.id, len(chunks), piece, count_tokens(piece, spec), start, end))
        start = end
    return chunks


def _passage_end(text: str, start: int, limit: int, spec: TokenizerSpec) -> int:
    # exact token cut, so every passage but the last holds the full budget
    return max(max_prefix_end(text, start, limit, spec), start + 1)


def split_passages(
    text: str,
    passage_tokens: int = 100,
    spec: TokenizerSpec | None = None,
    *,
    doc_id: str = "",
    offset: int = 0,
    first_label: int = 1,
) -> list[Passage]:
    """Cut ``text`` into consecutive passages of ``passage_tokens`` tokens.

    ``offset`` locates ``text`` inside the source document so each passage
    records where it came from.
    """
    spec = spec or TokenizerSpec()
    if passage_tokens < MIN_PASSAGE_TOKENS:
        raise ValueError(f"passage size must be >= {MIN_PASSAGE_TOKENS}, got {passage_tokens}")
    if not text:
        raise ValueError("cannot split empty text into passages")
    out = []
    start = 0
    while start < len(text):
        end = _passage_end(text, start, passage_tokens, spec)
        piece = text[start:end]
        out.append(
            Passage(
                first_label + len(out),
                piece,
                count_tokens(piece, spec),
                Span(doc_id, offset + start, offset + end),
            )
        )
        start = end
    return out


def split_segments(passages: list[Passage], passage_tokens: int, spec: TokenizerSpec) -> list[Passage]:
    """Re-split provenance-tracked segments without crossing segment borders.

    Labels are renumbered 1..m over the result.
    """
    out: list[Passage] = []
    for seg in passages:
        if not seg.text.strip():
            continue
        if seg.token_count <= passage_tokens:
            out.append(seg.relabel(len(out) + 1))
            continue
        out.extend(
            split_passages(
                seg.text,
                passage_tokens,
                spec,
                doc_id=seg.origin.doc_id,
                offset=seg.origin.start,
                first_label=len(out) + 1,
            )
        )
    return out


def word_tokens(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation removed; empties dropped."""
    out = []
    for raw in text.lower().split():
        tok = _PUNCT.sub("", raw)
        if tok:
            out.append(tok)
    return out
