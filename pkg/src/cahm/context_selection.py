"""Pick the source passages that accompany a summary.

Three strategies produce a ``ContextBundle``:

* extract  - sentence centrality with a trigram redundancy penalty
* retrieve - Okapi BM25 with the summary as the query
* cite     - citation frequency from a cited summary, topped up by coverage

Every passage in a bundle is an exact slice of the source document and keeps
its offsets, so provenance survives any number of merge levels.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

from .prompting import (
    PromptTemplate,
    TemplateId,
    label_passages_block,
    load_templates,
    plain_passages_block,
    render,
)
from .segmentation import (
    Passage,
    Span,
    TokenizerSpec,
    count_tokens,
    sentence_spans,
    split_passages,
    split_segments,
    word_tokens,
)

STRATEGIES = ("extract", "retrieve", "cite")

_VALID_MARKER = re.compile(r"[ \t]*\[\s*(\d+(?:\s*[,;]\s*\d+)*)\s*\]")
_SUSPECT_MARKER = re.compile(r"\[[^\[\]\n]{0,24}\]")

Scorer = Callable[[list[list[str]]], list[float]]


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "retrieve"
    target_context_tokens: int = 1150
    top_k: int | None = None
    max_extract_sentences: int = 20
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    passage_tokens: int = 100
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.target_context_tokens < self.passage_tokens:
            raise ValueError("target_context_tokens must be at least one passage long")
        if self.max_extract_sentences < 1:
            raise ValueError("max_extract_sentences must be >= 1")

    @property
    def k(self) -> int:
        """Passages per bundle; derived from the token budget unless set."""
        if self.top_k is not None:
            return self.top_k
        return max(1, math.floor(self.target_context_tokens / self.passage_tokens + 0.5))


@dataclass
class ContextBundle:
    passages: list[Passage]
    strategy: str
    score_trace: list[float] = field(default_factory=list)
    label_counts: dict[int, int] | None = None
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def provenance(self) -> list[Span]:
        return [p.origin for p in self.passages]

    @property
    def token_count(self) -> int:
        return sum(p.token_count for p in self.passages)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "passages": [p.to_dict() for p in self.passages],
            "score_trace": self.score_trace,
            "label_counts": (
                {str(k): v for k, v in self.label_counts.items()}
                if self.label_counts is not None
                else None
            ),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ContextBundle:
        counts = data.get("label_counts")
        return cls(
            passages=[Passage.from_dict(p) for p in data["passages"]],
            strategy=data["strategy"],
            score_trace=list(data.get("score_trace", [])),
            label_counts={int(k): v for k, v in counts.items()} if counts is not None else None,
            diagnostics=list(data.get("diagnostics", [])),
        )


@dataclass
class CitationParse:
    clean_text: str
    citations: list[tuple[int, int]]
    label_counts: dict[int, int]
    diagnostics: list[dict] = field(default_factory=list)


def as_segments(source: str | Sequence[Passage], doc_id: str = "", offset: int = 0,
                tokenizer: TokenizerSpec | None = None) -> list[Passage]:
    if isinstance(source, str):
        if not source:
            return []
        return [Passage(1, source, count_tokens(source, tokenizer), Span(doc_id, offset, offset + len(source)))]
    return list(source)


def _finish(passages: list[Passage], order: list[int], strategy: str, scores: list[float],
            **extra) -> ContextBundle:
    chosen = sorted(order)
    return ContextBundle(
        passages=[passages[i].relabel(n) for n, i in enumerate(chosen, start=1)],
        strategy=strategy,
        score_trace=[scores[i] for i in chosen],
        **extra,
    )


# --- extract ----------------------------------------------------------------


def tf_isf_scores(sentences: list[list[str]]) -> list[float]:
    """Length-normalised sum of term frequency x inverse sentence frequency.

    isf uses log(1 + N / sf) so that a lone sentence still scores above zero.
    """
    n = len(sentences)
    sf = Counter()
    for terms in sentences:
        sf.update(set(terms))
    scores = []
    for terms in sentences:
        if not terms:
            scores.append(0.0)
            continue
        tf = Counter(terms)
        total = sum(c * math.log(1 + n / sf[t]) for t, c in tf.items())
        scores.append(total / len(terms))
    return scores


def _ngrams(terms: list[str], n: int = 3) -> set[tuple[str, ...]]:
    size = min(n, len(terms))
    if size == 0:
        return set()
    return {tuple(terms[i : i + size]) for i in range(len(terms) - size + 1)}


def candidate_sentences(segments: list[Passage], tokenizer: TokenizerSpec) -> list[Passage]:
    """Sentences of each segment as provenance-tracked records; none crosses a segment."""
    out = []
    for seg in segments:
        for s, e in sentence_spans(seg.text):
            text = seg.text[s:e]
            out.append(
                Passage(
                    len(out) + 1,
                    text,
                    count_tokens(text, tokenizer),
                    Span(seg.origin.doc_id, seg.origin.start + s, seg.origin.start + e),
                )
            )
    return out


def extract_select(text: str | Sequence[Passage], cfg: StrategyConfig,
                   scorer: Scorer | None = None, *, doc_id: str = "", offset: int = 0) -> ContextBundle:
    segments = as_segments(text, doc_id, offset, cfg.tokenizer)
    if not any(s.text.strip() for s in segments):
        raise ValueError("extract_select needs non-empty text")
    sentences = candidate_sentences(segments, cfg.tokenizer)
    terms = [word_tokens(s.text) for s in sentences]
    base = (scorer or tf_isf_scores)(terms)
    grams = [_ngrams(t) for t in terms]

    budget = cfg.target_context_tokens
    ceiling = budget + cfg.passage_tokens
    covered: set = set()
    picked: list[int] = []
    dropped: set[int] = set()
    total = 0
    while len(picked) < cfg.max_extract_sentences and total < budget:
        best, best_score = None, 0.0
        for i, g in enumerate(grams):
            if i in dropped or i in picked:
                continue
            if not g or total + sentences[i].token_count > ceiling:
                dropped.add(i)
                continue
            overlap = len(g & covered) / len(g)
            if overlap >= 1.0:
                dropped.add(i)
                continue
            score = base[i] * (1.0 - overlap)
            if best is None or score > best_score:
                best, best_score = i, score
        if best is None:
            break
        picked.append(best)
        covered |= grams[best]
        total += sentences[best].token_count

    if not picked and sentences:
        # every sentence is over budget on its own: keep the top one, cut to size below
        picked = [max(range(len(sentences)), key=lambda i: (base[i], -i))]

    picked.sort()
    packed: list[Passage] = []
    trace: list[float] = []
    for i in picked:
        s = sentences[i]
        pieces = [s] if s.token_count <= cfg.passage_tokens else split_passages(
            s.text, cfg.passage_tokens, cfg.tokenizer, doc_id=s.origin.doc_id, offset=s.origin.start
        )
        for p in pieces:
            if sum(q.token_count for q in packed) + p.token_count > ceiling and packed:
                break
            packed.append(p.relabel(len(packed) + 1))
            trace.append(base[i])
    return ContextBundle(packed, "extract", trace)


# --- retrieve ---------------------------------------------------------------


def bm25_scores(query: list[str], docs: list[list[str]], k1: float = 1.2, b: float = 0.75) -> list[float]:
    """Okapi BM25 of every doc against ``query``; repeated query terms count repeatedly."""
    n = len(docs)
    if n == 0:
        return []
    lengths = [len(d) for d in docs]
    avgdl = sum(lengths) / n
    tfs = [Counter(d) for d in docs]
    df = Counter()
    for tf in tfs:
        df.update(tf.keys())
    out = []
    for tf, dl in zip(tfs, lengths):
        score = 0.0
        if avgdl > 0:
            norm = k1 * (1 - b + b * dl / avgdl)
            for term in query:
                f = tf.get(term, 0)
                if not f:
                    continue
                idf = math.log(1 + (n - df[term] + 0.5) / (df[term] + 0.5))
                score += idf * f * (k1 + 1) / (f + norm)
        out.append(score)
    return out


def bm25_rank(query: str, passages: Sequence[Passage], cfg: StrategyConfig) -> list[tuple[Passage, float]]:
    if not passages:
        raise ValueError("bm25_rank needs at least one passage")
    scores = bm25_scores(word_tokens(query), [word_tokens(p.text) for p in passages], cfg.bm25_k1, cfg.bm25_b)
    order = sorted(range(len(passages)), key=lambda i: (-scores[i], passages[i].label))
    return [(passages[i], scores[i]) for i in order]


def retrieve_select(summary: str, source_text: str | Sequence[Passage], cfg: StrategyConfig,
                    *, doc_id: str = "", offset: int = 0) -> ContextBundle:
    if not summary.strip():
        raise ValueError("retrieve_select needs a non-empty summary as query")
    if isinstance(source_text, str):
        passages = split_passages(source_text, cfg.passage_tokens, cfg.tokenizer, doc_id=doc_id, offset=offset)
    else:
        passages = split_segments(list(source_text), cfg.passage_tokens, cfg.tokenizer)
    if not passages:
        return ContextBundle([], "retrieve")
    ranked = bm25_rank(summary, passages, cfg)
    scores = [0.0] * len(passages)
    for p, s in ranked:
        scores[p.label - 1] = s
    top = [p.label - 1 for p, _ in ranked[: cfg.k]]
    return _finish(passages, top, "retrieve", scores)


# --- cite -------------------------------------------------------------------


def parse_citations(response: str, num_labels: int) -> CitationParse:
    """Strip ``[n]`` markers from a cited summary and tally the labels.

    Markers outside 1..num_labels are removed from the text but not counted;
    bracketed digit sequences that do not parse as markers are left in place.
    Both show up in ``diagnostics``.
    """
    removed: list[tuple[int, list[int]]] = []
    diagnostics: list[dict] = []
    joined = response
    # Removing a nested marker can expose another one ("[1[2]]" -> "[1]"), so
    # strip until nothing changes, keeping earlier removal points in step.
    while True:
        matches = list(_VALID_MARKER.finditer(joined))
        if not matches:
            break
        pieces: list[str] = []
        cuts: list[tuple[int, int]] = []
        pos = 0
        length = 0
        found: list[tuple[int, list[int]]] = []
        for m in matches:
            chunk = joined[pos:m.start()]
            pieces.append(chunk)
            length += len(chunk)
            labels = []
            for raw in re.split(r"\s*[,;]\s*", m.group(1)):
                label = int(raw)
                if 1 <= label <= num_labels:
                    labels.append(label)
                else:
                    diagnostics.append({"marker": m.group().strip(), "label": label, "offset": m.start(),
                                        "reason": "out of range"})
            found.append((length, labels))
            cuts.append((m.start(), m.end()))
            pos = m.end()
        pieces.append(joined[pos:])
        removed = sorted([(_shift(at, cuts), labels) for at, labels in removed] + found, key=lambda r: r[0])
        joined = "".join(pieces)

    lead = len(joined) - len(joined.lstrip())
    clean = joined.strip()
    for m in _SUSPECT_MARKER.finditer(clean):
        if any(ch.isdigit() for ch in m.group()):
            diagnostics.append({"marker": m.group(), "offset": m.start(), "reason": "malformed"})

    starts = [s for s, _ in sentence_spans(clean)]
    citations: list[tuple[int, int]] = []
    for at, labels in removed:
        at -= lead
        idx = 0
        for j, s in enumerate(starts):
            if s < at:
                idx = j
        citations.extend((idx, label) for label in labels)
    counts = Counter(label for _, label in citations)
    return CitationParse(clean, citations, dict(sorted(counts.items())), diagnostics)


def _shift(at: int, cuts: list[tuple[int, int]]) -> int:
    """Map an offset through the deletion of the ``cuts`` spans."""
    out = at
    for a, b in cuts:
        if at >= b:
            out -= b - a
        elif at > a:
            out -= at - a
    return out


def coverage_fill(selected: list[int], candidates: list[int], k: int, m: int) -> list[int]:
    """Top up ``selected`` to ``k`` passages from ``candidates`` by section coverage.

    The input is cut into k sections with midpoints (2i+1)/(2k). Each already
    selected passage claims its nearest section; then the candidate nearest to
    any unclaimed section is added and that section claimed, until k passages
    are held or candidates run out. Passage i sits at (i + 0.5)/m. Ties go to the
    earlier passage, then the earlier section.
    """
    sections = [Fraction(2 * i + 1, 2 * k) for i in range(k)]
    pos = lambda i: Fraction(2 * i + 1, 2 * m)  # noqa: E731
    out = list(selected)
    for i in selected:
        if not sections:
            break
        nearest = min(sections, key=lambda s: (abs(pos(i) - s), s))
        sections.remove(nearest)
    pool = sorted(set(candidates) - set(out))
    while len(out) < k and pool and sections:
        _, c, s = min((abs(pos(c) - s), c, s) for c in pool for s in sections)
        out.append(c)
        pool.remove(c)
        sections.remove(s)
    return out


def cite_select(parse: CitationParse | dict[int, int], passages: Sequence[Passage], k: int) -> ContextBundle:
    """Choose up to ``k`` passages, most-cited first, breaking ties by coverage.

    Labels are taken in descending citation count. Labels sharing a count form
    one tier; a tier's passages are appended whole while they fit in ``k``.
    The first tier that does not fit supplies the candidates for
    ``coverage_fill``.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    counts = parse.label_counts if isinstance(parse, CitationParse) else dict(parse)
    owned: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(passages):
        owned[p.label].append(i)

    tiers: dict[int, list[int]] = defaultdict(list)
    for label, c in counts.items():
        if c > 0 and owned.get(label):
            tiers[c].extend(owned[label])

    selected: list[int] = []
    overflow: list[int] | None = None
    for c in sorted(tiers, reverse=True):
        members = sorted(tiers[c])
        if len(selected) + len(members) > k:
            overflow = members
            break
        selected.extend(members)
    if overflow is not None and len(selected) < k:
        selected = coverage_fill(selected, overflow, k, len(passages))

    trace = [float(counts.get(p.label, 0)) for p in passages]
    return _finish(list(passages), selected, "cite", trace, label_counts=dict(counts))


# --- IC module --------------------------------------------------------------


@dataclass
class ICOutput:
    summary: str
    bundle: ContextBundle
    prompt: str | None = None
    raw_response: str | None = None
    prompt_tokens: int = 0
    output_tokens: int = 0

    def __iter__(self):
        # unpacks as (summary, bundle)
        return iter((self.summary, self.bundle))


def select_context(strategy: str, summary: str, raw_response: str | None, passages: list[Passage],
                   cfg: StrategyConfig) -> ContextBundle:
    """Next-level bundle drawn from already-labeled passages."""
    if not passages:
        return ContextBundle([], strategy)
    if strategy == "extract":
        return extract_select(passages, cfg)
    if strategy == "retrieve":
        return retrieve_select(summary, passages, cfg)
    parse = parse_citations(raw_response or "", len(passages))
    bundle = cite_select(parse, passages, cfg.k)
    bundle.diagnostics = parse.diagnostics
    return bundle


def incorporate_context(
    source: str | Sequence[Passage],
    prior_summary: str | None,
    cfg: StrategyConfig,
    backend,
    *,
    templates: dict[TemplateId, PromptTemplate] | None = None,
    tag: str = "",
    doc_id: str = "",
    offset: int = 0,
) -> ICOutput:
    """Summarise ``source`` and attach the passages that support the summary."""
    from .llm_backend import BackendError, GenRequest

    templates = templates or load_templates()
    segments = as_segments(source, doc_id, offset, cfg.tokenizer)
    if not any(s.text.strip() for s in segments):
        raise ValueError(f"{tag}: nothing to summarise")
    document = segments[0].text if isinstance(source, str) else plain_passages_block(segments)

    def call(prompt: str):
        try:
            return backend.generate(GenRequest(prompt, tag))
        except BackendError as exc:
            if not exc.tag:
                exc.tag = tag
            raise

    if cfg.strategy == "cite":
        passages = split_segments(segments, cfg.passage_tokens, cfg.tokenizer)
        prompt = render(templates[TemplateId.CHUNK_SUMMARY_WITH_CITATIONS], [label_passages_block(passages)])
        res = call(prompt)
        parse = parse_citations(res.text, len(passages))
        bundle = cite_select(parse, passages, cfg.k)
        bundle.diagnostics = parse.diagnostics
        return ICOutput(parse.clean_text, bundle, prompt, res.text, res.prompt_tokens, res.output_tokens)

    if cfg.strategy == "retrieve" and prior_summary:
        return ICOutput(prior_summary, retrieve_select(prior_summary, segments, cfg))

    prompt = render(templates[TemplateId.CHUNK_SUMMARY], [document])
    res = call(prompt)
    if cfg.strategy == "extract":
        bundle = extract_select(segments, cfg)
    else:
        bundle = retrieve_select(res.text, segments, cfg)
    return ICOutput(res.text, bundle, prompt, res.text, res.prompt_tokens, res.output_tokens)
