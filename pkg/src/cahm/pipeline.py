"""Hierarchical merging with context, plus the zero-shot / HMerge / Cite-HMerge baselines.

Level 1 summarises each chunk. Every further level packs consecutive nodes
into groups under ``merge_context_tokens`` and merges each group, until a
single root remains. With a strategy set, each node also carries a bundle of
source passages that later levels either merge alongside the summaries
(support) or merge instead of them (replace).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path

from .context_selection import (
    ContextBundle,
    StrategyConfig,
    coverage_fill,
    incorporate_context,
    parse_citations,
    select_context,
)
from .llm_backend import Backend, BackendConfig, BackendError, GenRequest, make_backend
from .prompting import (
    PASSAGE_JOINER,
    SUMMARY_JOINER,
    PromptTemplate,
    TemplateId,
    label_passages_block,
    load_templates,
    plain_passages_block,
    render,
)
from .segmentation import (
    MIN_CHUNK_TOKENS,
    MIN_PASSAGE_TOKENS,
    Document,
    Passage,
    TokenizerSpec,
    chunk_document,
    count_tokens,
    max_prefix_end,
    split_passages,
    split_sentences,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("replace", "support")
BASELINES = ("zeroshot", "hmerge", "cite-hmerge")


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, message: str, artifact: RunArtifact):
        super().__init__(message)
        self.artifact = artifact


@dataclass
class PipelineConfig:
    strategy: str | None = None
    mode: str | None = None
    baseline: str | None = None
    chunk_tokens: int = 8000
    merge_context_tokens: int = 8000
    passage_tokens: int = 100
    target_context_tokens: int = 1150
    top_k: int | None = None
    max_extract_sentences: int = 20
    backend: BackendConfig = field(default_factory=BackendConfig)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    prompt_dir: str | None = None

    def __post_init__(self):
        has_strategy = self.strategy is not None or self.mode is not None
        if has_strategy == (self.baseline is not None):
            raise ConfigError("set either --strategy with --mode, or --baseline (not both)")
        if has_strategy:
            if self.strategy not in ("extract", "retrieve", "cite"):
                raise ConfigError(f"unknown strategy {self.strategy!r}")
            if self.mode not in MODES:
                raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        elif self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.merge_context_tokens < 1:
            raise ConfigError("merge_context_tokens must be positive")
        if self.chunk_tokens < MIN_CHUNK_TOKENS:
            raise ConfigError(f"chunk_tokens must be >= {MIN_CHUNK_TOKENS}, got {self.chunk_tokens}")
        if self.passage_tokens < MIN_PASSAGE_TOKENS:
            raise ConfigError(f"passage_tokens must be >= {MIN_PASSAGE_TOKENS}, got {self.passage_tokens}")
        if self.target_context_tokens < self.passage_tokens:
            raise ConfigError("target_context_tokens must be at least one passage long")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    @property
    def name(self) -> str:
        return self.baseline or f"{self.strategy}-{self.mode}"

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(
            strategy=self.strategy or "cite",
            target_context_tokens=self.target_context_tokens,
            top_k=self.top_k,
            max_extract_sentences=self.max_extract_sentences,
            passage_tokens=self.passage_tokens,
            tokenizer=self.tokenizer,
        )

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "mode": self.mode,
            "baseline": self.baseline,
            "chunk_tokens": self.chunk_tokens,
            "merge_context_tokens": self.merge_context_tokens,
            "passage_tokens": self.passage_tokens,
            "target_context_tokens": self.target_context_tokens,
            "top_k": self.top_k,
            "max_extract_sentences": self.max_extract_sentences,
            "backend": self.backend.to_dict(),
            "tokenizer": self.tokenizer.to_dict(),
            "prompt_dir": self.prompt_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        data = dict(data)
        data["backend"] = BackendConfig.from_dict(data.get("backend", {}))
        data["tokenizer"] = TokenizerSpec.from_dict(data.get("tokenizer", {}))
        return cls(**data)


@dataclass
class SummaryNode:
    id: str
    level: int
    children: list[str]
    summary: str
    bundle: ContextBundle | None = None
    prompt_tokens: int = 0
    output_tokens: int = 0
    prompt: str | None = None
    raw_response: str | None = None
    span: tuple[int, int] | None = None
    label_counts: dict[int, int] | None = None
    diagnostics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "level": self.level,
            "children": self.children,
            "summary": self.summary,
            "bundle": self.bundle.to_dict() if self.bundle is not None else None,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "prompt": self.prompt,
            "raw_response": self.raw_response,
            "span": list(self.span) if self.span is not None else None,
            "label_counts": (
                {str(k): v for k, v in self.label_counts.items()} if self.label_counts is not None else None
            ),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SummaryNode:
        counts = data.get("label_counts")
        return cls(
            id=data["id"],
            level=data["level"],
            children=list(data["children"]),
            summary=data["summary"],
            bundle=ContextBundle.from_dict(data["bundle"]) if data.get("bundle") else None,
            prompt_tokens=data.get("prompt_tokens", 0),
            output_tokens=data.get("output_tokens", 0),
            prompt=data.get("prompt"),
            raw_response=data.get("raw_response"),
            span=tuple(data["span"]) if data.get("span") else None,
            label_counts={int(k): v for k, v in counts.items()} if counts is not None else None,
            diagnostics=list(data.get("diagnostics", [])),
        )


@dataclass
class RunArtifact:
    doc_id: str
    config: PipelineConfig
    levels: list[list[str]] = field(default_factory=list)
    nodes: dict[str, SummaryNode] = field(default_factory=dict)
    journal: list[dict] = field(default_factory=list)
    status: str = "running"
    error: str | None = None
    missing: list[str] = field(default_factory=list)

    @property
    def root(self) -> SummaryNode | None:
        if self.status != "complete" or not self.levels or len(self.levels[-1]) != 1:
            return None
        return self.nodes.get(self.levels[-1][0])

    @property
    def final_summary(self) -> str | None:
        root = self.root
        return root.summary if root else None

    @property
    def level_sizes(self) -> list[int]:
        return [len(level) for level in self.levels]

    @property
    def call_count(self) -> int:
        return sum(1 for e in self.journal if e.get("ok"))

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "doc_id": self.doc_id,
            "status": self.status,
            "error": self.error,
            "levels": self.levels,
            "root": self.levels[-1][0] if self.status == "complete" else None,
        }


# --- planning ---------------------------------------------------------------


def _plan_weight(node: SummaryNode, cfg: PipelineConfig) -> int:
    if cfg.mode == "replace":
        return node.bundle.token_count if node.bundle else 0
    return count_tokens(node.summary, cfg.tokenizer)


def plan_level(nodes: list[SummaryNode], cfg: PipelineConfig) -> list[list[str]]:
    """Greedy left-to-right packing of consecutive nodes under the merge limit.

    The limit applies to the merged material itself (summaries, or bundles in
    replace mode); template text and joiners are not charged.
    """
    if not nodes:
        raise ValueError("plan_level needs at least one node")
    limit = cfg.merge_context_tokens
    groups: list[list[str]] = []
    current: list[str] = []
    total = 0
    for node in nodes:
        w = _plan_weight(node, cfg)
        if current and total + w > limit:
            groups.append(current)
            current, total = [], 0
        current.append(node.id)
        total += w
        if w > limit:
            logger.warning("node %s alone needs %d tokens (limit %d); merged on its own", node.id, w, limit)
            groups.append(current)
            current, total = [], 0
    if current:
        groups.append(current)
    if len(nodes) > 1 and len(groups) == len(nodes):
        logger.warning("no two nodes fit under %d tokens; forcing pairwise merges", limit)
        ids = [n.id for n in nodes]
        groups = [ids[i : i + 2] for i in range(0, len(ids), 2)]
    return groups


# --- node builders ----------------------------------------------------------


class _Runner:
    def __init__(self, doc: Document, cfg: PipelineConfig, backend: Backend,
                 templates: dict[TemplateId, PromptTemplate]):
        self.doc = doc
        self.cfg = cfg
        self.backend = backend
        self.templates = templates
        self.scfg = cfg.strategy_config() if cfg.strategy else None
        self.tok = cfg.tokenizer

    def tag(self, node_id: str) -> str:
        return f"{self.doc.id}/{node_id}"

    def call(self, node_id: str, prompt: str):
        return self.backend.generate(GenRequest(prompt, self.tag(node_id)))

    def zeroshot(self) -> SummaryNode:
        node_id = node_name(1, 0)
        template = self.templates[TemplateId.CHUNK_SUMMARY]
        overhead = count_tokens(render(template, [""]), self.tok) + 1
        budget = self.cfg.backend.context_window - self.cfg.backend.max_output_tokens - overhead
        if budget <= 0:
            raise ConfigError("context window too small for the zero-shot prompt")
        end = max_prefix_end(self.doc.text, 0, budget, self.tok)
        prompt = render(template, [self.doc.text[:end]])
        res = self.call(node_id, prompt)
        diag = [{"truncated_at": end}] if end < len(self.doc.text) else []
        return SummaryNode(node_id, 1, [], res.text, None, res.prompt_tokens, res.output_tokens,
                           prompt, res.text, (0, end), None, diag)

    def leaf(self, index: int, chunk) -> SummaryNode:
        node_id = node_name(1, index)
        cfg = self.cfg
        span = (chunk.start, chunk.end)
        if cfg.baseline == "hmerge":
            prompt = render(self.templates[TemplateId.CHUNK_SUMMARY], [chunk.text])
            res = self.call(node_id, prompt)
            return SummaryNode(node_id, 1, [], res.text, None, res.prompt_tokens, res.output_tokens,
                               prompt, res.text, span)
        if cfg.baseline == "cite-hmerge":
            passages = split_passages(chunk.text, cfg.passage_tokens, self.tok, doc_id=self.doc.id, offset=chunk.start)
            prompt = render(self.templates[TemplateId.CHUNK_SUMMARY_WITH_CITATIONS], [label_passages_block(passages)])
            res = self.call(node_id, prompt)
            parse = parse_citations(res.text, len(passages))
            return SummaryNode(node_id, 1, [], parse.clean_text, None, res.prompt_tokens, res.output_tokens,
                               prompt, res.text, span, parse.label_counts, parse.diagnostics)
        out = incorporate_context(chunk.text, None, self.scfg, self.backend, templates=self.templates,
                                  tag=self.tag(node_id), doc_id=self.doc.id, offset=chunk.start)
        bundle = self._nonempty(out.bundle, chunk.text, chunk.start)
        return SummaryNode(node_id, 1, [], out.summary, bundle, out.prompt_tokens, out.output_tokens,
                           out.prompt, out.raw_response, span, bundle.label_counts, bundle.diagnostics)

    def _nonempty(self, bundle: ContextBundle, text, offset: int = 0) -> ContextBundle:
        # A cited summary that cites nothing leaves an empty bundle; fall back to pure coverage.
        if bundle.passages or bundle.strategy != "cite":
            return bundle
        if isinstance(text, str):
            passages = split_passages(text, self.cfg.passage_tokens, self.tok, doc_id=self.doc.id, offset=offset)
        else:
            passages = [p.relabel(i) for i, p in enumerate(text, start=1)]
        if not passages:
            return bundle
        chosen = sorted(coverage_fill([], list(range(len(passages))), self.scfg.k, len(passages)))
        return ContextBundle(
            [passages[i].relabel(n) for n, i in enumerate(chosen, start=1)],
            "cite",
            [0.0] * len(chosen),
            bundle.label_counts,
            bundle.diagnostics + [{"reason": "no usable citations; coverage fallback"}],
        )

    def merge(self, level: int, index: int, children: list[SummaryNode]) -> SummaryNode:
        node_id = node_name(level, index)
        ids = [c.id for c in children]
        cfg = self.cfg
        summaries = SUMMARY_JOINER.join(c.summary.strip() for c in children)

        if cfg.baseline == "hmerge":
            prompt = render(self.templates[TemplateId.MERGE_PLAIN], [summaries])
            res = self.call(node_id, prompt)
            return SummaryNode(node_id, level, ids, res.text, None, res.prompt_tokens, res.output_tokens,
                               prompt, res.text)

        if cfg.baseline == "cite-hmerge":
            block, n = relabel_summaries([c.summary for c in children])
            prompt = render(self.templates[TemplateId.MERGE_WITH_CITATIONS], [block])
            res = self.call(node_id, prompt)
            parse = parse_citations(res.text, n)
            return SummaryNode(node_id, level, ids, parse.clean_text, None, res.prompt_tokens,
                               res.output_tokens, prompt, res.text, None, parse.label_counts, parse.diagnostics)

        passages = [p for c in children for p in (c.bundle.passages if c.bundle else [])]
        passages = [p.relabel(i) for i, p in enumerate(passages, start=1)]

        if cfg.mode == "replace":
            out = incorporate_context(passages, None, self.scfg, self.backend, templates=self.templates,
                                      tag=self.tag(node_id), doc_id=self.doc.id)
            bundle = self._nonempty(out.bundle, passages)
            return SummaryNode(node_id, level, ids, out.summary, bundle, out.prompt_tokens, out.output_tokens,
                               out.prompt, out.raw_response, None, bundle.label_counts, bundle.diagnostics)

        # support: summaries carry the gist, so trim evidence from the end when over budget
        budget = cfg.merge_context_tokens - count_tokens(summaries, self.tok)
        dropped = 0
        while passages and sum(p.token_count for p in passages) > budget:
            passages.pop()
            dropped += 1
        cite = cfg.strategy == "cite"
        if cite:
            contexts = label_passages_block(passages)
            template = self.templates[TemplateId.MERGE_SUPPORT_WITH_CITATIONS]
        else:
            contexts = plain_passages_block(passages)
            template = self.templates[TemplateId.MERGE_SUPPORT]
        prompt = render(template, [summaries, contexts])
        res = self.call(node_id, prompt)
        summary = parse_citations(res.text, len(passages)).clean_text if cite else res.text
        bundle = select_context(cfg.strategy, summary, res.text, passages, self.scfg)
        bundle = self._nonempty(bundle, passages)
        if dropped:
            bundle.diagnostics.append({"reason": "support contexts truncated", "dropped_passages": dropped})
        return SummaryNode(node_id, level, ids, summary, bundle, res.prompt_tokens, res.output_tokens,
                           prompt, res.text, None, bundle.label_counts, bundle.diagnostics)


def node_name(level: int, index: int) -> str:
    return f"L{level}-{index:04d}"


def relabel_summaries(summaries: list[str]) -> tuple[str, int]:
    """Label every sentence of every summary with one running counter.

    Returns the rendered block (one summary per line) and the label count.
    """
    lines = []
    n = 0
    for text in summaries:
        parts = []
        for sentence in split_sentences(text):
            n += 1
            parts.append(f"{' '.join(sentence.split())} [{n}]")
        if parts:
            lines.append(" ".join(parts))
    return PASSAGE_JOINER.join(lines), n


# --- persistence ------------------------------------------------------------


class _Store:
    def __init__(self, run_dir: Path | None):
        self.dir = run_dir
        if run_dir is not None:
            (run_dir / "nodes").mkdir(parents=True, exist_ok=True)
            for stale in ("final.txt", "journal.jsonl"):
                (run_dir / stale).unlink(missing_ok=True)
            for old in (run_dir / "nodes").glob("*.json"):
                old.unlink()

    def config(self, cfg: PipelineConfig):
        if self.dir:
            _write_json(self.dir / "config.json", cfg.to_dict())

    def node(self, node: SummaryNode):
        if self.dir:
            _write_json(self.dir / "nodes" / f"{node.id}.json", node.to_dict())

    def journal(self, entries: list[dict]):
        if self.dir and entries:
            with (self.dir / "journal.jsonl").open("a", encoding="utf-8") as fh:
                for e in entries:
                    fh.write(json.dumps(e, sort_keys=True) + "\n")

    def manifest(self, art: RunArtifact):
        if self.dir:
            _write_json(self.dir / "tree.json", art.manifest())

    def final(self, text: str):
        if self.dir:
            (self.dir / "final.txt").write_text(text, encoding="utf-8")


def _write_json(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# --- driver -----------------------------------------------------------------


def run_pipeline(
    doc: Document,
    cfg: PipelineConfig,
    *,
    backend: Backend | None = None,
    out_dir: str | Path | None = None,
    templates: dict[TemplateId, PromptTemplate] | None = None,
) -> RunArtifact:
    """Summarise one document; persists the run to ``out_dir`` when given.

    Raises ``PipelineError`` (carrying the partial artifact) if a backend call
    fails; whatever finished before the failure is already on disk.
    """
    if not doc.text.strip():
        raise ValueError(f"document {doc.id!r} is empty")
    backend = backend or make_backend(cfg.backend, cfg.tokenizer)
    templates = templates or load_templates(cfg.prompt_dir)
    runner = _Runner(doc, cfg, backend, templates)
    store = _Store(Path(out_dir) if out_dir is not None else None)
    art = RunArtifact(doc.id, cfg)
    store.config(cfg)

    def run_level(jobs: list[tuple[str, callable]]) -> list[SummaryNode]:
        art.levels.append([node_id for node_id, _ in jobs])
        store.manifest(art)
        with ThreadPoolExecutor(max_workers=cfg.backend.parallelism) as pool:
            futures = [pool.submit(fn) for _, fn in jobs]
            wait(futures)
        done, failure = [], None
        for fut in futures:
            if fut.exception() is None:
                node = fut.result()
                art.nodes[node.id] = node
                store.node(node)
                done.append(node)
            elif failure is None:
                failure = fut.exception()
        entries = sorted(backend.drain_journal({runner.tag(i) for i, _ in jobs}), key=lambda e: e["tag"])
        art.journal.extend(entries)
        store.journal(entries)
        if failure is not None:
            art.status = "failed"
            art.error = str(failure)
            art.missing = [i for i, _ in jobs if i not in art.nodes]
            store.manifest(art)
            raise PipelineError(f"{doc.id}: {failure}", art) from failure
        return done

    try:
        if cfg.baseline == "zeroshot":
            nodes = run_level([(node_name(1, 0), runner.zeroshot)])
        else:
            chunks = chunk_document(doc, cfg.chunk_tokens, cfg.tokenizer)
            nodes = run_level([
                (node_name(1, i), (lambda i=i, c=c: runner.leaf(i, c))) for i, c in enumerate(chunks)
            ])
            level = 1
            while len(nodes) > 1:
                level += 1
                by_id = {n.id: n for n in nodes}
                groups = plan_level(nodes, cfg)
                nodes = run_level([
                    (node_name(level, j), (lambda j=j, g=g, lv=level: runner.merge(lv, j, [by_id[i] for i in g])))
                    for j, g in enumerate(groups)
                ])
    except BackendError as exc:
        art.status, art.error = "failed", str(exc)
        store.manifest(art)
        raise PipelineError(f"{doc.id}: {exc}", art) from exc

    art.status = "complete"
    store.manifest(art)
    store.final(art.final_summary or "")
    return art


def rebuild_tree(run_dir: str | Path) -> RunArtifact:
    """Load a run directory back into a ``RunArtifact``.

    Nodes that a failed run planned but never finished are listed in
    ``missing``; in a completed run a missing or unreadable node is an error.
    """
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "tree.json").read_text(encoding="utf-8"))
        config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactError(f"{run_dir} is not a run directory: {exc.filename} missing") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{run_dir}: unreadable manifest: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(
            f"{run_dir}: schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}"
        )
    art = RunArtifact(manifest["doc_id"], PipelineConfig.from_dict(config), manifest["levels"],
                      status=manifest["status"], error=manifest.get("error"))
    for level in art.levels:
        for node_id in level:
            path = run_dir / "nodes" / f"{node_id}.json"
            if not path.exists():
                if art.status == "complete":
                    raise ArtifactError(f"node {node_id}: file missing from completed run")
                art.missing.append(node_id)
                continue
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
                if data.get("schema_version") != SCHEMA_VERSION:
                    raise ArtifactError(f"node {node_id}: schema version {data.get('schema_version')}")
                art.nodes[node_id] = SummaryNode.from_dict(data)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ArtifactError(f"node {node_id}: corrupted node file ({exc})") from exc
    journal = run_dir / "journal.jsonl"
    if journal.exists():
        for n, line in enumerate(journal.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                art.journal.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ArtifactError(f"{journal}: line {n} is not JSON") from exc
    return art
