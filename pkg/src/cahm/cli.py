"""Command-line entry point: ``cahm summarize | eval | inspect``.

Exit codes: 0 success, 1 one or more rows failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .evaluation import corpus_means, export_for_neural_metrics, rouge
from .llm_backend import MOCK_STYLES, BackendConfig, make_backend
from .pipeline import (
    ArtifactError,
    ConfigError,
    PipelineConfig,
    PipelineError,
    RunArtifact,
    rebuild_tree,
    run_pipeline,
)
from .prompting import PromptError, load_templates
from .segmentation import SCHEMES, ConfigurationError, Document, TokenizerSpec

logger = logging.getLogger("cahm")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
REPORT_NAME = "eval_report.json"
EXPORT_NAME = "neural_metrics.jsonl"

_NODE_ROW = {
    "type": "object",
    "required": ["id", "level", "children", "prompt_tokens", "output_tokens", "bundle_passages"],
    "properties": {
        "id": {"type": "string"},
        "level": {"type": "integer", "minimum": 1},
        "children": {"type": "array", "items": {"type": "string"}},
        "prompt_tokens": {"type": "integer", "minimum": 0},
        "output_tokens": {"type": "integer", "minimum": 0},
        "bundle_passages": {"type": "integer", "minimum": 0},
    },
}

INSPECT_SCHEMA = {
    "type": "object",
    "required": ["doc_id", "config", "status", "level_sizes", "missing", "calls", "final_summary", "nodes"],
    "properties": {
        "doc_id": {"type": "string"},
        "config": {"type": "string"},
        "status": {"enum": ["running", "complete", "failed"]},
        "level_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "missing": {"type": "array", "items": {"type": "string"}},
        "calls": {"type": "integer", "minimum": 0},
        "final_summary": {"type": ["string", "null"]},
        "nodes": {"type": "array", "items": _NODE_ROW},
        "node": {
            "type": "object",
            "required": ["id", "summary", "label_counts", "diagnostics", "passages"],
            "properties": {
                "label_counts": {"type": "object", "additionalProperties": {"type": "integer"}},
                "passages": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["label", "start", "end", "text"],
                        "properties": {
                            "label": {"type": "integer"},
                            "start": {"type": "integer"},
                            "end": {"type": "integer"},
                            "text": {"type": "string"},
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class DatasetRow:
    id: str
    document: str
    reference_summary: str | None = None
    domain_tag: str | None = None

    def to_document(self) -> Document:
        return Document(self.id, self.document, self.reference_summary, self.domain_tag)


def load_dataset(path: str | Path) -> list[DatasetRow]:
    rows, seen = [], set()
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: not JSON ({exc.msg})") from exc
            row_id = str(data.get("id", "")).strip()
            if not row_id or "/" in row_id or "\\" in row_id or row_id in (".", ".."):
                raise ConfigError(f"{path}:{n}: id {row_id!r} is not usable as a directory name")
            if row_id in seen:
                raise ConfigError(f"{path}:{n}: duplicate id {row_id!r}")
            if not str(data.get("document", "")).strip():
                raise ConfigError(f"{path}:{n}: empty document for {row_id!r}")
            seen.add(row_id)
            rows.append(DatasetRow(row_id, data["document"], data.get("reference_summary"), data.get("domain_tag")))
    return rows


def is_complete(run_dir: Path) -> bool:
    """A row counts as done when final.txt exists and the tree and journal reload cleanly."""
    if not (run_dir / "final.txt").exists():
        return False
    try:
        art = rebuild_tree(run_dir)
    except ArtifactError:
        return False
    return art.status == "complete" and art.call_count >= len(art.nodes) > 0


def config_from_args(args) -> PipelineConfig:
    backend = BackendConfig(
        kind=args.backend,
        base_url=args.base_url,
        model=args.model,
        max_output_tokens=args.max_output_tokens,
        temperature=args.temperature,
        request_timeout=args.timeout,
        max_retries=args.max_retries,
        parallelism=args.parallelism,
        context_window=args.context_window,
        api_key_env=args.api_key_env,
        mock_style=args.mock_style,
        mock_sentences=args.mock_sentences,
        mock_fixed_tokens=args.mock_fixed_tokens,
    )
    return PipelineConfig(
        strategy=args.strategy,
        mode=args.mode,
        baseline=args.baseline,
        chunk_tokens=args.chunk_tokens,
        merge_context_tokens=args.merge_context_tokens,
        passage_tokens=args.passage_tokens,
        target_context_tokens=args.target_context_tokens,
        top_k=args.top_k,
        max_extract_sentences=args.max_extract_sentences,
        backend=backend,
        tokenizer=TokenizerSpec(args.tokenizer, args.vocab),
        prompt_dir=args.prompt_dir,
    )


def cmd_summarize(args) -> int:
    try:
        cfg = config_from_args(args)
        rows = load_dataset(args.dataset)
        templates = load_templates(cfg.prompt_dir)
        if cfg.strategy:
            cfg.strategy_config()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (ConfigError, ConfigurationError, PromptError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = make_backend(cfg.backend, cfg.tokenizer)

    def one(row: DatasetRow) -> tuple[str, str]:
        run_dir = out_dir / row.id
        if not args.force and is_complete(run_dir):
            return row.id, "skipped"
        try:
            art = run_pipeline(row.to_document(), cfg, backend=backend, out_dir=run_dir, templates=templates)
        except PipelineError as exc:
            logger.error("%s failed: %s", row.id, exc)
            return row.id, "failed"
        except Exception as exc:  # keep going with the other rows
            logger.exception("%s crashed: %s", row.id, exc)
            return row.id, "failed"
        return row.id, f"ok levels={'->'.join(map(str, art.level_sizes))} calls={art.call_count}"

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, rows))
    else:
        results = [one(row) for row in rows]
    for row_id, status in results:
        print(f"{row_id}\t{status}")
    return EXIT_PARTIAL if any(s == "failed" for _, s in results) else EXIT_OK


def evaluate_runs(runs: Path, rows: list[DatasetRow]) -> dict:
    per_doc, excluded, reports, pairs = {}, [], [], []
    for row in rows:
        run_dir = runs / row.id
        if not is_complete(run_dir):
            excluded.append({"id": row.id, "reason": "missing or incomplete run"})
            continue
        candidate = (run_dir / "final.txt").read_text(encoding="utf-8")
        pairs.append((row.id, row.document, candidate, row.reference_summary))
        if not row.reference_summary or not candidate.strip():
            excluded.append({"id": row.id, "reason": "no reference" if not row.reference_summary else "empty summary"})
            continue
        report = rouge(candidate, row.reference_summary)
        per_doc[row.id] = report.to_dict()
        reports.append(report)
    warnings = export_for_neural_metrics(pairs, runs / EXPORT_NAME)
    return {
        "per_document": per_doc,
        "corpus": corpus_means(reports),
        "excluded": excluded,
        "export": EXPORT_NAME,
        "export_warnings": warnings,
    }


def cmd_eval(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir() or not any(p.is_dir() for p in runs.iterdir()):
        print(f"configuration error: no run directories under {runs}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows = load_dataset(args.dataset)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = evaluate_runs(runs, rows)
    out = Path(args.out) if args.out else runs / REPORT_NAME
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    corpus = report["corpus"]
    if corpus:
        print(f"documents={corpus['count']} R1={corpus['rouge1_f1']:.4f} R2={corpus['rouge2_f1']:.4f} "
              f"RL={corpus['rougeL_f1']:.4f} GM={corpus['geometric_mean_f1']:.4f}")
    for item in report["excluded"]:
        print(f"excluded {item['id']}: {item['reason']}")
    print(f"report: {out}")
    return EXIT_OK


def inspect_payload(art: RunArtifact, node_id: str | None = None) -> dict:
    payload = {
        "doc_id": art.doc_id,
        "config": art.config.name,
        "status": art.status,
        "level_sizes": art.level_sizes,
        "missing": art.missing,
        "calls": art.call_count,
        "final_summary": art.final_summary,
        "nodes": [
            {
                "id": n.id,
                "level": n.level,
                "children": n.children,
                "prompt_tokens": n.prompt_tokens,
                "output_tokens": n.output_tokens,
                "bundle_passages": len(n.bundle.passages) if n.bundle else 0,
            }
            for level in art.levels
            for n in (art.nodes.get(i) for i in level)
            if n is not None
        ],
    }
    if node_id is not None:
        node = art.nodes.get(node_id)
        if node is None:
            raise KeyError(node_id)
        payload["node"] = {
            "id": node.id,
            "summary": node.summary,
            "label_counts": {str(k): v for k, v in (node.label_counts or {}).items()},
            "diagnostics": node.diagnostics,
            "passages": [
                {"label": p.label, "start": p.origin.start, "end": p.origin.end, "text": p.text}
                for p in (node.bundle.passages if node.bundle else [])
            ],
        }
    return payload


def _render_text(payload: dict) -> str:
    lines = [
        f"document: {payload['doc_id']}  config: {payload['config']}  status: {payload['status']}",
        f"levels: {' -> '.join(map(str, payload['level_sizes']))}  calls: {payload['calls']}",
    ]
    if payload["missing"]:
        lines.append(f"missing nodes: {', '.join(payload['missing'])}")
    for n in payload["nodes"]:
        lines.append(
            f"  {n['id']}  in={n['prompt_tokens']:>6}  out={n['output_tokens']:>5}  "
            f"passages={n['bundle_passages']:>3}  children={','.join(n['children']) or '-'}"
        )
    node = payload.get("node")
    if node is None:
        lines += ["", "final summary:", payload["final_summary"] or "(none)"]
        return "\n".join(lines)
    lines += ["", f"node {node['id']} summary:", node["summary"], ""]
    if node["label_counts"]:
        lines.append("label  count")
        lines += [f"{label:>5}  {count:>5}" for label, count in node["label_counts"].items()]
        lines.append("")
    for p in node["passages"]:
        lines.append(f"[{p['label']}] {p['start']}-{p['end']}: {' '.join(p['text'].split())[:160]}")
    for d in node["diagnostics"]:
        lines.append(f"diagnostic: {json.dumps(d, sort_keys=True)}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    try:
        art = rebuild_tree(args.run_dir)
        payload = inspect_payload(art, args.node)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError:
        print(f"error: unknown node id {args.node!r}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(payload, indent=2) if args.json else _render_text(payload))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cahm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summarize", help="run the pipeline over a JSONL dataset")
    s.add_argument("dataset")
    s.add_argument("out_dir")
    s.add_argument("--strategy", choices=["extract", "retrieve", "cite"])
    s.add_argument("--mode", choices=["replace", "support"])
    s.add_argument("--baseline", choices=["zeroshot", "hmerge", "cite-hmerge"])
    s.add_argument("--chunk-tokens", type=int, default=8000)
    s.add_argument("--merge-context-tokens", type=int, default=8000)
    s.add_argument("--passage-tokens", type=int, default=100)
    s.add_argument("--target-context-tokens", type=int, default=1150)
    s.add_argument("--top-k", type=int, default=None)
    s.add_argument("--max-extract-sentences", type=int, default=20)
    s.add_argument("--tokenizer", choices=SCHEMES, default="byte-approx")
    s.add_argument("--vocab", default=None, help="vocabulary file for --tokenizer external-vocab")
    s.add_argument("--backend", choices=["http", "mock"], default="mock")
    s.add_argument("--mock-style", choices=MOCK_STYLES, default="echo-head")
    s.add_argument("--mock-sentences", type=int, default=3)
    s.add_argument("--mock-fixed-tokens", type=int, default=None)
    s.add_argument("--base-url", default=BackendConfig.base_url)
    s.add_argument("--model", default=BackendConfig.model)
    s.add_argument("--api-key-env", default=BackendConfig.api_key_env)
    s.add_argument("--max-output-tokens", type=int, default=BackendConfig.max_output_tokens)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--timeout", type=float, default=BackendConfig.request_timeout)
    s.add_argument("--max-retries", type=int, default=BackendConfig.max_retries)
    s.add_argument("--parallelism", type=int, default=BackendConfig.parallelism)
    s.add_argument("--context-window", type=int, default=BackendConfig.context_window)
    s.add_argument("--prompt-dir", default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--force", action="store_true", help="re-run rows that already completed")
    s.set_defaults(func=cmd_summarize)

    e = sub.add_parser("eval", help="score completed runs against reference summaries")
    e.add_argument("runs")
    e.add_argument("dataset")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="show a run's tree, or one node in detail")
    i.add_argument("run_dir")
    i.add_argument("--node", default=None)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
