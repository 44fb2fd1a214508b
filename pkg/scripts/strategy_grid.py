"""Run every strategy x mode combination and the three baselines side by side.

By default this uses synthetic documents and the mock backend, so it runs
offline in a few seconds and shows tree shapes, call counts and bundle sizes.
Point ``--dataset`` at a JSONL file (id, document, reference_summary) and pass
``--backend http --base-url ... --model ...`` to run against a real endpoint;
ROUGE is reported whenever references are present.

    python3 scripts/strategy_grid.py --docs 3 --tokens 40000 --out grid.json
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
from pathlib import Path

from synthetic import synthetic_document, synthetic_reference

from cahm import BackendConfig, Document, PipelineConfig, make_backend, rouge, run_pipeline
from cahm.cli import load_dataset

CONFIGS = [
    {"baseline": "zeroshot"},
    {"baseline": "hmerge"},
    {"baseline": "cite-hmerge"},
    *({"strategy": s, "mode": m} for s in ("extract", "retrieve", "cite") for m in ("replace", "support")),
]


def load_documents(args) -> list[Document]:
    if args.dataset:
        return [row.to_document() for row in load_dataset(args.dataset)]
    docs = []
    for i in range(args.docs):
        text = synthetic_document(args.tokens, seed=args.seed + i)
        docs.append(Document(f"synthetic-{i}", text, synthetic_reference(text, seed=i)))
    return docs


def mean(values):
    return statistics.fmean(values) if values else None


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dataset", default=None)
    parser.add_argument("--docs", type=int, default=3)
    parser.add_argument("--tokens", type=int, default=40_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--chunk-tokens", type=int, default=8000)
    parser.add_argument("--merge-context-tokens", type=int, default=8000)
    parser.add_argument("--backend", choices=["mock", "http"], default="mock")
    parser.add_argument("--base-url", default=BackendConfig.base_url)
    parser.add_argument("--model", default=BackendConfig.model)
    parser.add_argument("--mock-fixed-tokens", type=int, default=1000)
    parser.add_argument("--runs-dir", default=None, help="persist every run under this directory")
    parser.add_argument("--out", default=None, help="write the result table as JSON")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    docs = load_documents(args)
    results = []
    print(f"{'config':<18}{'levels (first doc)':<22}{'calls':>7}{'ctx passages':>14}{'GM F1':>8}")
    for overrides in CONFIGS:
        cites = overrides.get("strategy") == "cite" or overrides.get("baseline") == "cite-hmerge"
        style = "cite-subset" if cites else "echo-head"
        backend_cfg = BackendConfig(kind=args.backend, base_url=args.base_url, model=args.model,
                                    mock_style=style, mock_fixed_tokens=args.mock_fixed_tokens)
        cfg = PipelineConfig(chunk_tokens=args.chunk_tokens, merge_context_tokens=args.merge_context_tokens,
                             backend=backend_cfg, **overrides)
        backend = make_backend(backend_cfg, cfg.tokenizer)
        calls, bundle_sizes, scores, shapes = 0, [], [], []
        for doc in docs:
            out_dir = Path(args.runs_dir) / cfg.name / doc.id if args.runs_dir else None
            art = run_pipeline(doc, cfg, backend=backend, out_dir=out_dir)
            calls += art.call_count
            shapes.append(art.level_sizes)
            bundle_sizes += [len(n.bundle.passages) for n in art.nodes.values() if n.bundle]
            if doc.reference_summary:
                scores.append(rouge(art.final_summary, doc.reference_summary).geometric_mean_f1)
        row = {
            "config": cfg.name,
            "level_sizes": shapes,
            "calls": calls,
            "mean_bundle_passages": mean(bundle_sizes),
            "mean_geometric_f1": mean(scores),
        }
        results.append(row)
        ctx = f"{row['mean_bundle_passages']:.1f}" if bundle_sizes else "-"
        gm = f"{row['mean_geometric_f1']:.4f}" if scores else "-"
        print(f"{cfg.name:<18}{' -> '.join(map(str, shapes[0])):<22}{calls:>7}{ctx:>14}{gm:>8}")

    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
