"""Merge-tree shape as a function of the merge limit.

Summarises one synthetic document with the HMerge baseline and a mock backend
that returns summaries of a fixed length, then prints the node count per level
for each merge limit. With the defaults (156,447 tokens, 8K chunks, 1,000-token
summaries) the 8K limit gives 20 -> 3 -> 1 and 32K gives 20 -> 1.

    python3 scripts/tree_shape.py --limits 8000 16000 32000
"""

from __future__ import annotations

import argparse
import logging
import time

from synthetic import synthetic_document

from cahm import BackendConfig, Document, PipelineConfig, run_pipeline


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tokens", type=int, default=156_447)
    parser.add_argument("--chunk-tokens", type=int, default=8000)
    parser.add_argument("--summary-tokens", type=int, default=1000)
    parser.add_argument("--limits", type=int, nargs="+", default=[8000, 16000, 32000])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    doc = Document("synthetic", synthetic_document(args.tokens, args.seed))
    backend = BackendConfig(mock_fixed_tokens=args.summary_tokens)
    print(f"document: {args.tokens} tokens, chunks of {args.chunk_tokens}, summaries of {args.summary_tokens}")
    for limit in args.limits:
        cfg = PipelineConfig(baseline="hmerge", chunk_tokens=args.chunk_tokens,
                             merge_context_tokens=limit, backend=backend)
        t0 = time.perf_counter()
        art = run_pipeline(doc, cfg)
        shape = " -> ".join(map(str, art.level_sizes))
        print(f"merge limit {limit:>6}: {shape:<16} calls={art.call_count:<3} ({time.perf_counter() - t0:.2f}s)")


if __name__ == "__main__":
    main()
