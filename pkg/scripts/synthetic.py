"""Deterministic synthetic long documents for the experiment scripts."""

from __future__ import annotations

import random

VOCAB = (
    "court order plaintiff defendant motion filed granted denied settlement class action judge "
    "ruled claims counsel appeal district federal statute injunction remedy consent decree "
    "monitor compliance prison conditions county officials agreed hearing evidence witness"
).split()


def synthetic_document(n_tokens: int, seed: int = 0, bytes_per_token: int = 4) -> str:
    """Prose of exactly ``n_tokens`` byte-approx tokens with occasional paragraph breaks."""
    rng = random.Random(seed)
    pool = []
    for _ in range(400):
        words = [rng.choice(VOCAB) for _ in range(rng.randint(5, 16))]
        pool.append(" ".join(words).capitalize() + ".")
    target = n_tokens * bytes_per_token
    parts, size = [], 0
    while size < target:
        sep = "\n\n" if rng.random() < 0.1 else " "
        piece = rng.choice(pool) + sep
        parts.append(piece)
        size += len(piece)
    text = "".join(parts)[: target - 1].rstrip()
    return text + "." * (target - len(text))


def synthetic_reference(text: str, n_sentences: int = 5, seed: int = 0) -> str:
    rng = random.Random(seed)
    sentences = [s.strip() + "." for s in text.split(".") if s.strip()]
    return " ".join(rng.sample(sentences, min(n_sentences, len(sentences))))
