import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cahm.segmentation import BYTES_PER_TOKEN  # noqa: E402

VOCAB = (
    "court order plaintiff defendant motion filed granted denied settlement class action judge "
    "ruled claims counsel appeal district federal statute injunction remedy consent decree "
    "monitor compliance prison conditions county officials agreed hearing evidence witness"
).split()


def sentence_pool(seed=0, size=400):
    rng = random.Random(seed)
    pool = []
    for _ in range(size):
        words = [rng.choice(VOCAB) for _ in range(rng.randint(5, 16))]
        pool.append(" ".join(words).capitalize() + rng.choice([".", ".", ".", "?", "!"]))
    return pool


def synthetic_text(n_tokens, seed=0):
    """ASCII prose of exactly ``n_tokens`` byte-approx tokens, ending in a full stop."""
    rng = random.Random(seed)
    pool = sentence_pool(seed)
    target = n_tokens * BYTES_PER_TOKEN
    parts, size = [], 0
    while size < target + 200:
        s = rng.choice(pool)
        parts.append(s)
        size += len(s) + 1
    text = " ".join(parts)[:target]
    return text[:-1].rstrip() + "." if text[-2:-1] == " " else text[:-1] + "."


@pytest.fixture
def make_text():
    return synthetic_text
