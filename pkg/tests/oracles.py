"""Independent reference implementations used only by the tests."""

import math
from fractions import Fraction


def cite_selection_oracle(label_counts, passage_labels, k):
    """Citation-ranked passage choice with a coverage top-up, written out step by step.

    ``passage_labels[i]`` is the label that owns passage i. Labels that share a
    citation count are handled together as one entry of the sorted count list.
    Returns the set of selected passage indices.
    """
    m = len(passage_labels)

    def get_passages_by_label(labels):
        return [i for i in range(m) if passage_labels[i] in labels]

    grouped = {}
    for label in label_counts:
        count = label_counts[label]
        if count > 0 and get_passages_by_label({label}):
            grouped.setdefault(count, set()).add(label)
    ordered = sorted(grouped.items(), key=lambda item: item[0], reverse=True)

    selected = []
    label_to_select = None
    for count, labels in ordered:
        members = get_passages_by_label(labels)
        if len(members) + len(selected) > k:
            label_to_select = labels
            break
        selected += members

    if label_to_select is None or len(selected) == k:
        return set(selected)
    remaining = get_passages_by_label(label_to_select)

    sections = [Fraction(2 * i + 1, 2 * k) for i in range(k)]

    def position(i):
        return Fraction(2 * i + 1, 2 * m)

    for p in selected:
        best = None
        for s in sections:
            d = abs(position(p) - s)
            if best is None or d < best[0]:
                best = (d, s)
        sections.remove(best[1])

    while len(selected) < k and remaining:
        best = None
        for c in remaining:
            for s in sections:
                key = (abs(position(c) - s), c, s)
                if best is None or key < best:
                    best = key
        _, c, s = best
        selected.append(c)
        remaining.remove(c)
        sections.remove(s)
    return set(selected)


def bm25_by_hand(query_terms, docs, k1=1.2, b=0.75):
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    scores = []
    for d in docs:
        total = 0.0
        for q in query_terms:
            f = d.count(q)
            if f == 0:
                continue
            df = sum(1 for other in docs if q in other)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            total += idf * (f * (k1 + 1)) / (f + k1 * (1 - b + b * len(d) / avgdl))
        scores.append(total)
    return scores


def lcs_brute(a, b):
    """LCS length by memoised recursion (independent of the DP table)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)
