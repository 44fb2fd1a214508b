import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cahm.segmentation import (
    ConfigurationError,
    Document,
    TokenizerSpec,
    chunk_document,
    count_tokens,
    sentence_spans,
    split_passages,
    split_segments,
    split_sentences,
    word_tokens,
)
from conftest import synthetic_text

BYTE = TokenizerSpec("byte-approx")
WORDS = TokenizerSpec("whitespace-words")


def test_count_empty_is_zero():
    assert count_tokens("", BYTE) == 0
    assert count_tokens("", WORDS) == 0


def test_count_whitespace_words():
    assert count_tokens("a b c", WORDS) == 3


def test_count_byte_approx_matches_direct_byte_count():
    paragraph = " ".join(["lorem", "ipsum", "dolor", "sit", "amét"] * 200)
    assert len(paragraph.split()) == 1000
    expected = math.ceil(len(paragraph.encode("utf-8")) / 4)
    assert count_tokens(paragraph, BYTE) == expected


def test_external_vocab_missing_file(tmp_path):
    spec = TokenizerSpec("external-vocab", str(tmp_path / "nope.txt"))
    with pytest.raises(ConfigurationError):
        count_tokens("hello", spec)


def test_external_vocab_greedy_longest_match(tmp_path):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("hel\nhello\n wor\nld\n", encoding="utf-8")
    spec = TokenizerSpec("external-vocab", str(vocab))
    # "hello" + " wor" + "ld" + "!" (unknown char)
    assert count_tokens("hello world!", spec) == 4


def test_unknown_scheme_rejected():
    with pytest.raises(ConfigurationError):
        TokenizerSpec("sentencepiece")


@given(st.text(max_size=200), st.text(max_size=200))
def test_count_additive_up_to_one(a, b):
    for spec in (BYTE, WORDS):
        joined = count_tokens(a + b, spec)
        assert abs(joined - (count_tokens(a, spec) + count_tokens(b, spec))) <= 1


# --- sentences ---


def test_split_sentences_rule():
    assert split_sentences("A. B? C!") == ["A.", "B?", "C!"]


def test_split_sentences_abbreviation():
    assert split_sentences("Dr. Smith left.") == ["Dr. Smith left."]
    assert split_sentences("See Smith v. Jones for details. Then stop.") == [
        "See Smith v. Jones for details.",
        "Then stop.",
    ]


def test_split_sentences_empty():
    assert split_sentences("") == []
    assert split_sentences("   \n ") == []


def test_split_sentences_quotes():
    assert split_sentences('He said "stop." "Fine," she said.') == ['He said "stop."', '"Fine," she said.']


@given(st.text(alphabet="ab .?!\n\"AB", max_size=120))
def test_sentences_lossless_modulo_whitespace(text):
    spans = sentence_spans(text)
    for (s1, e1), (s2, _) in zip(spans, spans[1:]):
        assert e1 <= s2
    rebuilt = "".join(text[s:e] for s, e in spans)
    assert rebuilt == "".join(text.split()) or "".join(rebuilt.split()) == "".join(text.split())


# --- chunks ---


def test_chunk_20k_document_into_three():
    text = synthetic_text(20_000, seed=1)
    assert count_tokens(text, BYTE) == 20_000
    chunks = chunk_document(Document("d", text), 8000, BYTE)
    assert len(chunks) == 3
    assert chunks[0].token_count <= 8000 and chunks[1].token_count <= 8000
    assert sum(c.token_count for c in chunks) >= 20_000
    assert "".join(c.text for c in chunks) == text


def test_chunk_short_document_is_single_identical_chunk():
    doc = Document("d", "Short text. Two sentences.")
    chunks = chunk_document(doc, 8000)
    assert len(chunks) == 1 and chunks[0].text == doc.text


def test_156k_token_document_gives_twenty_chunks():
    text = synthetic_text(156_447, seed=2)
    assert math.ceil(156_447 / 8000) == 20
    assert len(chunk_document(Document("d", text), 8000, BYTE)) == 20


def test_chunk_prefers_sentence_ends():
    text = synthetic_text(5000, seed=3)
    chunks = chunk_document(Document("d", text), 1000, BYTE)
    for c in chunks[:-1]:
        assert c.text.rstrip()[-1] in ".?!"


def test_chunk_falls_back_to_hard_split():
    text = "x" * 2000
    chunks = chunk_document(Document("d", text), 100, BYTE)
    assert "".join(c.text for c in chunks) == text
    assert all(c.token_count == 100 for c in chunks)


def test_chunk_errors():
    with pytest.raises(ValueError):
        chunk_document(Document("d", ""), 8000)
    with pytest.raises(ValueError):
        chunk_document(Document("d", "text"), 63)


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1, max_size=3000), st.integers(64, 400), st.sampled_from([BYTE, WORDS]))
def test_chunking_lossless_and_bounded(text, limit, spec):
    chunks = chunk_document(Document("d", text), limit, spec)
    assert "".join(c.text for c in chunks) == text
    for c in chunks:
        assert c.token_count <= limit
        assert text[c.start:c.end] == c.text


# --- passages ---


def test_thousand_tokens_into_ten_passages():
    text = synthetic_text(1000, seed=4)
    passages = split_passages(text, 100, BYTE)
    assert [p.label for p in passages] == list(range(1, 11))
    assert all(count_tokens(p.text, BYTE) == 100 for p in passages)
    assert "".join(p.text for p in passages) == text


def test_short_chunk_single_passage():
    text = synthetic_text(50, seed=5)
    passages = split_passages(text, 100)
    assert len(passages) == 1 and passages[0].label == 1 and passages[0].text == text


def test_passages_carry_origin_offsets():
    doc = "Preamble. " + synthetic_text(400, seed=6)
    passages = split_passages(doc[10:], 100, doc_id="d", offset=10)
    for p in passages:
        assert doc[p.origin.start:p.origin.end] == p.text


def test_passage_errors():
    with pytest.raises(ValueError):
        split_passages("", 100)
    with pytest.raises(ValueError):
        split_passages("text", 9)


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1, max_size=2000), st.integers(10, 150), st.sampled_from([BYTE, WORDS]))
def test_passages_lossless_labels_and_bounds(text, size, spec):
    passages = split_passages(text, size, spec)
    assert "".join(p.text for p in passages) == text
    assert [p.label for p in passages] == list(range(1, len(passages) + 1))
    for p in passages[:-1]:
        assert size - 1 <= p.token_count <= size


def test_split_segments_never_crosses_borders():
    source = synthetic_text(600, seed=7)
    parts = split_passages(source, 150, doc_id="d")
    pieces = split_segments(parts, 100, BYTE)
    assert [p.label for p in pieces] == list(range(1, len(pieces) + 1))
    for p in pieces:
        assert source[p.origin.start:p.origin.end] == p.text
        assert any(q.origin.start <= p.origin.start and p.origin.end <= q.origin.end for q in parts)


def test_word_tokens():
    assert word_tokens("The cat's hat, (big)!") == ["the", "cats", "hat", "big"]
