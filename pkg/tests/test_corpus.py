"""Tokenizer, ROUGE-L, pair filtering, sentence selection, and corpus IO."""

from functools import lru_cache

import numpy as np
import pytest

from crossphrase.corpus import (
    CorpusFormatError,
    ExampleSentence,
    Phrase,
    PhrasePairRecord,
    Vocabulary,
    build_record,
    filter_phrase_pairs,
    is_time_expression,
    load_corpus,
    rouge_l,
    save_corpus,
    select_example_sentences,
    source_phrase_id,
    split_text,
    target_phrase_id,
    tokenize,
    vocab_sidecar_path,
)


# ---------------------------------------------------------------------------
# Tokenizer


def test_split_text_lowercases_and_splits_whitespace():
    assert split_text("The  Quick\tBrown\nFox") == ["the", "quick", "brown", "fox"]


def test_split_text_splits_cjk_per_character():
    assert split_text("深度 学习") == ["深", "度", "学", "习"]
    assert split_text("ニューラル") == list("ニューラル")
    assert split_text("한국어 모델") == ["한", "국", "어", "모", "델"]
    # a chunk containing any CJK character is split entirely per character
    assert split_text("GPU叢集") == ["g", "p", "u", "叢", "集"]
    assert split_text("plain words") == ["plain", "words"]


def test_vocabulary_sentinels_and_encode():
    v = Vocabulary.from_texts(["red green", "green blue"])
    assert len(v) == 5
    assert v.id_to_token[:2] == ["<pad>", "<unk>"]
    assert v.encode(["green", "never-seen"]) == [v.token_to_id["green"], 1]


def test_vocabulary_validation():
    with pytest.raises(CorpusFormatError):
        Vocabulary(["<pad>", "x"])  # missing unk sentinel
    with pytest.raises(CorpusFormatError):
        Vocabulary(["<pad>", "<unk>", "a", "a"])


def test_vocabulary_save_load_round_trip(tmp_path):
    v = Vocabulary.from_texts(["alpha beta", "gamma"])
    path = tmp_path / "v.vocab"
    v.save(path)
    assert Vocabulary.load(path) == v


def test_tokenize_rejects_empty():
    v = Vocabulary.from_texts(["a"])
    with pytest.raises(ValueError):
        tokenize("   ", v)


# ---------------------------------------------------------------------------
# ROUGE-L against an independent oracle


def _lcs_recursive(a: tuple, b: tuple) -> int:
    """Plain recursive LCS with memoization; shares nothing with the DP."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return go(i - 1, j - 1) + 1
        return max(go(i - 1, j), go(i, j - 1))

    return go(len(a), len(b))


def _rouge_oracle(a: tuple, b: tuple) -> float:
    lcs = _lcs_recursive(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return 2 * p * r / (p + r)


def test_rouge_matches_recursive_oracle_on_1000_random_pairs():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        a = tuple(rng.integers(0, 5, size=rng.integers(1, 12)).tolist())
        b = tuple(rng.integers(0, 5, size=rng.integers(1, 12)).tolist())
        assert rouge_l(a, b) == _rouge_oracle(a, b)


def test_rouge_hand_case_and_edges():
    # LCS("a b c d", "a c e") = "a c" -> P=1/2, R=2/3, F1=4/7
    assert rouge_l("a b c d".split(), "a c e".split()) == pytest.approx(4 / 7)
    assert rouge_l(["x"], ["x"]) == 1.0
    assert rouge_l(["x"], ["y"]) == 0.0
    with pytest.raises(ValueError):
        rouge_l([], ["x"])


# ---------------------------------------------------------------------------
# Pair filtering


def test_time_expressions():
    for s in ["12:30", "2024-01-02", "12", "3.5", "7 / 8", " 1,000 "]:
        assert is_time_expression(s), s
    for s in ["3pm", "a 12", "12 noon", "one"]:
        assert not is_time_expression(s), s


def test_filter_drops_near_copies_and_times():
    pairs = [
        ("deep learning", "deep learning"),        # identical, dropped
        ("the red house", "the red houses here"),  # high overlap, dropped
        ("12:30", "half past twelve"),             # time expression, dropped
        ("guten morgen", "good morning"),          # kept
        ("maison", "house"),                       # kept
    ]
    kept = filter_phrase_pairs(pairs)
    assert kept == [("guten morgen", "good morning"), ("maison", "house")]


def test_filter_keeps_moderate_overlap():
    # one shared token out of three on each side: F1 = 1/3, below the bar
    kept = filter_phrase_pairs([("alpha beta gamma", "alpha delta epsilon")])
    assert len(kept) == 1


def test_filter_threshold_is_strict():
    # F1 exactly 0.5: LCS=1 of lengths 1 and 3 -> P=1, R=1/3, F1=0.5; kept
    kept = filter_phrase_pairs([("alpha", "alpha beta gamma")])
    assert len(kept) == 1


def test_filter_rejects_empty_surface():
    with pytest.raises(ValueError):
        filter_phrase_pairs([("  ", "x")])


# ---------------------------------------------------------------------------
# Example sentence selection


def _mk_vocab(*texts):
    return Vocabulary.from_texts(texts)


def test_selection_length_rule_boundary():
    vocab = _mk_vocab("red fox", "the red fox runs", "a red fox")
    phrase = Phrase.from_surface("p", "en", "red fox", vocab)
    base = "red fox"  # 7 chars; needs sentences of >= 17 chars
    just_long_enough = "red fox runs aaa"  # 16 chars, too short
    ok = "the red fox runs."  # 17 chars
    picked = select_example_sentences(phrase, [just_long_enough, ok], vocab)
    assert [ex.text for ex in picked] == [ok]
    assert len(ok) == len(base) + 10


def test_selection_records_first_occurrence_span():
    vocab = _mk_vocab("red fox meets red fox again today")
    phrase = Phrase.from_surface("p", "en", "red fox", vocab)
    picked = select_example_sentences(
        phrase, ["red fox meets red fox again today"], vocab
    )
    assert len(picked) == 1
    assert (picked[0].span_start, picked[0].span_end) == (1, 2)
    assert picked[0].span_tokens() == phrase.tokens


def test_selection_requires_contiguous_match_and_caps():
    vocab = _mk_vocab("red fox", "red little fox", "the red fox one", "the red fox two")
    phrase = Phrase.from_surface("p", "en", "red fox", vocab)
    sentences = [
        "red little fox wanders",      # not contiguous
        "the red fox one aaaaaa",
        "the red fox two bbbbbb",
    ]
    picked = select_example_sentences(phrase, sentences, vocab, cap=1)
    assert len(picked) == 1
    assert picked[0].text.endswith("aaaaaa")
    with pytest.raises(ValueError):
        select_example_sentences(phrase, sentences, vocab, cap=0)


# ---------------------------------------------------------------------------
# Record invariants


def test_record_validates_spans():
    vocab = _mk_vocab(
        "red fox", "rot fuchs",
        "the red fox sits here quietly",
        "im wald rot fuchs lebt gern",
    )
    sentence = "the red fox sits here quietly"
    ids = tuple(tokenize(sentence, vocab))
    ex_src = ExampleSentence(sentence, ids, 2, 3)
    phrase = Phrase.from_surface("r1#src", "en", "red fox", vocab)
    assert ex_src.span_tokens() == phrase.tokens

    with pytest.raises(ValueError):
        ExampleSentence("x", (1, 2), 2, 5)  # span exceeds token count

    tgt_phrase = Phrase.from_surface("r1#tgt", "de", "rot fuchs", vocab)
    tgt_sentence = "im wald rot fuchs lebt gern"
    tgt_ex = ExampleSentence(tgt_sentence, tuple(tokenize(tgt_sentence, vocab)), 3, 4)
    assert tgt_ex.span_tokens() == tgt_phrase.tokens

    off_by_one = ExampleSentence(sentence, ids, 1, 2)  # covers "the red"
    with pytest.raises(ValueError):
        PhrasePairRecord("r1", phrase, tgt_phrase, (off_by_one,), (tgt_ex,))


def test_build_record_derives_phrase_ids():
    vocab = _mk_vocab("red fox", "rot fuchs", "a red fox sits here", "der rot fuchs ist da")
    src_ex = select_example_sentences(
        Phrase.from_surface("x", "en", "red fox", vocab), ["a red fox sits here"], vocab
    )
    tgt_ex = select_example_sentences(
        Phrase.from_surface("x", "de", "rot fuchs", vocab), ["der rot fuchs ist da"], vocab
    )
    rec = build_record("r7", "en", "red fox", "de", "rot fuchs", src_ex, tgt_ex, vocab)
    assert rec.source.id == source_phrase_id("r7") == "r7#src"
    assert rec.target.id == target_phrase_id("r7") == "r7#tgt"
    assert rec.source.language == "en"


# ---------------------------------------------------------------------------
# Corpus IO


def _small_corpus():
    texts = [
        "a red fox sits here",
        "the red fox runs far",
        "der rot fuchs ist da",
        "ein rot fuchs springt hoch",
    ]
    vocab = Vocabulary.from_texts(["red fox", "rot fuchs"] + texts)
    src_phrase = Phrase.from_surface("t", "en", "red fox", vocab)
    tgt_phrase = Phrase.from_surface("t", "de", "rot fuchs", vocab)
    src_ex = select_example_sentences(src_phrase, texts[:2], vocab)
    tgt_ex = select_example_sentences(tgt_phrase, texts[2:], vocab)
    records = [
        build_record("r1", "en", "red fox", "de", "rot fuchs", src_ex, tgt_ex, vocab),
        build_record("r2", "en", "red fox", "de", "rot fuchs", src_ex[:1], tgt_ex[:1], vocab),
    ]
    return records, vocab


def test_corpus_round_trip(tmp_path):
    records, vocab = _small_corpus()
    path = tmp_path / "pairs.corpus"
    save_corpus(records, path, vocab)
    loaded, loaded_vocab = load_corpus(path)
    assert loaded_vocab == vocab
    assert loaded == records


def test_corpus_save_is_deterministic(tmp_path):
    records, vocab = _small_corpus()
    a, b = tmp_path / "a.corpus", tmp_path / "b.corpus"
    save_corpus(records, a, vocab)
    save_corpus(records, b, vocab)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.corpus.vocab").exists()


def test_load_reports_line_numbers(tmp_path):
    records, vocab = _small_corpus()
    path = tmp_path / "pairs.corpus"
    save_corpus(records, path, vocab)

    lines = path.read_text(encoding="utf-8").splitlines()

    broken = list(lines)
    broken[1] = broken[1].replace("rot fuchs", "rot fuchs kaputt", 1)
    path.write_text("\n".join(broken) + "\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(path)
    assert err.value.line_no == 2

    too_few = list(lines)
    too_few[0] = too_few[0].rsplit("\t", 1)[0]
    path.write_text("\n".join(too_few) + "\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(path)
    assert err.value.line_no == 1


def test_load_rejects_duplicate_record_ids(tmp_path):
    records, vocab = _small_corpus()
    path = tmp_path / "pairs.corpus"
    save_corpus([records[0]], path, vocab)
    line = path.read_text(encoding="utf-8")
    path.write_text(line + line, encoding="utf-8")
    with pytest.raises(CorpusFormatError) as err:
        load_corpus(path)
    assert "duplicate" in str(err.value)


def test_save_rejects_control_characters(tmp_path):
    records, vocab = _small_corpus()
    bad = PhrasePairRecord(
        "r9\x01",
        records[0].source,
        records[0].target,
        records[0].source_examples,
        records[0].target_examples,
    )
    with pytest.raises(CorpusFormatError):
        save_corpus([bad], tmp_path / "bad.corpus", vocab)


def test_vocab_sidecar_naming():
    assert vocab_sidecar_path("x/y.corpus") == "x/y.corpus.vocab"
