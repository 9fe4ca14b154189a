"""Bilingual phrase-pair corpus: tokenization, filtering, selection, file IO.

A corpus is a list of records, each holding one source phrase and one
target phrase (asserted translations of each other) plus the example
sentences that contain them.  Records serialize one per line in a
tab-separated UTF-8 text format with a sidecar vocabulary file.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "PAD_TOKEN",
    "UNK_TOKEN",
    "Vocabulary",
    "Phrase",
    "ExampleSentence",
    "PhrasePairRecord",
    "CorpusFormatError",
    "split_text",
    "tokenize",
    "rouge_l",
    "is_time_expression",
    "filter_phrase_pairs",
    "select_example_sentences",
    "build_record",
    "save_corpus",
    "load_corpus",
    "vocab_sidecar_path",
]

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Field and list-element separators for the corpus line format.
_FIELD_SEP = "\t"
_LIST_SEP = "\x1f"

# Character ranges treated as CJK for per-character splitting.
_CJK_RANGES = (
    (0x3040, 0x30FF),  # hiragana, katakana
    (0x3400, 0x4DBF),  # ideograph extension A
    (0x4E00, 0x9FFF),  # unified ideographs
    (0xAC00, 0xD7AF),  # hangul syllables
)


class CorpusFormatError(ValueError):
    """A corpus or vocabulary file failed validation."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


def _is_cjk_char(ch: str) -> bool:
    cp = ord(ch)
    for lo, hi in _CJK_RANGES:
        if lo <= cp <= hi:
            return True
    return False


def split_text(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split CJK-bearing chunks per character."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        if any(_is_cjk_char(ch) for ch in chunk):
            tokens.extend(chunk)
        else:
            tokens.append(chunk)
    return tokens


class Vocabulary:
    """Token <-> contiguous id mapping with reserved padding and unknown ids."""

    def __init__(self, tokens: Sequence[str]):
        # tokens: full id-ordered list including the two sentinels.
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise CorpusFormatError(
                f"vocabulary must start with {PAD_TOKEN!r}, {UNK_TOKEN!r}"
            )
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise CorpusFormatError(f"duplicate token {tok!r} at id {i}")
            self.token_to_id[tok] = i

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Build from raw tokens, deduplicated in first-seen order."""
        ordered: list[str] = [PAD_TOKEN, UNK_TOKEN]
        seen = {PAD_TOKEN, UNK_TOKEN}
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                ordered.append(tok)
        return cls(ordered)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        def gen():
            for text in texts:
                yield from split_text(text)

        return cls.from_tokens(gen())

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = UNK_ID
        table = self.token_to_id
        return [table.get(tok, unk) for tok in tokens]

    def save(self, path) -> None:
        for tok in self.id_to_token:
            if "\n" in tok or "\r" in tok:
                raise CorpusFormatError(f"token contains a line break: {tok!r}")
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = fh.read().splitlines()
        return cls(tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    tokens = split_text(text)
    if not tokens:
        raise ValueError("tokenize: text has no tokens")
    return vocab.encode(tokens)


@dataclass(frozen=True)
class Phrase:
    """A surface phrase in one language, with its token ids."""

    id: str
    language: str
    surface: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"phrase {self.id!r} has no tokens")

    @classmethod
    def from_surface(cls, id: str, language: str, surface: str, vocab: Vocabulary) -> "Phrase":
        return cls(id, language, surface, tuple(tokenize(surface, vocab)))


@dataclass(frozen=True)
class ExampleSentence:
    """A sentence containing a phrase, with a 1-based inclusive token span."""

    text: str
    tokens: tuple[int, ...]
    span_start: int
    span_end: int

    def __post_init__(self):
        n = len(self.tokens)
        if not (1 <= self.span_start <= self.span_end <= n):
            raise ValueError(
                f"span [{self.span_start}, {self.span_end}] out of range for {n} tokens"
            )

    def span_tokens(self) -> tuple[int, ...]:
        return self.tokens[self.span_start - 1 : self.span_end]


@dataclass(frozen=True)
class PhrasePairRecord:
    """One aligned phrase pair with example sentences on both sides."""

    id: str
    source: Phrase
    target: Phrase
    source_examples: tuple[ExampleSentence, ...]
    target_examples: tuple[ExampleSentence, ...]

    def __post_init__(self):
        if not self.source_examples or not self.target_examples:
            raise ValueError(f"record {self.id!r} has an empty example list")
        for ex in self.source_examples:
            if ex.span_tokens() != self.source.tokens:
                raise ValueError(f"record {self.id!r}: source span mismatch")
        for ex in self.target_examples:
            if ex.span_tokens() != self.target.tokens:
                raise ValueError(f"record {self.id!r}: target span mismatch")


def source_phrase_id(record_id: str) -> str:
    return record_id + "#src"


def target_phrase_id(record_id: str) -> str:
    return record_id + "#tgt"


def build_record(
    record_id: str,
    source_language: str,
    source_surface: str,
    target_language: str,
    target_surface: str,
    source_examples: Sequence[ExampleSentence],
    target_examples: Sequence[ExampleSentence],
    vocab: Vocabulary,
) -> PhrasePairRecord:
    source = Phrase.from_surface(source_phrase_id(record_id), source_language, source_surface, vocab)
    target = Phrase.from_surface(target_phrase_id(record_id), target_language, target_surface, vocab)
    return PhrasePairRecord(
        record_id, source, target, tuple(source_examples), tuple(target_examples)
    )


# ---------------------------------------------------------------------------
# ROUGE-L


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """ROUGE-L F1 over two token sequences (any hashable elements).

    F1 = 2PR / (P + R) with P = LCS/len(candidate), R = LCS/len(reference);
    defined as 0 when the LCS is empty.
    """
    if len(candidate) == 0 or len(reference) == 0:
        raise ValueError("rouge_l: empty token sequence")
    m, n = len(candidate), len(reference)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ci = candidate[i - 1]
        for j in range(1, n + 1):
            if ci == reference[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    lcs = prev[n]
    if lcs == 0:
        return 0.0
    precision = lcs / m
    recall = lcs / n
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Pair filtering

# Entirely digits, or digit runs joined by date/time separators.
_TIME_PATTERN = re.compile(r"\d+(?:[\s.,/:\-]+\d+)*")


def is_time_expression(surface: str) -> bool:
    return _TIME_PATTERN.fullmatch(surface.strip()) is not None


def filter_phrase_pairs(pairs: Sequence[tuple[str, str]]) -> list[tuple[str, str]]:
    """Drop near-copy pairs and bare time/number expressions.

    A pair is removed when both directional ROUGE-L scores over its
    token strings exceed 0.5, or when either surface is a bare numeric
    or date-like expression.
    """
    kept: list[tuple[str, str]] = []
    for src, tgt in pairs:
        src_tokens = split_text(src)
        tgt_tokens = split_text(tgt)
        if not src_tokens or not tgt_tokens:
            raise ValueError(f"empty surface in pair ({src!r}, {tgt!r})")
        if is_time_expression(src) or is_time_expression(tgt):
            continue
        if (
            rouge_l(src_tokens, tgt_tokens) > 0.5
            and rouge_l(tgt_tokens, src_tokens) > 0.5
        ):
            continue
        kept.append((src, tgt))
    return kept


# ---------------------------------------------------------------------------
# Example sentence selection


def _find_subsequence(haystack: Sequence[int], needle: Sequence[int]) -> int:
    """0-based index of the first contiguous occurrence, or -1."""
    n, k = len(haystack), len(needle)
    first = needle[0]
    for i in range(n - k + 1):
        if haystack[i] == first and tuple(haystack[i : i + k]) == tuple(needle):
            return i
    return -1


def select_example_sentences(
    phrase: Phrase,
    sentences: Iterable[str],
    vocab: Vocabulary,
    cap: int = 32,
) -> list[ExampleSentence]:
    """Scan sentences in order and keep up to ``cap`` usable ones.

    A sentence is usable when it is at least 10 characters longer than
    the phrase surface and its token ids contain the phrase's token
    sequence contiguously; the span records the first occurrence,
    1-based inclusive.
    """
    if cap < 1:
        raise ValueError(f"cap must be positive, got {cap}")
    out: list[ExampleSentence] = []
    for sentence in sentences:
        if len(out) >= cap:
            break
        if len(sentence) < len(phrase.surface) + 10:
            continue
        tokens = split_text(sentence)
        if not tokens:
            continue
        ids = tuple(vocab.encode(tokens))
        pos = _find_subsequence(ids, phrase.tokens)
        if pos < 0:
            continue
        out.append(
            ExampleSentence(sentence, ids, pos + 1, pos + len(phrase.tokens))
        )
    return out


# ---------------------------------------------------------------------------
# Corpus file IO

_CONTROL = re.compile(r"[\x00-\x1f\x7f]")


def _check_text(value: str, what: str) -> str:
    if _CONTROL.search(value):
        raise CorpusFormatError(f"{what} contains a control character: {value!r}")
    return value


def _pack_examples(examples: Sequence[ExampleSentence]) -> str:
    parts: list[str] = []
    for ex in examples:
        parts.append(_check_text(ex.text, "sentence"))
        parts.append(str(ex.span_start))
        parts.append(str(ex.span_end))
    return _LIST_SEP.join(parts)


def _unpack_examples(
    field: str, phrase: Phrase, vocab: Vocabulary, line_no: int
) -> tuple[ExampleSentence, ...]:
    parts = field.split(_LIST_SEP)
    if len(parts) % 3 != 0:
        raise CorpusFormatError(
            f"example list length {len(parts)} not divisible by 3", line_no
        )
    out: list[ExampleSentence] = []
    for i in range(0, len(parts), 3):
        text = parts[i]
        try:
            start = int(parts[i + 1])
            end = int(parts[i + 2])
        except ValueError:
            raise CorpusFormatError(
                f"non-integer span bounds {parts[i + 1]!r}, {parts[i + 2]!r}", line_no
            ) from None
        try:
            ids = tuple(tokenize(text, vocab))
            ex = ExampleSentence(text, ids, start, end)
        except ValueError as err:
            raise CorpusFormatError(str(err), line_no) from None
        if ex.span_tokens() != phrase.tokens:
            raise CorpusFormatError(
                f"span [{start}, {end}] does not cover the phrase tokens", line_no
            )
        out.append(ex)
    if not out:
        raise CorpusFormatError("empty example list", line_no)
    return tuple(out)


def save_corpus(records: Sequence[PhrasePairRecord], path, vocab: Vocabulary) -> None:
    """Write records one per line plus the sidecar vocabulary file."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fields = [
                _check_text(rec.id, "record id"),
                _check_text(rec.source.language, "language"),
                _check_text(rec.source.surface, "surface"),
                _check_text(rec.target.language, "language"),
                _check_text(rec.target.surface, "surface"),
                _pack_examples(rec.source_examples),
                _pack_examples(rec.target_examples),
            ]
            fh.write(_FIELD_SEP.join(fields) + "\n")
    vocab.save(vocab_sidecar_path(path))


def vocab_sidecar_path(corpus_path) -> str:
    return str(corpus_path) + ".vocab"


def load_corpus(path, vocab: Optional[Vocabulary] = None) -> tuple[list[PhrasePairRecord], Vocabulary]:
    """Read records, validating every span against the re-tokenized text."""
    if vocab is None:
        vocab = Vocabulary.load(vocab_sidecar_path(path))
    records: list[PhrasePairRecord] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split(_FIELD_SEP)
            if len(fields) != 7:
                raise CorpusFormatError(
                    f"expected 7 tab-separated fields, got {len(fields)}", line_no
                )
            rec_id, src_lang, src_surface, tgt_lang, tgt_surface, src_ex, tgt_ex = fields
            if rec_id in seen_ids:
                raise CorpusFormatError(f"duplicate record id {rec_id!r}", line_no)
            seen_ids.add(rec_id)
            try:
                source = Phrase.from_surface(
                    source_phrase_id(rec_id), src_lang, src_surface, vocab
                )
                target = Phrase.from_surface(
                    target_phrase_id(rec_id), tgt_lang, tgt_surface, vocab
                )
            except ValueError as err:
                raise CorpusFormatError(str(err), line_no) from None
            record = PhrasePairRecord(
                rec_id,
                source,
                target,
                _unpack_examples(src_ex, source, vocab, line_no),
                _unpack_examples(tgt_ex, target, vocab, line_no),
            )
            records.append(record)
    return records, vocab
