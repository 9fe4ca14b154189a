"""Exact nearest-phrase retrieval over unit-norm representation rows.

The index is a dense (N, d) float64 matrix of candidate phrase vectors
plus their ids and the fingerprint of the encoder that produced them.
Queries are scored by inner product against every row (which equals
cosine similarity since all rows and queries are unit-norm), ranked
descending with ties broken toward the lower row index.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .corpus import ExampleSentence, Phrase
from .encoder import PhraseEncoder, encoder_fingerprint, infer_phrase_vectors

__all__ = [
    "INDEX_VERSION",
    "PhraseIndex",
    "RetrievalResult",
    "IndexFormatError",
    "FingerprintMismatchError",
    "build_index",
    "query_index",
    "accuracy_at_1",
    "save_index",
    "load_index",
    "check_fingerprint",
]

INDEX_MAGIC = b"PIX1"
INDEX_VERSION = 1
UNIT_NORM_TOL = 1e-6


class IndexFormatError(ValueError):
    """The file is not a readable index."""


class FingerprintMismatchError(RuntimeError):
    """Query-side encoder differs from the one that built the index."""

    def __init__(self, index_fp: str, encoder_fp: str):
        self.index_fingerprint = index_fp
        self.encoder_fingerprint = encoder_fp
        super().__init__(
            "index was built by a different encoder "
            f"(index {index_fp[:12]}..., query {encoder_fp[:12]}...)"
        )


@dataclass
class PhraseIndex:
    """Candidate matrix (unit-norm rows), aligned ids, builder fingerprint."""

    matrix: np.ndarray
    phrase_ids: list[str]
    fingerprint: str
    _id_to_row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] == 0:
            raise IndexFormatError(f"index matrix must be non-empty 2-D, got {m.shape}")
        if len(self.phrase_ids) != m.shape[0]:
            raise IndexFormatError(
                f"{len(self.phrase_ids)} ids for {m.shape[0]} matrix rows"
            )
        norms = np.sqrt((m**2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise IndexFormatError("index rows are not unit-norm")
        self.matrix = m
        self._id_to_row = {}
        for i, pid in enumerate(self.phrase_ids):
            if pid in self._id_to_row:
                raise IndexFormatError(f"duplicate phrase id {pid!r}")
            self._id_to_row[pid] = i

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def row_for(self, phrase_id: str) -> int:
        if phrase_id not in self._id_to_row:
            raise KeyError(f"phrase id {phrase_id!r} is not in the index")
        return self._id_to_row[phrase_id]


@dataclass
class RetrievalResult:
    query_id: Optional[str]
    ranked: list[tuple[str, float]]


def build_index(
    encoder: PhraseEncoder,
    entries: Sequence[tuple[Phrase, Sequence[ExampleSentence]]],
    use_projection: bool = True,
    layer: Optional[int] = None,
    sentence_cap: Optional[int] = None,
) -> PhraseIndex:
    """Encode every (phrase, examples) entry into one index row.

    ``sentence_cap`` limits how many example sentences feed each row
    (all of them by default).
    """
    if not entries:
        raise ValueError("build_index: no entries")
    if sentence_cap is not None and sentence_cap < 1:
        raise ValueError(f"sentence_cap must be positive, got {sentence_cap}")
    rows = []
    ids = []
    for phrase, examples in entries:
        used = examples if sentence_cap is None else examples[:sentence_cap]
        _, projected = infer_phrase_vectors(
            encoder, used, use_projection=use_projection, layer=layer
        )
        rows.append(projected[0])
        ids.append(phrase.id)
    return PhraseIndex(np.stack(rows), ids, encoder_fingerprint(encoder))


# Rows per scan chunk.  Fixed so scores never depend on the thread count:
# threads only distribute chunks, each chunk's arithmetic is identical.
SCAN_CHUNK_ROWS = 1024


def _score_all(index: PhraseIndex, q: np.ndarray, threads: int) -> np.ndarray:
    n = len(index)
    spans = [(lo, min(lo + SCAN_CHUNK_ROWS, n)) for lo in range(0, n, SCAN_CHUNK_ROWS)]
    scores = np.empty(n)

    def scan(span: tuple[int, int]) -> None:
        lo, hi = span
        scores[lo:hi] = index.matrix[lo:hi] @ q

    if threads == 1 or len(spans) == 1:
        for span in spans:
            scan(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(scan, spans))
    return scores


def query_index(
    index: PhraseIndex,
    query_vector: np.ndarray,
    k: int,
    query_id: Optional[str] = None,
    threads: int = 1,
) -> RetrievalResult:
    """Exact top-k by inner product; k is clamped to the index size.

    Ranking is descending by score with ties broken toward the lower
    row index, and is byte-identical for any ``threads`` value.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.matrix.shape[1]:
        raise ValueError(
            f"query has dim {q.shape[0]}, index rows have dim {index.matrix.shape[1]}"
        )
    norm = float(np.sqrt((q**2).sum()))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"query vector is not unit-norm (norm {norm:.6f})")
    k = min(k, len(index))

    scores = _score_all(index, q, threads)
    best = np.argsort(-scores, kind="stable")[:k]
    ranked = [(index.phrase_ids[int(i)], float(scores[int(i)])) for i in best]
    return RetrievalResult(query_id=query_id, ranked=ranked)


def accuracy_at_1(
    index: PhraseIndex,
    queries: Sequence[tuple[Optional[str], np.ndarray, str]],
    threads: int = 1,
) -> float:
    """Fraction of (query_id, vector, gold_id) whose top hit is the gold id."""
    if not queries:
        raise ValueError("accuracy_at_1: no queries")
    hits = 0
    for query_id, vector, gold_id in queries:
        index.row_for(gold_id)  # gold id must exist, missing is an input error
        result = query_index(index, vector, k=1, query_id=query_id, threads=threads)
        if result.ranked[0][0] == gold_id:
            hits += 1
    return hits / len(queries)


# ---------------------------------------------------------------------------
# Index file format


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise IndexFormatError(f"truncated index while reading {what}")
    return raw


def _read_str(fh: BinaryIO, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_index(index: PhraseIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        _write_str(fh, index.fingerprint)
        n, d = index.matrix.shape
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f8").tobytes())
        for pid in index.phrase_ids:
            _write_str(fh, pid)


def load_index(path) -> PhraseIndex:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != INDEX_VERSION:
            raise IndexFormatError(
                f"unsupported index version {version}, expected {INDEX_VERSION}"
            )
        fingerprint = _read_str(fh, "fingerprint")
        n, d = struct.unpack("<II", _read_exact(fh, 8, "matrix shape"))
        raw = _read_exact(fh, n * d * 8, "matrix data")
        matrix = np.frombuffer(raw, dtype="<f8").reshape(n, d).copy()
        ids = [_read_str(fh, f"id {i}") for i in range(n)]
        if fh.read(1):
            raise IndexFormatError("trailing bytes after id table")
    return PhraseIndex(matrix, ids, fingerprint)


def check_fingerprint(index: PhraseIndex, encoder: PhraseEncoder) -> None:
    fp = encoder_fingerprint(encoder)
    if fp != index.fingerprint:
        raise FingerprintMismatchError(index.fingerprint, fp)
