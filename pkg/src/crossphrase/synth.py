"""Synthetic multilingual worlds with known gold alignments.

A world has a set of abstract concepts.  Each language renders a
concept as its own surface token (a language prefix plus a ciphered
concept number), except for an optional shared fraction rendered
identically in every language (stand-ins for cognates and loanwords).
A phrase is a short concept tuple; its translation in another language
is the same tuple rendered there.  Example sentences surround a phrase
with context tokens drawn mostly from a per-record associate pool, so
the two sides of a record share topical context without being
translations of each other.

Ambiguous mode adds homograph pairs: two concepts that render as the
same token in the first language but stay distinct in the second.
Records built on homographs can only be told apart through their
context pools, which is what the example-sentence ablation probes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .corpus import (
    ExampleSentence,
    PhrasePairRecord,
    Vocabulary,
    build_record,
)

__all__ = [
    "SynthSpec",
    "CorpusSplit",
    "SyntheticWorld",
    "generate_world",
    "cipher_permutation",
    "apply_cipher",
]


@dataclass(frozen=True)
class SynthSpec:
    """Generation knobs; defaults give a two-language desk-scale world."""

    seed: int
    vocab_size: int = 400
    train_pairs: int = 500
    eval_pairs: int = 100
    sentences_per_phrase: int = 8
    languages: tuple[str, ...] = ("aa", "bb")
    shared_surface_fraction: float = 0.0
    ambiguous: bool = False
    min_phrase_len: int = 1
    max_phrase_len: int = 3
    pool_size: int = 6
    min_context: int = 4
    max_context: int = 7
    pool_prob: float = 0.75

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if len(self.languages) < 2:
            raise ValueError("at least two languages are required")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError(f"duplicate language codes: {self.languages}")
        if not 0.0 <= self.shared_surface_fraction < 1.0:
            raise ValueError(
                f"shared_surface_fraction out of [0, 1): {self.shared_surface_fraction}"
            )
        if self.ambiguous and len(self.languages) != 2:
            raise ValueError("ambiguous mode supports exactly two languages")
        if self.ambiguous and self.shared_surface_fraction > 0.0:
            raise ValueError("ambiguous mode does not combine with shared surfaces")
        if "sh" in self.languages:
            raise ValueError("language code 'sh' is reserved for shared surfaces")
        if not 1 <= self.min_phrase_len <= self.max_phrase_len:
            raise ValueError("bad phrase length bounds")
        if self.train_pairs < 1 or self.eval_pairs < 0:
            raise ValueError("bad split sizes")
        if self.vocab_size < 20:
            raise ValueError(f"vocab_size too small: {self.vocab_size}")
        if not 1 <= self.min_context <= self.max_context:
            raise ValueError("bad context length bounds")


@dataclass
class CorpusSplit:
    train: list[PhrasePairRecord]
    eval: list[PhrasePairRecord]


@dataclass
class SyntheticWorld:
    spec: SynthSpec
    vocab: Vocabulary
    corpora: dict[tuple[str, str], CorpusSplit]
    n_concepts: int
    shared_concepts: tuple[int, ...]
    homograph_pairs: tuple[tuple[int, int], ...] = ()


def cipher_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    """A random bijection over concept numbers for one language."""
    if n < 1:
        raise ValueError(f"cipher domain must be positive, got {n}")
    return rng.permutation(n)


def apply_cipher(perm: np.ndarray, concept_ids: Sequence[int]) -> list[int]:
    ids = list(concept_ids)
    n = len(perm)
    for c in ids:
        if not 0 <= c < n:
            raise ValueError(f"concept id {c} outside cipher domain of {n}")
    return [int(perm[c]) for c in ids]


class _World:
    """Internal rendering state shared by the generation passes."""

    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        n_langs = len(spec.languages)
        f = spec.shared_surface_fraction
        # Budget: vocab = 2 sentinels + n_langs*(C - S) + S with S = round(f*C).
        self.n_concepts = max(int((spec.vocab_size - 2) / (n_langs - (n_langs - 1) * f)), 10)
        n_shared = int(round(f * self.n_concepts))
        shared = rng.choice(self.n_concepts, size=n_shared, replace=False) if n_shared else []
        self.shared = frozenset(int(c) for c in shared)
        self.ciphers = {
            lang: cipher_permutation(rng, self.n_concepts) for lang in spec.languages
        }
        # Homograph alias: concept -> concept whose first-language surface it borrows.
        self.alias: dict[int, int] = {}
        self.homograph_pairs: list[tuple[int, int]] = []
        self.pools: dict[int, tuple[int, ...]] = {}

    def add_homographs(self, n_pairs: int, regular: list[int]) -> list[tuple[int, int]]:
        """Reserve 2*n_pairs concepts as homograph pairs with fixed disjoint pools."""
        chosen = self.rng.choice(len(regular), size=2 * n_pairs, replace=False)
        concepts = [regular[int(i)] for i in chosen]
        remaining = [c for c in regular if c not in set(concepts)]
        pairs = []
        for i in range(n_pairs):
            c_a, c_b = concepts[2 * i], concepts[2 * i + 1]
            self.alias[c_b] = c_a
            pool_draw = self.rng.choice(
                len(remaining), size=2 * self.spec.pool_size, replace=False
            )
            pool = [remaining[int(j)] for j in pool_draw]
            self.pools[c_a] = tuple(pool[: self.spec.pool_size])
            self.pools[c_b] = tuple(pool[self.spec.pool_size :])
            pairs.append((c_a, c_b))
        self.homograph_pairs = pairs
        return pairs

    def surface(self, concept: int, lang: str) -> str:
        if concept in self.shared:
            return f"sh{concept:03d}"
        if lang == self.spec.languages[0] and concept in self.alias:
            concept = self.alias[concept]
        return f"{lang}{int(self.ciphers[lang][concept]):03d}"

    def render(self, concepts: Sequence[int], lang: str) -> str:
        return " ".join(self.surface(c, lang) for c in concepts)

    def all_surfaces(self) -> list[str]:
        out = set()
        for c in range(self.n_concepts):
            for lang in self.spec.languages:
                out.add(self.surface(c, lang))
        return sorted(out)

    def example_for(
        self,
        concepts: Sequence[int],
        pool: Sequence[int],
        lang: str,
        vocab: Vocabulary,
    ) -> ExampleSentence:
        spec = self.spec
        n_ctx = int(self.rng.integers(spec.min_context, spec.max_context + 1))
        context = []
        for _ in range(n_ctx):
            if self.rng.random() < spec.pool_prob:
                context.append(int(pool[int(self.rng.integers(0, len(pool)))]))
            else:
                context.append(int(self.rng.integers(0, self.n_concepts)))
        pos = int(self.rng.integers(0, n_ctx + 1))
        tokens = context[:pos] + list(concepts) + context[pos:]
        text = self.render(tokens, lang)
        ids = tuple(vocab.encode(text.split()))
        return ExampleSentence(text, ids, pos + 1, pos + len(concepts))


def _draw_tuple(
    world: _World,
    candidates: Sequence[int],
    used: set,
    rng,
    counts: Optional[dict[int, int]] = None,
) -> tuple[int, ...]:
    """A fresh concept tuple; with ``counts``, drawing favors the least-used
    concepts so training coverage stays balanced instead of Poisson-tailed."""
    spec = world.spec
    for _ in range(10_000):
        k = int(rng.integers(spec.min_phrase_len, spec.max_phrase_len + 1))
        if counts is None:
            idx = rng.choice(len(candidates), size=k, replace=False)
            tup = tuple(int(candidates[int(i)]) for i in idx)
        else:
            keyed = sorted(candidates, key=lambda c: (counts[c], rng.random()))
            tup = tuple(int(c) for c in keyed[:k])
        if tup not in used:
            used.add(tup)
            if counts is not None:
                for c in tup:
                    counts[c] += 1
            return tup
    raise RuntimeError("could not draw a fresh phrase tuple; concept space too small")


def _record(
    world: _World,
    vocab: Vocabulary,
    rec_id: str,
    concepts_src: Sequence[int],
    concepts_tgt: Sequence[int],
    pool: Sequence[int],
    lang_a: str,
    lang_b: str,
) -> PhrasePairRecord:
    m = world.spec.sentences_per_phrase
    src_examples = [world.example_for(concepts_src, pool, lang_a, vocab) for _ in range(m)]
    tgt_examples = [world.example_for(concepts_tgt, pool, lang_b, vocab) for _ in range(m)]
    return build_record(
        rec_id,
        lang_a,
        world.render(concepts_src, lang_a),
        lang_b,
        world.render(concepts_tgt, lang_b),
        src_examples,
        tgt_examples,
        vocab,
    )


def _draw_pool(world: _World, exclude: Sequence[int], rng) -> tuple[int, ...]:
    pool: list[int] = []
    banned = set(exclude)
    while len(pool) < world.spec.pool_size:
        c = int(rng.integers(0, world.n_concepts))
        if c not in banned:
            banned.add(c)
            pool.append(c)
    return tuple(pool)


def generate_world(spec: SynthSpec) -> SyntheticWorld:
    """Build the vocabulary and all per-pair corpus splits for a spec."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 7)))
    world = _World(spec, rng)

    if spec.ambiguous:
        n_groups = spec.eval_pairs // 2
        if n_groups < 1:
            raise ValueError("ambiguous mode needs at least two eval pairs")
        regular = list(range(world.n_concepts))
        if world.n_concepts < 2 * n_groups + 2 * spec.pool_size:
            raise ValueError(
                f"{world.n_concepts} concepts cannot host {n_groups} homograph groups"
            )
        world.add_homographs(n_groups, regular)

    vocab = Vocabulary.from_tokens(world.all_surfaces())

    lang_a = spec.languages[0]
    corpora: dict[tuple[str, str], CorpusSplit] = {}
    used_tuples: set = set()

    homograph_concepts = {c for pair in world.homograph_pairs for c in pair}
    regular_concepts = [
        c for c in range(world.n_concepts) if c not in homograph_concepts
    ]

    for lang_b in spec.languages[1:]:
        pair = (lang_a, lang_b)
        primary = lang_b == spec.languages[1]
        train: list[PhrasePairRecord] = []
        eval_records: list[PhrasePairRecord] = []

        if primary:
            if spec.ambiguous:
                # One training record per homograph concept, pool fixed per concept.
                for c in sorted(homograph_concepts):
                    rec_id = f"{lang_a}-{lang_b}:train:h{c:03d}"
                    train.append(
                        _record(world, vocab, rec_id, (c,), (c,), world.pools[c], lang_a, lang_b)
                    )
                used_tuples.update((c,) for c in homograph_concepts)
            counts = {c: 0 for c in regular_concepts}
            while len(train) < spec.train_pairs:
                tup = _draw_tuple(world, regular_concepts, used_tuples, rng, counts)
                pool = _draw_pool(world, tup, rng)
                rec_id = f"{lang_a}-{lang_b}:train:{len(train):05d}"
                train.append(_record(world, vocab, rec_id, tup, tup, pool, lang_a, lang_b))

        if spec.ambiguous:
            # Fresh sentences around the trained homograph phrases: the
            # surface alone cannot name the concept, the context pool can.
            for g, (c_a, c_b) in enumerate(world.homograph_pairs):
                for member, c in ((0, c_a), (1, c_b)):
                    rec_id = f"{lang_a}-{lang_b}:eval:g{g:03d}m{member}"
                    eval_records.append(
                        _record(
                            world, vocab, rec_id, (c,), (c,),
                            world.pools[c], lang_a, lang_b,
                        )
                    )
        else:
            for j in range(spec.eval_pairs):
                tup = _draw_tuple(world, list(range(world.n_concepts)), used_tuples, rng)
                pool = _draw_pool(world, tup, rng)
                rec_id = f"{lang_a}-{lang_b}:eval:{j:05d}"
                eval_records.append(
                    _record(world, vocab, rec_id, tup, tup, pool, lang_a, lang_b)
                )

        corpora[pair] = CorpusSplit(train=train, eval=eval_records)

    return SyntheticWorld(
        spec=spec,
        vocab=vocab,
        corpora=corpora,
        n_concepts=world.n_concepts,
        shared_concepts=tuple(sorted(world.shared)),
        homograph_pairs=tuple(world.homograph_pairs),
    )
