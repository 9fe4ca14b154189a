"""Command-line entry point: corpus building, training, retrieval, eval.

Every subcommand is a pure function of its inputs, flags, and seed.
Config files are flat key=value text; command-line flags win over file
values.  Exit codes: 0 success, 1 runtime failure, 2 usage or missing
input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import fit_orthogonal_map, load_map, save_map
from .checkpoint import CHECKPOINT_VERSION
from .corpus import (
    Phrase,
    Vocabulary,
    build_record,
    filter_phrase_pairs,
    load_corpus,
    save_corpus,
    select_example_sentences,
)
from .encoder import infer_phrase_vectors, load_encoder
from .harness import run_setting, run_sweep, spec_from_kv
from .kvformat import parse_kv_file
from .retrieval import (
    INDEX_VERSION,
    PhraseIndex,
    build_index,
    check_fingerprint,
    load_index,
    query_index,
    save_index,
)
from .synth import CorpusSplit, SynthSpec, generate_world
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)


def _default_threads() -> int:
    return max(os.cpu_count() or 1, 1)


def _read_lines(path: Path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_corpus(args) -> int:
    pair_lines = _read_lines(args.pairs)
    raw_pairs = []
    for i, line in enumerate(pair_lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{args.pairs}:{i}: expected 'source<TAB>target'")
        raw_pairs.append((parts[0], parts[1]))
    kept = filter_phrase_pairs(raw_pairs)
    logger.info("kept %d of %d phrase pairs after filtering", len(kept), len(raw_pairs))

    src_sentences = _read_lines(args.source_sentences)
    tgt_sentences = _read_lines(args.target_sentences)
    vocab = Vocabulary.from_texts(
        [s for s, _ in kept] + [t for _, t in kept] + src_sentences + tgt_sentences
    )

    records = []
    dropped = 0
    for j, (src_surface, tgt_surface) in enumerate(kept):
        rec_id = f"{args.source_lang}-{args.target_lang}:{j:06d}"
        src_phrase = Phrase.from_surface("tmp#src", args.source_lang, src_surface, vocab)
        tgt_phrase = Phrase.from_surface("tmp#tgt", args.target_lang, tgt_surface, vocab)
        src_examples = select_example_sentences(src_phrase, src_sentences, vocab, cap=args.cap)
        tgt_examples = select_example_sentences(tgt_phrase, tgt_sentences, vocab, cap=args.cap)
        if not src_examples or not tgt_examples:
            dropped += 1
            continue
        records.append(
            build_record(
                rec_id,
                args.source_lang,
                src_surface,
                args.target_lang,
                tgt_surface,
                src_examples,
                tgt_examples,
                vocab,
            )
        )
    if dropped:
        logger.warning("dropped %d pairs with no usable example sentences", dropped)
    if not records:
        raise ValueError("no records survived example-sentence selection")
    save_corpus(records, args.out, vocab)
    print(f"wrote {len(records)} records to {args.out} (vocab {len(vocab)})")
    return 0


def _cmd_synth(args) -> int:
    languages = tuple(x.strip() for x in args.languages.split(",") if x.strip())
    spec = SynthSpec(
        seed=args.seed,
        vocab_size=args.vocab_size,
        train_pairs=args.pairs,
        eval_pairs=args.eval_pairs,
        sentences_per_phrase=args.sentences,
        languages=languages,
        shared_surface_fraction=args.shared_fraction,
        ambiguous=args.ambiguous,
    )
    world = generate_world(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (la, lb), split in world.corpora.items():
        if split.train:
            save_corpus(split.train, out_dir / f"corpus-{la}-{lb}-train.txt", world.vocab)
        save_corpus(split.eval, out_dir / f"corpus-{la}-{lb}-eval.txt", world.vocab)
        print(
            f"pair {la}-{lb}: {len(split.train)} train, {len(split.eval)} eval records"
        )
    print(f"vocabulary size {len(world.vocab)}, concepts {world.n_concepts}")
    return 0


def _cmd_train(args) -> int:
    records, vocab = load_corpus(args.corpus)
    kv = parse_kv_file(args.config) if args.config else {}
    config = TrainConfig.from_kv(kv, vocab_size=len(vocab))
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    logger.info("resolved train config:\n%s", config.text())
    state = train(
        records,
        config,
        out_dir=Path(args.out_dir),
        resume_path=Path(args.resume) if args.resume else None,
        log_every=args.log_every,
    )
    final_loss = state.trace[-1].loss if state.trace else float("nan")
    print(
        f"trained to step {state.step} (final loss {final_loss:.4f}); "
        f"encoder at {Path(args.out_dir) / 'encoder.ckpt'}"
    )
    return 0


def _entries_for_side(records, side: str, cap):
    out = []
    for rec in records:
        phrase = rec.source if side == "source" else rec.target
        examples = rec.source_examples if side == "source" else rec.target_examples
        if cap is not None:
            examples = examples[:cap]
        out.append((phrase, examples))
    return out


def _build_side_index(args, use_projection_default: bool) -> PhraseIndex:
    records, _ = load_corpus(args.corpus)
    encoder = load_encoder(args.checkpoint)
    use_projection = not args.no_projection if args.no_projection is not None else use_projection_default
    entries = _entries_for_side(records, args.side, args.sentences)
    return build_index(
        encoder,
        entries,
        use_projection=use_projection,
        layer=args.layer,
    )


def _cmd_index(args) -> int:
    index = _build_side_index(args, use_projection_default=True)
    save_index(index, args.out)
    print(f"indexed {len(index)} phrases to {args.out}")
    return 0


def _cmd_encode(args) -> int:
    index = _build_side_index(args, use_projection_default=False)
    save_index(index, args.out)
    print(f"encoded {len(index)} phrases to {args.out}")
    return 0


def _cmd_query(args) -> int:
    index = load_index(args.index)
    encoder = load_encoder(args.checkpoint)
    check_fingerprint(index, encoder)
    vocab = Vocabulary.load(args.vocab)
    phrase = Phrase.from_surface("query", "query", args.phrase, vocab)
    sentences = _read_lines(args.examples)
    examples = select_example_sentences(phrase, sentences, vocab, cap=args.cap)
    if not examples:
        raise ValueError(
            "none of the provided sentences contains the phrase with enough context"
        )
    _, projected = infer_phrase_vectors(
        encoder,
        examples,
        use_projection=not args.no_projection,
        layer=args.layer,
    )
    vector = projected[0]
    if args.map:
        omap = load_map(args.map)
        vector = omap.apply(vector)
    result = query_index(index, vector, k=args.k, threads=args.threads)
    for rank, (pid, score) in enumerate(result.ranked, start=1):
        print(f"{rank}\t{pid}\t{score:.6f}")
    return 0


def _cmd_fit_map(args) -> int:
    source = load_index(args.source)
    target = load_index(args.target)
    if len(source) != len(target):
        raise ValueError(
            f"row counts differ: {len(source)} source vs {len(target)} target"
        )
    for sid, tid in zip(source.phrase_ids, target.phrase_ids):
        if sid.rsplit("#", 1)[0] != tid.rsplit("#", 1)[0]:
            raise ValueError(f"misaligned rows: {sid!r} vs {tid!r}")
    omap = fit_orthogonal_map(source.matrix, target.matrix)
    save_map(omap, args.out)
    residual = float(np.sqrt(((source.matrix @ omap.matrix - target.matrix) ** 2).sum()))
    print(f"fit {omap.dim}x{omap.dim} orthogonal map, residual {residual:.6f}")
    return 0


def _load_split(kv: dict[str, str], pair: tuple[str, str]) -> tuple[CorpusSplit, Vocabulary]:
    name = f"{pair[0]}-{pair[1]}"
    train_key = f"corpus.{name}.train"
    eval_key = f"corpus.{name}.eval"
    if eval_key not in kv and train_key not in kv:
        raise ValueError(f"spec has no corpus paths for pair {name}")
    vocab = None
    train_records: list = []
    eval_records: list = []
    if train_key in kv:
        train_records, vocab = load_corpus(kv[train_key])
    if eval_key in kv:
        eval_records, vocab2 = load_corpus(kv[eval_key])
        if vocab is not None and vocab2 != vocab:
            raise ValueError(f"train and eval vocabularies differ for pair {name}")
        vocab = vocab2 if vocab is None else vocab
    return CorpusSplit(train=train_records, eval=eval_records), vocab


def _cmd_eval(args) -> int:
    kv = parse_kv_file(args.spec)
    spec = spec_from_kv(kv)
    corpora = {}
    vocab = None
    for pair in {*spec.train_pairs, *spec.eval_pairs}:
        split, pair_vocab = _load_split(kv, pair)
        corpora[pair] = split
        if vocab is None:
            vocab = pair_vocab
        elif pair_vocab != vocab:
            raise ValueError("all pairs must share one vocabulary")
    if vocab is None:
        raise ValueError("no corpora named in the spec")
    if spec.sweep is not None:
        report = run_sweep(spec, corpora, vocab, threads=args.threads)
    else:
        report = run_setting(spec, corpora, vocab, threads=args.threads)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_jsonl())
    print(report.table())
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossphrase",
        description="Cross-lingual phrase retrieval pipeline",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"crossphrase {__version__} "
            f"(checkpoint format v{CHECKPOINT_VERSION}, index format v{INDEX_VERSION})"
        ),
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("corpus", help="build a corpus from phrase pairs and sentences")
    p.add_argument("--pairs", required=True, type=Path, help="TSV: source<TAB>target per line")
    p.add_argument("--source-lang", required=True)
    p.add_argument("--target-lang", required=True)
    p.add_argument("--source-sentences", required=True, type=Path)
    p.add_argument("--target-sentences", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--cap", type=int, default=32, help="max example sentences per phrase")
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("synth", help="generate synthetic cipher-language corpora")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--pairs", type=int, default=500, help="training records")
    p.add_argument("--eval-pairs", type=int, default=100)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--sentences", type=int, default=8)
    p.add_argument("--languages", default="aa,bb")
    p.add_argument("--shared-fraction", type=float, default=0.0)
    p.add_argument("--ambiguous", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the phrase encoder")
    p.add_argument("--corpus", required=True, type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--config", type=Path, help="key=value training config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--resume", type=Path, help="train-state checkpoint to continue")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    def add_encode_flags(p):
        p.add_argument("--checkpoint", required=True, type=Path)
        p.add_argument("--corpus", required=True, type=Path)
        p.add_argument("--side", required=True, choices=("source", "target"))
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--sentences", type=int, help="cap on sentences per phrase")
        p.add_argument("--layer", type=int, help="representation layer override")

    p = sub.add_parser("index", help="build a retrieval index (projected rows)")
    add_encode_flags(p)
    p.add_argument(
        "--no-projection", action="store_const", const=True, default=None,
        help="index pre-projection vectors instead",
    )
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("encode", help="dump phrase representations (pre-projection rows)")
    add_encode_flags(p)
    p.add_argument(
        "--no-projection", action="store_const", const=True, default=True,
        help="(default) dump pre-projection vectors",
    )
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("query", help="query an index with a phrase")
    p.add_argument("--index", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--phrase", required=True)
    p.add_argument("--examples", required=True, type=Path, help="candidate sentences, one per line")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--cap", type=int, default=32)
    p.add_argument("--map", type=Path, help="orthogonal map applied to the query vector")
    p.add_argument("--no-projection", action="store_true")
    p.add_argument("--layer", type=int)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("fit-map", help="fit an orthogonal map between representation dumps")
    p.add_argument("--source", required=True, type=Path)
    p.add_argument("--target", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_fit_map)

    p = sub.add_parser("eval", help="run an experiment spec")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", type=Path, help="report file (JSON lines)")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logger.info("resolved flags: %s", {k: str(v) for k, v in vars(args).items() if k != "func"})
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: missing input file: {err.filename or err}", file=sys.stderr)
        return 2
    except Exception as err:  # structured failure, not a crash
        logger.debug("failure detail", exc_info=True)
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
