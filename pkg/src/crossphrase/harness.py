"""Experiment harness: evaluation settings, ablations, sweeps, reports.

Four settings are supported.  ``unsupervised`` retrieves with a frozen
randomly initialized encoder (no training).  ``supervised`` trains and
evaluates on the same language pair.  ``zero_shot`` trains on one pair
and evaluates on every listed pair.  ``multilingual`` trains on the
concatenation of several pairs' training splits.  Each cell runs per
seed, both retrieval directions are reported, and every aggregate row
is the plain arithmetic mean of its per-seed rows.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .corpus import PhrasePairRecord, Vocabulary
from .encoder import EncoderConfig, PhraseEncoder, infer_phrase_vectors, init_encoder
from .contrast import ContrastConfig
from .retrieval import accuracy_at_1, build_index
from .synth import CorpusSplit
from .trainer import TrainConfig, bare_example, train

logger = logging.getLogger(__name__)

__all__ = [
    "AblationFlags",
    "SweepSpec",
    "ExperimentSpec",
    "ReportRow",
    "Report",
    "spec_from_kv",
    "build_train_config",
    "evaluate_pair",
    "run_setting",
    "run_sweep",
    "spearman_rho",
]

SETTINGS = ("unsupervised", "supervised", "zero_shot", "multilingual")

DEFAULT_QUEUE_LENGTH = 1024


@dataclass(frozen=True)
class AblationFlags:
    no_example_sentence: bool = False
    no_momentum: bool = False
    no_projection: bool = False
    use_negative_queue: bool = False


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[int, ...]

    def __post_init__(self):
        if self.axis not in ("sentences", "layer"):
            raise ValueError(f"sweep axis must be 'sentences' or 'layer', got {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if any(v < 0 for v in self.values):
            raise ValueError(f"negative sweep value in {self.values}")


@dataclass(frozen=True)
class ExperimentSpec:
    setting: str
    train_pairs: tuple[tuple[str, str], ...]
    eval_pairs: tuple[tuple[str, str], ...]
    seeds: tuple[int, ...] = (0, 1, 2)
    ablations: AblationFlags = AblationFlags()
    sweep: Optional[SweepSpec] = None
    overrides: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}, expected one of {SETTINGS}")
        if self.setting == "unsupervised" and self.train_pairs:
            raise ValueError("unsupervised setting forbids training pairs")
        if self.setting != "unsupervised" and not self.train_pairs:
            raise ValueError(f"{self.setting} setting requires training pairs")
        if not self.eval_pairs:
            raise ValueError("at least one evaluation pair is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")


@dataclass
class ReportRow:
    setting: str
    pair: str
    seed: str
    source_to_target: float
    target_to_source: float
    mean_accuracy: float
    variant: str = "base"
    note: str = ""


@dataclass
class Report:
    config_echo: dict[str, str]
    rows: list[ReportRow] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"config": self.config_echo}, sort_keys=True)]
        for row in self.rows:
            lines.append(json.dumps(asdict(row), sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Report":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty report")
        head = json.loads(lines[0])
        report = cls(config_echo=head.get("config", {}))
        for ln in lines[1:]:
            report.rows.append(ReportRow(**json.loads(ln)))
        return report

    def table(self) -> str:
        header = f"{'setting':<13} {'pair':<8} {'variant':<28} {'seed':<5} {'s->t':>7} {'t->s':>7} {'mean':>7}"
        out = [header, "-" * len(header)]
        for r in self.rows:
            out.append(
                f"{r.setting:<13} {r.pair:<8} {r.variant:<28} {r.seed:<5} "
                f"{r.source_to_target:7.4f} {r.target_to_source:7.4f} {r.mean_accuracy:7.4f}"
                + (f"  {r.note}" if r.note else "")
            )
        return "\n".join(out)


def _pair_name(pair: tuple[str, str]) -> str:
    return f"{pair[0]}-{pair[1]}"


def _parse_pairs(raw: str) -> tuple[tuple[str, str], ...]:
    pairs = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split("-")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ValueError(f"bad language pair {chunk!r}, expected like 'aa-bb'")
        pairs.append((parts[0], parts[1]))
    return tuple(pairs)


def spec_from_kv(kv: dict[str, str]) -> ExperimentSpec:
    """Build an ExperimentSpec from flat key=value text.

    Recognized keys: setting, train_pairs, eval_pairs, seeds,
    ablation.<flag>, sweep.axis, sweep.values, override.<train-key>.
    """
    kv = dict(kv)
    setting = kv.pop("setting", None)
    if setting is None:
        raise ValueError("spec is missing the 'setting' key")
    train_pairs = _parse_pairs(kv.pop("train_pairs", ""))
    eval_pairs = _parse_pairs(kv.pop("eval_pairs", ""))
    seeds_raw = kv.pop("seeds", "0,1,2")
    seeds = tuple(int(s) for s in seeds_raw.split(",") if s.strip())

    flags = {}
    for name in ("no_example_sentence", "no_momentum", "no_projection", "use_negative_queue"):
        raw = kv.pop(f"ablation.{name}", None)
        if raw is not None:
            flags[name] = raw.strip().lower() in ("true", "1", "yes")
    ablations = AblationFlags(**flags)

    sweep = None
    axis = kv.pop("sweep.axis", None)
    values_raw = kv.pop("sweep.values", None)
    if axis is not None or values_raw is not None:
        if axis is None or values_raw is None:
            raise ValueError("sweep requires both sweep.axis and sweep.values")
        values = tuple(int(v) for v in values_raw.split(",") if v.strip())
        sweep = SweepSpec(axis, values)

    overrides = tuple(
        (key.removeprefix("override."), value)
        for key, value in kv.items()
        if key.startswith("override.")
    )
    for key, _ in overrides:
        kv.pop(f"override.{key}")
    unknown = {k for k in kv if not k.startswith("corpus.")}
    if unknown:
        raise ValueError(f"unknown spec keys: {sorted(unknown)}")

    return ExperimentSpec(
        setting=setting,
        train_pairs=train_pairs,
        eval_pairs=eval_pairs,
        seeds=seeds,
        ablations=ablations,
        sweep=sweep,
        overrides=overrides,
    )


def build_train_config(
    spec: ExperimentSpec, vocab_size: int, seed: int
) -> TrainConfig:
    """Desk-default config with spec overrides and ablations applied."""
    kv = dict(spec.overrides)
    config = TrainConfig.from_kv(kv, vocab_size=vocab_size)
    contrast = config.contrast
    if spec.ablations.no_momentum:
        contrast = replace(contrast, use_momentum_encoder=False)
    if spec.ablations.no_projection:
        contrast = replace(contrast, use_projection_head=False)
    if spec.ablations.use_negative_queue and contrast.negative_queue_length == 0:
        contrast = replace(contrast, negative_queue_length=DEFAULT_QUEUE_LENGTH)
    config = replace(config, contrast=contrast, seed=seed)
    if spec.ablations.no_example_sentence:
        config = replace(config, use_example_sentences=False)
    return config


def _query_entries(records: Sequence[PhrasePairRecord], side: str, bare: bool, cap: Optional[int]):
    for rec in records:
        phrase = rec.source if side == "source" else rec.target
        examples = rec.source_examples if side == "source" else rec.target_examples
        if bare:
            examples = [bare_example(phrase)]
        elif cap is not None:
            examples = examples[:cap]
        yield phrase, examples


def evaluate_pair(
    encoder: PhraseEncoder,
    records: Sequence[PhrasePairRecord],
    use_projection: bool = True,
    layer: Optional[int] = None,
    bare_phrases: bool = False,
    sentence_cap: Optional[int] = None,
    threads: int = 1,
) -> tuple[float, float]:
    """Accuracy@1 in both directions over one eval split."""
    if not records:
        raise ValueError("evaluate_pair: empty eval split")

    accs = []
    for query_side, index_side in (("source", "target"), ("target", "source")):
        entries = list(_query_entries(records, index_side, bare_phrases, sentence_cap))
        index = build_index(encoder, entries, use_projection=use_projection, layer=layer)
        queries = []
        for rec, (phrase, examples) in zip(
            records, _query_entries(records, query_side, bare_phrases, sentence_cap)
        ):
            _, projected = infer_phrase_vectors(
                encoder, examples, use_projection=use_projection, layer=layer
            )
            gold = rec.target.id if index_side == "target" else rec.source.id
            queries.append((phrase.id, projected[0], gold))
        accs.append(accuracy_at_1(index, queries, threads=threads))
    return accs[0], accs[1]


def _mean_rows(rows: list[ReportRow]) -> list[ReportRow]:
    """One aggregate row per (setting, pair, variant) over its seed rows."""
    groups: dict[tuple[str, str, str], list[ReportRow]] = {}
    for row in rows:
        groups.setdefault((row.setting, row.pair, row.variant), []).append(row)
    out = []
    for (setting, pair, variant), members in groups.items():
        out.append(
            ReportRow(
                setting=setting,
                pair=pair,
                seed="mean",
                source_to_target=float(np.mean([r.source_to_target for r in members])),
                target_to_source=float(np.mean([r.target_to_source for r in members])),
                mean_accuracy=float(np.mean([r.mean_accuracy for r in members])),
                variant=variant,
                note=members[0].note,
            )
        )
    return out


def _pair_overlap(a: Sequence[PhrasePairRecord], b: Sequence[PhrasePairRecord]) -> int:
    seen = {(r.source.surface, r.target.surface) for r in a}
    return sum((r.source.surface, r.target.surface) in seen for r in b)


def _check_corpora(
    spec: ExperimentSpec, corpora: dict[tuple[str, str], CorpusSplit]
) -> None:
    for pair in (*spec.train_pairs, *spec.eval_pairs):
        if pair not in corpora:
            raise ValueError(f"no corpus provided for pair {_pair_name(pair)}")
        if pair in spec.train_pairs and not corpora[pair].train:
            raise ValueError(f"empty training split for pair {_pair_name(pair)}")
        if pair in spec.eval_pairs and not corpora[pair].eval:
            raise ValueError(f"empty eval split for pair {_pair_name(pair)}")


def _eval_row(
    spec: ExperimentSpec,
    encoder: PhraseEncoder,
    pair: tuple[str, str],
    split: CorpusSplit,
    seed: int,
    use_projection: bool,
    layer: Optional[int],
    variant: str = "base",
    note: str = "",
    threads: int = 1,
) -> ReportRow:
    s2t, t2s = evaluate_pair(
        encoder,
        split.eval,
        use_projection=use_projection,
        layer=layer,
        bare_phrases=spec.ablations.no_example_sentence,
        threads=threads,
    )
    return ReportRow(
        setting=spec.setting,
        pair=_pair_name(pair),
        seed=str(seed),
        source_to_target=s2t,
        target_to_source=t2s,
        mean_accuracy=(s2t + t2s) / 2.0,
        variant=variant,
        note=note,
    )


def _rows_for_seed(
    spec: ExperimentSpec,
    corpora: dict[tuple[str, str], CorpusSplit],
    vocab: Vocabulary,
    seed: int,
    threads: int = 1,
) -> list[ReportRow]:
    """All report rows one seed contributes; hermetic, so seeds can run anywhere."""
    config = build_train_config(spec, len(vocab), seed)
    rows: list[ReportRow] = []

    if spec.setting == "unsupervised":
        encoder = init_encoder(config.encoder, seed, requires_grad=False)
        layer = max(config.encoder.num_layers - 1, 0)
        for pair in spec.eval_pairs:
            rows.append(
                _eval_row(
                    spec, encoder, pair, corpora[pair], seed,
                    use_projection=False, layer=layer, threads=threads,
                )
            )
    elif spec.setting == "supervised":
        for pair in spec.train_pairs:
            state = train(corpora[pair].train, config)
            rows.append(
                _eval_row(
                    spec, state.encoder, pair, corpora[pair], seed,
                    use_projection=config.contrast.use_projection_head,
                    layer=None, threads=threads,
                )
            )
    elif spec.setting == "zero_shot":
        train_pair = spec.train_pairs[0]
        state = train(corpora[train_pair].train, config)
        for pair in spec.eval_pairs:
            overlap = _pair_overlap(corpora[train_pair].train, corpora[pair].eval)
            rows.append(
                _eval_row(
                    spec, state.encoder, pair, corpora[pair], seed,
                    use_projection=config.contrast.use_projection_head,
                    layer=None, note=f"train_overlap={overlap}", threads=threads,
                )
            )
    else:  # multilingual: one model per seed over the concatenated splits
        combined: list[PhrasePairRecord] = []
        for pair in spec.train_pairs:
            combined.extend(corpora[pair].train)
        state = train(combined, config)
        for pair in spec.eval_pairs:
            rows.append(
                _eval_row(
                    spec, state.encoder, pair, corpora[pair], seed,
                    use_projection=config.contrast.use_projection_head,
                    layer=None, threads=threads,
                )
            )
    return rows


def _seed_worker(args) -> list[ReportRow]:
    spec, corpora, vocab, seed = args
    return _rows_for_seed(spec, corpora, vocab, seed, threads=1)


def run_setting(
    spec: ExperimentSpec,
    corpora: dict[tuple[str, str], CorpusSplit],
    vocab: Vocabulary,
    threads: int = 1,
) -> Report:
    """Execute the spec's setting over all pairs and seeds.

    ``threads`` > 1 runs seeds in parallel worker processes (each seed is
    hermetic and single-threaded, so results never depend on the count).
    """
    _check_corpora(spec, corpora)
    if spec.setting == "supervised":
        for pair in spec.train_pairs:
            if pair not in spec.eval_pairs:
                raise ValueError(
                    f"supervised setting evaluates its training pair, but "
                    f"{_pair_name(pair)} is not in eval_pairs"
                )
    if spec.setting == "zero_shot" and len(spec.train_pairs) != 1:
        raise ValueError("zero_shot trains on exactly one pair")

    sample_config = build_train_config(spec, len(vocab), spec.seeds[0])
    report = Report(config_echo=sample_config.to_kv())
    report.config_echo["setting"] = spec.setting

    workers = min(threads, len(spec.seeds))
    context = None
    if workers > 1:
        try:
            context = multiprocessing.get_context("fork")
        except ValueError:
            logger.warning("fork start method unavailable, running seeds sequentially")
    if context is not None:
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            per_seed = list(
                pool.map(_seed_worker, [(spec, corpora, vocab, s) for s in spec.seeds])
            )
    else:
        per_seed = [
            _rows_for_seed(spec, corpora, vocab, s, threads=threads) for s in spec.seeds
        ]

    for rows in per_seed:
        report.rows.extend(rows)
    report.rows.extend(_mean_rows(report.rows))
    return report


def _available_sentences(split: CorpusSplit) -> int:
    counts = []
    for rec in (*split.train, *split.eval):
        counts.append(len(rec.source_examples))
        counts.append(len(rec.target_examples))
    return min(counts)


def run_sweep(
    spec: ExperimentSpec,
    corpora: dict[tuple[str, str], CorpusSplit],
    vocab: Vocabulary,
    threads: int = 1,
) -> Report:
    """Sentence-count or layer sweep, reported as variant-tagged rows."""
    if spec.sweep is None:
        raise ValueError("run_sweep requires spec.sweep")
    _check_corpora(spec, corpora)
    if spec.setting != "supervised":
        raise ValueError("sweeps run in the supervised setting")
    pair = spec.train_pairs[0]
    split = corpora[pair]
    sample_config = build_train_config(spec, len(vocab), spec.seeds[0])
    report = Report(config_echo=sample_config.to_kv())
    report.config_echo["setting"] = spec.setting
    report.config_echo["sweep.axis"] = spec.sweep.axis
    report.config_echo["sweep.values"] = ",".join(str(v) for v in spec.sweep.values)

    if spec.sweep.axis == "sentences":
        cap = _available_sentences(split)
        for v in spec.sweep.values:
            if not 1 <= v <= cap:
                raise ValueError(
                    f"sweep value {v} outside the available sentence range [1, {cap}]"
                )
        for seed in spec.seeds:
            base = build_train_config(spec, len(vocab), seed)
            max_config = replace(base, sentences_per_phrase=cap)
            max_state = train(split.train, max_config)
            for v in spec.sweep.values:
                v_state = train(split.train, replace(base, sentences_per_phrase=v))
                for state, curve in ((v_state, "train_v"), (max_state, "train_max")):
                    s2t, t2s = evaluate_pair(
                        state.encoder,
                        split.eval,
                        use_projection=base.contrast.use_projection_head,
                        sentence_cap=v,
                        threads=threads,
                    )
                    report.rows.append(
                        ReportRow(
                            setting=spec.setting,
                            pair=_pair_name(pair),
                            seed=str(seed),
                            source_to_target=s2t,
                            target_to_source=t2s,
                            mean_accuracy=(s2t + t2s) / 2.0,
                            variant=f"sentences={v};curve={curve}",
                        )
                    )
        report.rows.extend(_mean_rows(report.rows))
        return report

    # layer axis
    num_layers = sample_config.encoder.num_layers
    for v in spec.sweep.values:
        if not 0 <= v <= num_layers:
            raise ValueError(f"layer {v} outside the valid range [0, {num_layers}]")
    for seed in spec.seeds:
        config = build_train_config(spec, len(vocab), seed)
        trained = train(split.train, config).encoder
        untrained = init_encoder(config.encoder, seed, requires_grad=False)
        for v in spec.sweep.values:
            for encoder, tag in ((trained, "trained"), (untrained, "untrained")):
                s2t, t2s = evaluate_pair(
                    encoder,
                    split.eval,
                    use_projection=False,
                    layer=v,
                    threads=threads,
                )
                report.rows.append(
                    ReportRow(
                        setting=spec.setting,
                        pair=_pair_name(pair),
                        seed=str(seed),
                        source_to_target=s2t,
                        target_to_source=t2s,
                        mean_accuracy=(s2t + t2s) / 2.0,
                        variant=f"layer={v};encoder={tag}",
                    )
                )
    report.rows.extend(_mean_rows(report.rows))
    return report


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("spearman_rho needs two equal-length sequences of 2+ points")

    def ranks(values: Sequence[float]) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        order = np.argsort(arr, kind="stable")
        out = np.empty(len(arr))
        i = 0
        while i < len(arr):
            j = i
            while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
                j += 1
            avg = (i + j) / 2.0 + 1.0
            for k in range(i, j + 1):
                out[order[k]] = avg
            i = j + 1
        return out

    rx = ranks(xs)
    ry = ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)
