"""Training loop for the bidirectional contrastive phrase objective.

One step: draw a batch of aligned phrase pairs, sample example
sentences for both sides, encode both sides with the online encoder
(train mode) and with the frozen momentum encoder (eval mode, no tape),
sum both directional losses, backpropagate, apply Adam, then blend the
momentum encoder toward the online weights.

The loop is deterministic given the seed and exactly resumable: batch
order comes from per-epoch permutations derived from (seed, epoch), and
the sampling rng state is serialized bit-exactly in the train-state
checkpoint.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import config_hash, load_arrays, save_arrays
from .contrast import (
    ContrastConfig,
    NegativeQueue,
    bidirectional_contrast_loss,
    candidates_with_queue,
    make_momentum_encoder,
    update_momentum_encoder,
)
from .corpus import ExampleSentence, Phrase, PhrasePairRecord
from .encoder import (
    EncoderConfig,
    PhraseEncoder,
    infer_phrase_vectors,
    init_encoder,
    represent_phrase,
    save_encoder,
)
from .kvformat import render_kv
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "TraceEntry",
    "CorpusTooSmallError",
    "TrainingDivergedError",
    "epoch_permutation",
    "epoch_batches",
    "sample_examples",
    "bare_example",
    "train",
    "save_train_state",
    "load_train_state",
]


class CorpusTooSmallError(ValueError):
    def __init__(self, n_records: int, batch_size: int):
        super().__init__(
            f"corpus has {n_records} records, fewer than one batch of {batch_size}"
        )


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, record_ids: list[str], value: float):
        self.step = step
        self.record_ids = record_ids
        super().__init__(
            f"non-finite loss {value!r} at step {step}, batch records "
            + ", ".join(record_ids)
        )


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"bad boolean for {key!r}: {raw!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe: encoder shape, objective knobs, loop knobs."""

    encoder: EncoderConfig
    # The class default of 0.999 averages over ~1000 steps, longer than a
    # whole desk-scale run; 0.99 lets the frozen side catch up in time.
    contrast: ContrastConfig = ContrastConfig(momentum_coefficient=0.99)
    batch_size: int = 32
    sentences_per_phrase: int = 4
    epochs: int = 40
    learning_rate: float = 3e-4
    warmup_fraction: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    use_example_sentences: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.sentences_per_phrase < 1:
            raise ValueError(
                f"sentences_per_phrase must be positive, got {self.sentences_per_phrase}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction out of [0, 1]: {self.warmup_fraction}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be non-negative: {self.checkpoint_every}")

    def to_kv(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for key, value in self.encoder.to_kv().items():
            out[f"encoder.{key}"] = value
        for f in fields(ContrastConfig):
            value = getattr(self.contrast, f.name)
            if isinstance(value, bool):
                out[f"contrast.{f.name}"] = "true" if value else "false"
            elif isinstance(value, float):
                out[f"contrast.{f.name}"] = repr(value)
            else:
                out[f"contrast.{f.name}"] = str(value)
        for name in (
            "batch_size",
            "sentences_per_phrase",
            "epochs",
            "learning_rate",
            "warmup_fraction",
            "seed",
            "checkpoint_every",
            "use_example_sentences",
        ):
            value = getattr(self, name)
            if isinstance(value, bool):
                out[name] = "true" if value else "false"
            elif isinstance(value, float):
                out[name] = repr(value)
            else:
                out[name] = str(value)
        return out

    def text(self) -> str:
        return render_kv(self.to_kv())

    @classmethod
    def from_kv(cls, kv: dict[str, str], vocab_size: Optional[int] = None) -> "TrainConfig":
        """Build from flat keys; missing keys fall back to field defaults.

        ``vocab_size`` supplies encoder.vocab_size when the text omits
        it; a conflicting explicit value is an error.
        """
        kv = dict(kv)
        enc_kwargs: dict = {}
        for f in fields(EncoderConfig):
            raw = kv.pop(f"encoder.{f.name}", None)
            if raw is None:
                continue
            enc_kwargs[f.name] = float(raw) if f.type == "float" else int(raw)
        if vocab_size is not None:
            stated = enc_kwargs.get("vocab_size")
            if stated is not None and stated != vocab_size:
                raise ValueError(
                    f"config says vocab_size={stated} but the vocabulary has {vocab_size}"
                )
            enc_kwargs["vocab_size"] = vocab_size
        if "vocab_size" not in enc_kwargs:
            raise ValueError("encoder.vocab_size is required")
        encoder = EncoderConfig(**enc_kwargs)

        con_kwargs: dict = {}
        for f in fields(ContrastConfig):
            raw = kv.pop(f"contrast.{f.name}", None)
            if raw is None:
                continue
            if f.type == "bool":
                con_kwargs[f.name] = _parse_bool(raw, f.name)
            elif f.type == "float":
                con_kwargs[f.name] = float(raw)
            else:
                con_kwargs[f.name] = int(raw)
        # Missing keys fall back to THIS config's default contrast field,
        # not to ContrastConfig's own defaults, so text and constructor agree.
        default_contrast = cls.__dataclass_fields__["contrast"].default
        contrast = replace(default_contrast, **con_kwargs)

        top_kwargs: dict = {}
        for f in fields(cls):
            if f.name in ("encoder", "contrast"):
                continue
            raw = kv.pop(f.name, None)
            if raw is None:
                continue
            if f.type == "bool":
                top_kwargs[f.name] = _parse_bool(raw, f.name)
            elif f.type == "float":
                top_kwargs[f.name] = float(raw)
            else:
                top_kwargs[f.name] = int(raw)
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        return cls(encoder=encoder, contrast=contrast, **top_kwargs)


@dataclass
class TraceEntry:
    step: int
    loss: float
    learning_rate: float
    seconds: float


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""

    config: TrainConfig
    encoder: PhraseEncoder
    momentum_encoder: Optional[PhraseEncoder]
    adam: AdamState
    rng: np.random.Generator
    step: int
    queue_source: Optional[NegativeQueue] = None
    queue_target: Optional[NegativeQueue] = None
    trace: list[TraceEntry] = field(default_factory=list)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Record order for one epoch, a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1, epoch)))
    return rng.permutation(n)


def epoch_batches(
    records: Sequence[PhrasePairRecord], seed: int, epoch: int, batch_size: int
) -> list[list[PhrasePairRecord]]:
    """Shuffled full batches for one epoch; a trailing partial batch is dropped."""
    if len(records) < batch_size:
        raise CorpusTooSmallError(len(records), batch_size)
    perm = epoch_permutation(seed, epoch, len(records))
    n_batches = len(records) // batch_size
    return [
        [records[j] for j in perm[b * batch_size : (b + 1) * batch_size]]
        for b in range(n_batches)
    ]


def sample_examples(
    examples: Sequence[ExampleSentence], m: int, rng: np.random.Generator
) -> list[ExampleSentence]:
    """m examples: without replacement when possible, else with replacement."""
    if not examples:
        raise ValueError("no example sentences to sample from")
    if len(examples) >= m:
        idx = rng.choice(len(examples), size=m, replace=False)
    else:
        idx = rng.integers(0, len(examples), size=m)
    return [examples[int(i)] for i in idx]


def bare_example(phrase: Phrase) -> ExampleSentence:
    """The phrase standing alone as its own example sentence."""
    return ExampleSentence(phrase.surface, phrase.tokens, 1, len(phrase.tokens))


def _step_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))


def _stack_reps(reps: list[T.Tensor]) -> T.Tensor:
    return T.concat_rows(reps) if len(reps) > 1 else reps[0]


def train(
    records: Sequence[PhrasePairRecord],
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    resume_path: Optional[Path] = None,
    log_every: int = 0,
    stop_after_steps: Optional[int] = None,
) -> TrainState:
    """Run (or continue) training; returns the final state with its trace.

    ``stop_after_steps`` halts once the global step counter reaches that
    value (saving a state checkpoint when ``out_dir`` is given), so a
    budgeted or interrupted run can be continued later via ``resume_path``.
    """
    n = len(records)
    if n < config.batch_size:
        raise CorpusTooSmallError(n, config.batch_size)
    if stop_after_steps is not None and stop_after_steps < 1:
        raise ValueError(f"stop_after_steps must be positive, got {stop_after_steps}")
    steps_per_epoch = n // config.batch_size
    total_steps = steps_per_epoch * config.epochs

    if resume_path is not None:
        state = load_train_state(resume_path, config)
        if state.adam.total_steps != total_steps:
            raise ValueError(
                f"checkpoint was trained toward {state.adam.total_steps} steps, "
                f"this corpus and config imply {total_steps}"
            )
        if state.step >= total_steps:
            logger.info("nothing to do: checkpoint already at step %d", state.step)
            return state
    else:
        encoder = init_encoder(config.encoder, config.seed)
        momentum = make_momentum_encoder(encoder) if config.contrast.use_momentum_encoder else None
        adam = AdamState(
            learning_rate=config.learning_rate,
            total_steps=total_steps,
            warmup_fraction=config.warmup_fraction,
        )
        qlen = config.contrast.negative_queue_length
        rep_dim = (
            config.encoder.projection_dim
            if config.contrast.use_projection_head
            else config.encoder.hidden_dim
        )
        state = TrainState(
            config=config,
            encoder=encoder,
            momentum_encoder=momentum,
            adam=adam,
            rng=_step_rng(config.seed),
            step=0,
            queue_source=NegativeQueue(qlen, rep_dim) if qlen else None,
            queue_target=NegativeQueue(qlen, rep_dim) if qlen else None,
        )

    bare_by_record: dict[str, tuple[list[ExampleSentence], list[ExampleSentence]]] = {}
    if not config.use_example_sentences:
        for rec in records:
            bare_by_record[rec.id] = ([bare_example(rec.source)], [bare_example(rec.target)])

    trace_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_path = out_dir / "trace.txt"
        fresh = resume_path is None or not trace_path.exists()
        trace_fh = open(trace_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            trace_fh.write("# step loss learning_rate seconds\n")

    mu = config.contrast.momentum_coefficient
    temperature = config.contrast.temperature
    use_proj = config.contrast.use_projection_head
    m_sentences = config.sentences_per_phrase
    params = state.encoder.params

    current_epoch = -1
    perm: Optional[np.ndarray] = None
    try:
        for step in range(state.step, total_steps):
            t0 = time.perf_counter()
            epoch = step // steps_per_epoch
            slot = step % steps_per_epoch
            if epoch != current_epoch:
                perm = epoch_permutation(config.seed, epoch, n)
                current_epoch = epoch
            batch = [
                records[j]
                for j in perm[slot * config.batch_size : (slot + 1) * config.batch_size]
            ]

            pairs: list[tuple[list[ExampleSentence], list[ExampleSentence]]] = []
            for rec in batch:
                if config.use_example_sentences:
                    xs = sample_examples(rec.source_examples, m_sentences, state.rng)
                    ys = sample_examples(rec.target_examples, m_sentences, state.rng)
                else:
                    xs, ys = bare_by_record[rec.id]
                pairs.append((xs, ys))

            source_reps = [
                represent_phrase(
                    state.encoder, None, xs, mode="train", rng=state.rng,
                    use_projection=use_proj,
                ).projected
                for xs, _ in pairs
            ]
            target_reps = [
                represent_phrase(
                    state.encoder, None, ys, mode="train", rng=state.rng,
                    use_projection=use_proj,
                ).projected
                for _, ys in pairs
            ]
            source_online = _stack_reps(source_reps)
            target_online = _stack_reps(target_reps)

            if state.momentum_encoder is not None:
                with T.no_grad():
                    source_starred = T.constant(np.concatenate([
                        infer_phrase_vectors(state.momentum_encoder, xs, use_projection=use_proj)[1]
                        for xs, _ in pairs
                    ], axis=0))
                    target_starred = T.constant(np.concatenate([
                        infer_phrase_vectors(state.momentum_encoder, ys, use_projection=use_proj)[1]
                        for _, ys in pairs
                    ], axis=0))
            else:
                # Momentum ablated: gradients flow through both sides.
                source_starred = source_online
                target_starred = target_online

            loss = bidirectional_contrast_loss(
                source_online,
                candidates_with_queue(target_starred, state.queue_target),
                target_online,
                candidates_with_queue(source_starred, state.queue_source),
                temperature,
            )
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(step, [r.id for r in batch], loss_value)

            T.zero_grad(params.values())
            T.backward(loss)
            lr_used = adam_step(params, state.adam)
            if state.momentum_encoder is not None:
                update_momentum_encoder(state.momentum_encoder, state.encoder, mu)

            if state.queue_target is not None:
                state.queue_target.push(target_starred.values)
                state.queue_source.push(source_starred.values)

            state.step = step + 1
            dt = time.perf_counter() - t0
            entry = TraceEntry(step, loss_value, lr_used, dt)
            state.trace.append(entry)
            if trace_fh is not None:
                trace_fh.write(
                    f"{entry.step} {entry.loss:.10f} {entry.learning_rate:.10e} {entry.seconds:.4f}\n"
                )
                trace_fh.flush()
            if log_every and (step + 1) % log_every == 0:
                logger.info(
                    "step %d/%d loss %.4f lr %.2e", step + 1, total_steps, loss_value, lr_used
                )

            stopping = stop_after_steps is not None and state.step >= stop_after_steps
            if out_dir is not None:
                final = step + 1 == total_steps
                periodic = config.checkpoint_every and (step + 1) % config.checkpoint_every == 0
                if final or periodic or stopping:
                    save_train_state(state, out_dir / "state-latest.ckpt")
                if final:
                    save_encoder(state.encoder, out_dir / "encoder.ckpt")
            if stopping:
                break
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return state


# ---------------------------------------------------------------------------
# Train-state persistence


def save_train_state(state: TrainState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.encoder.params.items():
        arrays[f"theta/{name}"] = p.values
    if state.momentum_encoder is not None:
        for name, p in state.momentum_encoder.params.items():
            arrays[f"theta_m/{name}"] = p.values
    for name, m in state.adam.first_moment.items():
        arrays[f"adam.m/{name}"] = m
    for name, v in state.adam.second_moment.items():
        arrays[f"adam.v/{name}"] = v
    arrays["meta/counters"] = np.array(
        [[float(state.step), float(state.adam.step_count), float(state.adam.total_steps)]]
    )
    rng_json = json.dumps(state.rng.bit_generator.state).encode("utf-8")
    arrays["meta/rng"] = np.frombuffer(rng_json, dtype=np.uint8).astype(np.float64)
    if state.queue_source is not None and len(state.queue_source):
        arrays["queue/source"] = state.queue_source.matrix()
    if state.queue_target is not None and len(state.queue_target):
        arrays["queue/target"] = state.queue_target.matrix()
    save_arrays(path, arrays, config_hash(state.config.text()))


def load_train_state(path, config: TrainConfig) -> TrainState:
    arrays, digest = load_arrays(path)
    if digest != config_hash(config.text()):
        raise ValueError(
            "train-state checkpoint was written with a different configuration"
        )
    enc_params = {
        name.removeprefix("theta/"): arr
        for name, arr in arrays.items()
        if name.startswith("theta/")
    }
    encoder = PhraseEncoder(
        config.encoder,
        {
            name: T.Tensor(arr, requires_grad=True, name=name)
            for name, arr in enc_params.items()
        },
    )
    momentum = None
    if config.contrast.use_momentum_encoder:
        mom_params = {
            name.removeprefix("theta_m/"): arr
            for name, arr in arrays.items()
            if name.startswith("theta_m/")
        }
        momentum = PhraseEncoder(
            config.encoder,
            {
                name: T.Tensor(arr, requires_grad=False, name=name)
                for name, arr in mom_params.items()
            },
        )

    counters = arrays["meta/counters"]
    step = int(counters[0, 0])
    adam = AdamState(
        learning_rate=config.learning_rate,
        total_steps=int(counters[0, 2]),
        warmup_fraction=config.warmup_fraction,
        step_count=int(counters[0, 1]),
        first_moment={
            name.removeprefix("adam.m/"): arr
            for name, arr in arrays.items()
            if name.startswith("adam.m/")
        },
        second_moment={
            name.removeprefix("adam.v/"): arr
            for name, arr in arrays.items()
            if name.startswith("adam.v/")
        },
    )

    rng_bytes = bytes(arrays["meta/rng"].astype(np.uint8))
    bit_gen = np.random.PCG64()
    bit_gen.state = json.loads(rng_bytes.decode("utf-8"))
    rng = np.random.Generator(bit_gen)

    qlen = config.contrast.negative_queue_length
    rep_dim = (
        config.encoder.projection_dim
        if config.contrast.use_projection_head
        else config.encoder.hidden_dim
    )
    queue_source = queue_target = None
    if qlen:
        queue_source = NegativeQueue(qlen, rep_dim)
        queue_target = NegativeQueue(qlen, rep_dim)
        if "queue/source" in arrays:
            queue_source.push(arrays["queue/source"])
        if "queue/target" in arrays:
            queue_target.push(arrays["queue/target"])

    return TrainState(
        config=config,
        encoder=encoder,
        momentum_encoder=momentum,
        adam=adam,
        rng=rng,
        step=step,
        queue_source=queue_source,
        queue_target=queue_target,
    )
