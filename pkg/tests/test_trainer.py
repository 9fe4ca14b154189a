"""Training loop: batching, sampling, persistence, exact resumability."""

import numpy as np
import pytest

from crossphrase.contrast import ContrastConfig
from crossphrase.corpus import ExampleSentence, Vocabulary, build_record
from crossphrase.encoder import EncoderConfig
from crossphrase.trainer import (
    CorpusTooSmallError,
    TrainConfig,
    TrainingDivergedError,
    bare_example,
    epoch_batches,
    epoch_permutation,
    load_train_state,
    sample_examples,
    train,
)

WORDS_A = [f"a{i:02d}" for i in range(12)]
WORDS_B = [f"b{i:02d}" for i in range(12)]
VOCAB = Vocabulary.from_tokens(WORDS_A + WORDS_B)


def _example(words, phrase_words, rng):
    n_ctx = int(rng.integers(3, 6))
    ctx = [words[int(rng.integers(0, len(words)))] for _ in range(n_ctx)]
    pos = int(rng.integers(0, n_ctx + 1))
    tokens = ctx[:pos] + list(phrase_words) + ctx[pos:]
    text = " ".join(tokens)
    return ExampleSentence(
        text, tuple(VOCAB.encode(tokens)), pos + 1, pos + len(phrase_words)
    )


def _records(n, n_examples=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(1, 3))
        idx = rng.choice(len(WORDS_A), size=k, replace=False)
        pa = [WORDS_A[int(j)] for j in idx]
        pb = [WORDS_B[int(j)] for j in idx]
        out.append(
            build_record(
                f"r{i:03d}", "aa", " ".join(pa), "bb", " ".join(pb),
                [_example(WORDS_A, pa, rng) for _ in range(n_examples)],
                [_example(WORDS_B, pb, rng) for _ in range(n_examples)],
                VOCAB,
            )
        )
    return out


def _tiny_config(**overrides):
    enc = EncoderConfig(
        vocab_size=len(VOCAB), hidden_dim=8, num_layers=1, num_heads=2,
        ffn_dim=12, max_sequence_length=16, projection_dim=8, dropout_rate=0.1,
    )
    defaults = dict(encoder=enc, batch_size=4, sentences_per_phrase=2, epochs=2)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def _param_bytes(encoder):
    return {n: p.values.tobytes() for n, p in encoder.params.items()}


# ---------------------------------------------------------------------------
# Batching and sampling


def test_epoch_permutation_deterministic_and_distinct():
    p1 = epoch_permutation(3, 0, 50)
    p2 = epoch_permutation(3, 0, 50)
    np.testing.assert_array_equal(p1, p2)
    assert not np.array_equal(epoch_permutation(3, 1, 50), p1)
    assert not np.array_equal(epoch_permutation(4, 0, 50), p1)
    assert sorted(p1.tolist()) == list(range(50))


def test_epoch_batches_drop_partial():
    records = _records(10)
    batches = epoch_batches(records, seed=0, epoch=0, batch_size=4)
    assert len(batches) == 2
    assert all(len(b) == 4 for b in batches)
    ids = [r.id for b in batches for r in b]
    assert len(set(ids)) == 8


def test_epoch_batches_corpus_too_small():
    with pytest.raises(CorpusTooSmallError):
        epoch_batches(_records(3), seed=0, epoch=0, batch_size=4)


def test_sample_examples_without_replacement_when_possible():
    records = _records(1, n_examples=6)
    pool = records[0].source_examples
    rng = np.random.default_rng(0)
    got = sample_examples(pool, 6, rng)
    assert len({id(e) for e in got}) == 6


def test_sample_examples_with_replacement_when_short():
    records = _records(1, n_examples=2)
    pool = records[0].source_examples
    got = sample_examples(pool, 5, np.random.default_rng(0))
    assert len(got) == 5
    assert set(id(e) for e in got) <= {id(e) for e in pool}
    with pytest.raises(ValueError):
        sample_examples([], 2, np.random.default_rng(0))


def test_bare_example_spans_whole_phrase():
    rec = _records(1)[0]
    bare = bare_example(rec.source)
    assert bare.text == rec.source.surface
    assert bare.tokens == rec.source.tokens
    assert (bare.span_start, bare.span_end) == (1, len(rec.source.tokens))
    assert bare.span_tokens() == rec.source.tokens


# ---------------------------------------------------------------------------
# Config round trip


def test_config_kv_round_trip():
    cfg = _tiny_config(learning_rate=1e-3, warmup_fraction=0.05, seed=9,
                       contrast=ContrastConfig(temperature=0.2, negative_queue_length=8))
    back = TrainConfig.from_kv(dict(cfg.to_kv()))
    assert back == cfg
    assert back.text() == cfg.text()


def test_config_from_kv_vocab_handling():
    cfg = _tiny_config()
    kv = dict(cfg.to_kv())
    assert TrainConfig.from_kv(kv, vocab_size=len(VOCAB)) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_kv(kv, vocab_size=len(VOCAB) + 1)
    kv_no_vocab = {k: v for k, v in kv.items() if k != "encoder.vocab_size"}
    assert TrainConfig.from_kv(kv_no_vocab, vocab_size=len(VOCAB)) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_kv(kv_no_vocab)


def test_config_from_kv_rejects_unknown_keys():
    kv = dict(_tiny_config().to_kv())
    kv["learning_rte"] = "0.01"
    with pytest.raises(ValueError, match="learning_rte"):
        TrainConfig.from_kv(kv)


def test_config_validation():
    with pytest.raises(ValueError):
        _tiny_config(batch_size=0)
    with pytest.raises(ValueError):
        _tiny_config(epochs=0)
    with pytest.raises(ValueError):
        _tiny_config(learning_rate=0.0)
    with pytest.raises(ValueError):
        _tiny_config(warmup_fraction=1.5)


# ---------------------------------------------------------------------------
# Training runs


def test_train_smoke_and_trace(tmp_path):
    records = _records(8)
    cfg = _tiny_config()
    state = train(records, cfg, out_dir=tmp_path)
    assert state.step == 4  # 8 records / batch 4 * 2 epochs
    assert len(state.trace) == 4
    assert all(np.isfinite(e.loss) for e in state.trace)
    assert (tmp_path / "encoder.ckpt").exists()
    assert (tmp_path / "state-latest.ckpt").exists()
    lines = (tmp_path / "trace.txt").read_text().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) == 5
    first = lines[1].split()
    assert int(first[0]) == 0 and float(first[1]) == pytest.approx(state.trace[0].loss)


def test_train_changes_online_and_momentum_weights():
    # epochs=2 so step 1 sits before the linear decay reaches zero.
    records = _records(4)
    cfg = _tiny_config(batch_size=4, epochs=2, contrast=ContrastConfig(momentum_coefficient=0.5))
    state = train(records, cfg)
    assert state.step == 2
    assert state.momentum_encoder is not None
    for name, p in state.encoder.params.items():
        assert not np.array_equal(p.values, state.momentum_encoder.params[name].values)


def test_momentum_blend_matches_hand_recurrence():
    records = _records(4)
    cfg = _tiny_config(batch_size=4, epochs=2, contrast=ContrastConfig(momentum_coefficient=0.5))
    from crossphrase.encoder import init_encoder

    theta0 = {n: p.values.copy() for n, p in init_encoder(cfg.encoder, cfg.seed).params.items()}
    theta1 = {n: p.values.copy() for n, p in train(records, cfg, stop_after_steps=1).encoder.params.items()}
    state = train(records, cfg)
    for name, p in state.momentum_encoder.params.items():
        expected = theta0[name].copy()
        expected *= 0.5
        expected += 0.5 * theta1[name]
        expected *= 0.5
        expected += 0.5 * state.encoder.params[name].values
        np.testing.assert_array_equal(p.values, expected)


def test_train_without_example_sentences():
    records = _records(4)
    cfg = _tiny_config(batch_size=4, epochs=1, use_example_sentences=False)
    state = train(records, cfg)
    assert state.step == 1
    assert np.isfinite(state.trace[0].loss)


def test_train_with_negative_queue():
    records = _records(8)
    cfg = _tiny_config(contrast=ContrastConfig(negative_queue_length=8))
    state = train(records, cfg)
    assert len(state.queue_source) == 8
    assert len(state.queue_target) == 8
    norms = np.sqrt((state.queue_target.matrix() ** 2).sum(axis=1))
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_training_diverged_reports_batch():
    records = _records(4)
    cfg = _tiny_config(batch_size=4, epochs=1,
                       contrast=ContrastConfig(temperature=1e-300))
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            train(records, cfg)
    assert info.value.step == 0
    assert len(info.value.record_ids) == 4


# ---------------------------------------------------------------------------
# Determinism and resumability


def test_same_seed_bit_identical_runs():
    records = _records(8)
    cfg = _tiny_config()
    a = train(records, cfg)
    b = train(records, cfg)
    assert _param_bytes(a.encoder) == _param_bytes(b.encoder)
    assert [e.loss for e in a.trace] == [e.loss for e in b.trace]


def test_different_seed_differs():
    records = _records(8)
    a = train(records, _tiny_config(seed=0))
    b = train(records, _tiny_config(seed=1))
    assert _param_bytes(a.encoder) != _param_bytes(b.encoder)


def test_resume_is_bit_identical(tmp_path):
    records = _records(8)
    cfg = _tiny_config(epochs=3)  # 6 steps total

    straight = train(records, cfg, out_dir=tmp_path / "straight")

    part_dir = tmp_path / "parts"
    first = train(records, cfg, out_dir=part_dir, stop_after_steps=3)
    assert first.step == 3
    resumed = train(records, cfg, out_dir=part_dir,
                    resume_path=part_dir / "state-latest.ckpt")
    assert resumed.step == 6

    assert _param_bytes(resumed.encoder) == _param_bytes(straight.encoder)
    assert _param_bytes(resumed.momentum_encoder) == _param_bytes(straight.momentum_encoder)
    for name in straight.adam.first_moment:
        assert resumed.adam.first_moment[name].tobytes() == straight.adam.first_moment[name].tobytes()
        assert resumed.adam.second_moment[name].tobytes() == straight.adam.second_moment[name].tobytes()
    assert [e.loss for e in resumed.trace] == [e.loss for e in straight.trace[3:]]

    trace_lines = (part_dir / "trace.txt").read_text().splitlines()
    straight_lines = (tmp_path / "straight" / "trace.txt").read_text().splitlines()
    assert [l.split()[:2] for l in trace_lines] == [l.split()[:2] for l in straight_lines]


def test_resume_with_queue_round_trip(tmp_path):
    records = _records(8)
    cfg = _tiny_config(epochs=2, contrast=ContrastConfig(negative_queue_length=6))
    straight = train(records, cfg, out_dir=tmp_path / "s")
    part = tmp_path / "p"
    train(records, cfg, out_dir=part, stop_after_steps=2)
    resumed = train(records, cfg, out_dir=part, resume_path=part / "state-latest.ckpt")
    assert _param_bytes(resumed.encoder) == _param_bytes(straight.encoder)
    np.testing.assert_array_equal(
        resumed.queue_target.matrix(), straight.queue_target.matrix()
    )


def test_load_train_state_rejects_other_config(tmp_path):
    records = _records(8)
    cfg = _tiny_config()
    train(records, cfg, out_dir=tmp_path)
    other = _tiny_config(learning_rate=1e-3)
    with pytest.raises(ValueError):
        load_train_state(tmp_path / "state-latest.ckpt", other)


def test_resume_total_steps_mismatch(tmp_path):
    records = _records(8)
    cfg = _tiny_config()
    train(records, cfg, out_dir=tmp_path)
    with pytest.raises(ValueError):
        train(_records(12), cfg, resume_path=tmp_path / "state-latest.ckpt")


def test_stop_after_validation():
    with pytest.raises(ValueError):
        train(_records(8), _tiny_config(), stop_after_steps=0)
