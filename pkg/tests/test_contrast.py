"""Contrastive objective, momentum encoder management, negative queue."""

import math

import numpy as np
import pytest

import crossphrase.tensor as T
from crossphrase.contrast import (
    ContrastConfig,
    ContrastError,
    NegativeQueue,
    bidirectional_contrast_loss,
    candidates_with_queue,
    directional_contrast_loss,
    make_momentum_encoder,
    update_momentum_encoder,
)
from crossphrase.encoder import EncoderConfig, init_encoder


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.sqrt((x**2).sum(axis=1, keepdims=True))


def _loop_oracle(anchors: np.ndarray, candidates: np.ndarray, temperature: float) -> float:
    """Per-row negative log-likelihood computed with plain python floats."""
    total = 0.0
    for i in range(anchors.shape[0]):
        logits = [float(anchors[i] @ candidates[j]) / temperature for j in range(candidates.shape[0])]
        denom = sum(math.exp(z) for z in logits)
        total += -math.log(math.exp(logits[i]) / denom)
    return total


# ---------------------------------------------------------------------------
# Loss identities


def test_single_pair_loss_is_exactly_zero():
    v = np.zeros((1, 8))
    v[0, 0] = 1.0
    a = T.constant(v)
    loss = bidirectional_contrast_loss(a, a, a, a, temperature=0.05)
    assert loss.item() == 0.0


def test_two_pair_orthogonal_closed_form():
    temp = 0.05
    e = np.eye(2)
    a = T.constant(e)
    per_direction = 2.0 * math.log1p(math.exp(-1.0 / temp))
    directional = directional_contrast_loss(a, a, temp)
    assert abs(directional.item() - per_direction) <= 1e-12
    both = bidirectional_contrast_loss(a, a, a, a, temp)
    assert abs(both.item() - 2.0 * per_direction) <= 1e-12


def test_vectorized_loss_matches_loop_oracle_on_100_random_batches():
    rng = np.random.default_rng(1234)
    for trial in range(100):
        n = int(rng.integers(1, 9))
        extra = int(rng.integers(0, 5))
        d = int(rng.integers(2, 9))
        temp = float(rng.uniform(0.05, 1.0))
        anchors = _unit_rows(rng, n, d)
        candidates = _unit_rows(rng, n + extra, d)
        got = directional_contrast_loss(
            T.constant(anchors), T.constant(candidates), temp
        ).item()
        want = _loop_oracle(anchors, candidates, temp)
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want)), f"trial {trial}"


def test_bidirectional_is_sum_of_directions():
    rng = np.random.default_rng(7)
    s = _unit_rows(rng, 4, 6)
    t = _unit_rows(rng, 4, 6)
    forward = directional_contrast_loss(T.constant(s), T.constant(t), 0.1).item()
    backward = directional_contrast_loss(T.constant(t), T.constant(s), 0.1).item()
    both = bidirectional_contrast_loss(
        T.constant(s), T.constant(t), T.constant(t), T.constant(s), 0.1
    ).item()
    assert both == pytest.approx(forward + backward, rel=1e-15)


def test_gradient_flows_to_tracked_anchors_only():
    rng = np.random.default_rng(2)
    anchors = T.parameter(_unit_rows(rng, 3, 5))
    candidates = T.constant(_unit_rows(rng, 3, 5))
    loss = directional_contrast_loss(anchors, candidates, 0.2)
    T.backward(loss)
    assert anchors.grad is not None
    assert candidates.grad is None


# ---------------------------------------------------------------------------
# Input validation


def test_unit_norm_enforcement_tolerance():
    v = np.zeros((1, 4))
    v[0, 0] = 1.0 + 5e-7  # inside the 1e-6 tolerance
    ok = T.constant(v)
    directional_contrast_loss(ok, ok, 0.1)

    v2 = np.zeros((1, 4))
    v2[0, 0] = 1.0 + 5e-6  # outside
    with pytest.raises(ContrastError):
        directional_contrast_loss(T.constant(v2), ok, 0.1)


def test_candidate_bank_must_cover_anchors():
    rng = np.random.default_rng(3)
    a = T.constant(_unit_rows(rng, 3, 4))
    c = T.constant(_unit_rows(rng, 2, 4))
    with pytest.raises(ContrastError):
        directional_contrast_loss(a, c, 0.1)


def test_dimension_and_temperature_validation():
    rng = np.random.default_rng(4)
    a = T.constant(_unit_rows(rng, 2, 4))
    b = T.constant(_unit_rows(rng, 2, 5))
    with pytest.raises(T.ShapeMismatchError):
        directional_contrast_loss(a, b, 0.1)
    with pytest.raises(ContrastError):
        directional_contrast_loss(a, a, 0.0)


def test_config_validation():
    with pytest.raises(ContrastError):
        ContrastConfig(temperature=0.0)
    with pytest.raises(ContrastError):
        ContrastConfig(momentum_coefficient=1.5)
    with pytest.raises(ContrastError):
        ContrastConfig(negative_queue_length=-1)
    assert ContrastConfig().temperature == 0.05
    assert ContrastConfig().momentum_coefficient == 0.999


# ---------------------------------------------------------------------------
# Momentum encoder


ENC_CFG = EncoderConfig(vocab_size=20, hidden_dim=8, num_layers=1, num_heads=2,
                        ffn_dim=12, max_sequence_length=8, projection_dim=8,
                        dropout_rate=0.0)


def test_momentum_encoder_starts_identical_and_frozen():
    online = init_encoder(ENC_CFG, seed=0)
    frozen = make_momentum_encoder(online)
    assert not frozen.trainable
    for name in online.params:
        assert np.array_equal(frozen.params[name].values, online.params[name].values)


def test_momentum_update_blends_values():
    online = init_encoder(ENC_CFG, seed=0)
    frozen = make_momentum_encoder(online)
    online.params["proj.w1"].values += 1.0
    update_momentum_encoder(frozen, online, mu=0.5)
    diff = online.params["proj.w1"].values - frozen.params["proj.w1"].values
    np.testing.assert_allclose(diff, 0.5, rtol=1e-12)


def test_momentum_params_untouched_by_backward():
    online = init_encoder(ENC_CFG, seed=0)
    frozen = make_momentum_encoder(online)
    before = {n: p.values.tobytes() for n, p in frozen.params.items()}

    rng = np.random.default_rng(5)
    anchors = T.parameter(_unit_rows(rng, 2, 6))
    candidates = T.constant(_unit_rows(rng, 2, 6))
    T.backward(directional_contrast_loss(anchors, candidates, 0.1))

    for name, p in frozen.params.items():
        assert p.grad is None
        assert p.values.tobytes() == before[name]


def test_momentum_update_rejects_config_mismatch():
    online = init_encoder(ENC_CFG, seed=0)
    other = init_encoder(
        EncoderConfig(vocab_size=21, hidden_dim=8, num_layers=1, num_heads=2,
                      ffn_dim=12, max_sequence_length=8, projection_dim=8,
                      dropout_rate=0.0),
        seed=0,
    )
    with pytest.raises(ContrastError):
        update_momentum_encoder(make_momentum_encoder(other), online, 0.5)


# ---------------------------------------------------------------------------
# Negative queue


def test_queue_fifo_eviction():
    rng = np.random.default_rng(6)
    q = NegativeQueue(capacity=4, dim=3)
    assert q.matrix() is None
    first = _unit_rows(rng, 3, 3)
    second = _unit_rows(rng, 3, 3)
    q.push(first)
    assert len(q) == 3
    q.push(second)
    assert len(q) == 4
    got = q.matrix()
    expected = np.vstack([first[2:], second])
    np.testing.assert_array_equal(got, expected)


def test_queue_stores_copies():
    rng = np.random.default_rng(8)
    rows = _unit_rows(rng, 2, 3)
    q = NegativeQueue(capacity=8, dim=3)
    q.push(rows)
    rows[0, 0] = 99.0
    assert q.matrix()[0, 0] != 99.0


def test_queue_validation():
    with pytest.raises(ContrastError):
        NegativeQueue(capacity=0, dim=3)
    q = NegativeQueue(capacity=4, dim=3)
    with pytest.raises(T.ShapeMismatchError):
        q.push(np.ones((2, 4)))
    with pytest.raises(ContrastError):
        q.push(np.full((1, 3), 0.9))  # not unit-norm


def test_candidates_with_queue_merging():
    rng = np.random.default_rng(9)
    current = T.constant(_unit_rows(rng, 2, 3))
    assert candidates_with_queue(current, None) is current
    q = NegativeQueue(capacity=4, dim=3)
    assert candidates_with_queue(current, q) is current  # empty queue

    stored = _unit_rows(rng, 2, 3)
    q.push(stored)
    merged = candidates_with_queue(current, q)
    assert merged.shape == (4, 3)
    np.testing.assert_array_equal(merged.values[:2], current.values)
    np.testing.assert_array_equal(merged.values[2:], stored)


def test_disabled_queue_equals_empty_queue_loss_exactly():
    rng = np.random.default_rng(10)
    anchors = T.constant(_unit_rows(rng, 3, 4))
    cands = T.constant(_unit_rows(rng, 3, 4))
    plain = directional_contrast_loss(anchors, candidates_with_queue(cands, None), 0.1)
    empty = directional_contrast_loss(
        anchors, candidates_with_queue(cands, NegativeQueue(capacity=4, dim=4)), 0.1
    )
    assert plain.item() == empty.item()
