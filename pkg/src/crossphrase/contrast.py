"""Bidirectional contrastive objective over phrase representations.

Each direction scores a batch of anchor vectors against a bank of
candidate vectors (the aligned positives first, then any extra
negatives), applies a temperature-scaled row softmax, and sums the
negative log-likelihood of the diagonal.  The full objective is the sum
of both directions, each anchored in one language and scored against
the other language's momentum-encoded candidates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoder import PhraseEncoder
from .optim import momentum_blend

__all__ = [
    "ContrastConfig",
    "ContrastError",
    "NegativeQueue",
    "directional_contrast_loss",
    "bidirectional_contrast_loss",
    "make_momentum_encoder",
    "update_momentum_encoder",
    "candidates_with_queue",
]

UNIT_NORM_TOL = 1e-6


class ContrastError(ValueError):
    """Invalid inputs to the contrastive objective."""


@dataclass(frozen=True)
class ContrastConfig:
    """Knobs for the contrastive objective.

    ``momentum_coefficient`` is the EMA weight on the frozen encoder's
    own parameters.  ``negative_queue_length`` of 0 disables the queue.
    """

    temperature: float = 0.05
    momentum_coefficient: float = 0.999
    use_momentum_encoder: bool = True
    use_projection_head: bool = True
    negative_queue_length: int = 0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ContrastError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum_coefficient <= 1.0:
            raise ContrastError(
                f"momentum coefficient out of [0, 1]: {self.momentum_coefficient}"
            )
        if self.negative_queue_length < 0:
            raise ContrastError(
                f"negative_queue_length must be non-negative: {self.negative_queue_length}"
            )


def _check_unit_rows(values: np.ndarray, what: str) -> None:
    norms = np.sqrt((values**2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        worst = float(np.abs(norms - 1.0).max())
        raise ContrastError(f"{what} rows are not unit-norm (max deviation {worst:.3e})")


def directional_contrast_loss(anchors: T.Tensor, candidates: T.Tensor, temperature: float) -> T.Tensor:
    """One direction of the objective as a scalar tensor.

    ``anchors`` is (N, d); ``candidates`` is (M, d) with M >= N and
    candidate i being the positive for anchor i.  Rows must be
    unit-norm.  Gradients flow into whichever side is tracked.
    """
    if temperature <= 0.0:
        raise ContrastError(f"temperature must be positive, got {temperature}")
    n = anchors.shape[0]
    m = candidates.shape[0]
    if n < 1:
        raise ContrastError("empty anchor batch")
    if m < n:
        raise ContrastError(f"candidate bank has {m} rows for {n} anchors")
    if anchors.shape[1] != candidates.shape[1]:
        raise T.ShapeMismatchError("directional_contrast_loss", anchors.shape, candidates.shape)
    _check_unit_rows(anchors.values, "anchor")
    _check_unit_rows(candidates.values, "candidate")

    scores = T.scale(T.matmul(anchors, T.transpose(candidates)), 1.0 / temperature)
    log_probs = T.log(T.softmax_rows(scores))
    mask = np.zeros((n, m))
    mask[np.arange(n), np.arange(n)] = 1.0
    picked = T.mul(log_probs, T.constant(mask))
    return T.scale(T.sum_all(picked), -1.0)


def bidirectional_contrast_loss(
    source_online: T.Tensor,
    target_candidates: T.Tensor,
    target_online: T.Tensor,
    source_candidates: T.Tensor,
    temperature: float,
) -> T.Tensor:
    """Sum of both directions: source against target candidates and back."""
    forward = directional_contrast_loss(source_online, target_candidates, temperature)
    backward = directional_contrast_loss(target_online, source_candidates, temperature)
    return T.add(forward, backward)


def make_momentum_encoder(encoder: PhraseEncoder) -> PhraseEncoder:
    """Frozen copy that starts bit-identical to the online encoder."""
    return encoder.clone(requires_grad=False)


def update_momentum_encoder(momentum: PhraseEncoder, online: PhraseEncoder, mu: float) -> None:
    if momentum.config != online.config:
        raise ContrastError("momentum and online encoder configurations differ")
    momentum_blend(momentum.params, online.params, mu)


class NegativeQueue:
    """FIFO store of past candidate rows used as extra negatives."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ContrastError(f"queue capacity must be positive, got {capacity}")
        if dim < 1:
            raise ContrastError(f"queue row dim must be positive, got {dim}")
        self.capacity = capacity
        self.dim = dim
        self._rows: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, rows: np.ndarray) -> None:
        """Append rows oldest-first; overflow evicts from the front."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise T.ShapeMismatchError("queue_push", rows.shape, (0, self.dim))
        _check_unit_rows(rows, "queued")
        for row in rows:
            self._rows.append(row.copy())

    def matrix(self) -> Optional[np.ndarray]:
        if not self._rows:
            return None
        return np.stack(list(self._rows), axis=0)


def candidates_with_queue(current: T.Tensor, queue: Optional[NegativeQueue]) -> T.Tensor:
    """Current batch rows first, then queued negatives; identity when empty."""
    if queue is None:
        return current
    stored = queue.matrix()
    if stored is None:
        return current
    return T.concat_rows([current, T.constant(stored)])
