"""Adam with bias correction plus a linear warmup / linear decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeMismatchError, Tensor

__all__ = [
    "AdamState",
    "MissingGradientError",
    "effective_learning_rate",
    "adam_step",
    "momentum_blend",
]


class MissingGradientError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""

    def __init__(self, names: list[str]):
        self.names = list(names)
        super().__init__("missing gradient for parameter(s): " + ", ".join(self.names))


@dataclass
class AdamState:
    """Optimizer state; moments are keyed by parameter name."""

    learning_rate: float
    total_steps: int
    warmup_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction out of [0, 1]: {self.warmup_fraction}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be non-negative: {self.learning_rate}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def effective_learning_rate(state: AdamState, step: int | None = None) -> float:
    """Schedule value at ``step`` (defaults to the state's step counter).

    Rises linearly from 0 to the peak rate over the warmup span, then
    decays linearly to 0 at ``total_steps``.  At the warmup boundary the
    value is exactly the configured peak.  Steps past the end clamp to 0.
    """
    t = state.step_count if step is None else step
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    w = state.warmup_steps
    if w > 0 and t <= w:
        return state.learning_rate * (t / w)
    if t >= state.total_steps:
        return 0.0
    return state.learning_rate * (state.total_steps - t) / (state.total_steps - w)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> float:
    """Apply one Adam update in place; returns the learning rate used.

    Every parameter must carry a gradient (a zero array counts, None
    does not).  Moments for unseen names are initialized to zeros.
    A parameter whose gradient is identically zero is left bit-identical
    when its moments are still zero.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(missing)

    state.step_count += 1
    t = state.step_count
    lr = effective_learning_rate(state, t)
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t

    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros_like(p.values)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            p.values -= (lr / bias1) * m / (np.sqrt(v / bias2) + state.epsilon)
    return lr


def momentum_blend(target: Mapping[str, Tensor], source: Mapping[str, Tensor], mu: float) -> None:
    """Exponential moving average update: target <- mu*target + (1-mu)*source.

    mu = 1 leaves the target bit-identical; mu = 0 copies the source
    exactly.  Operates in place and records nothing on the tape.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum coefficient out of [0, 1]: {mu}")
    if set(target.keys()) != set(source.keys()):
        missing = set(target.keys()) ^ set(source.keys())
        raise KeyError(f"momentum_blend: parameter sets differ on {sorted(missing)}")
    if mu == 1.0:
        return
    for name, tgt in target.items():
        src = source[name]
        if tgt.shape != src.shape:
            raise ShapeMismatchError("momentum_blend", tgt.shape, src.shape)
        if mu == 0.0:
            np.copyto(tgt.values, src.values)
        else:
            tgt.values *= mu
            tgt.values += (1.0 - mu) * src.values
