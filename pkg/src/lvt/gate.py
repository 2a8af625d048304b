"""Curriculum sensory gate: cosine warm-up of the response->image path."""
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class GateSchedule:
    """Gate opening over ``warmup_steps`` optimizer steps from ``epsilon`` to 1."""

    warmup_steps: int = 400
    epsilon: float = 1e-6

    def __post_init__(self):
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be a positive integer, got {self.warmup_steps}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"gate epsilon must lie in (0, 1), got {self.epsilon}")

    def gamma(self, t):
        return gamma(self, t)

    def bias(self, t):
        return gate_bias(gamma(self, t))


def gamma(schedule, t):
    """Gate scalar at optimizer step ``t``; exactly 1 once ``t >= warmup_steps``."""
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t >= schedule.warmup_steps:
        return 1.0
    eps = schedule.epsilon
    return eps + (1.0 - eps) / 2.0 * (1.0 - math.cos(math.pi * t / schedule.warmup_steps))


def gate_bias(gamma_value):
    """Additive attention bias ln(gamma) applied to answer-query/image-key pairs."""
    if not gamma_value > 0.0 or gamma_value > 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma_value}")
    return math.log(gamma_value)


def constant_schedule():
    """Single-stage baseline: the gate is open from step 0."""
    return _OpenGate()


class _OpenGate:
    warmup_steps = 0
    epsilon = 1.0

    def gamma(self, t):
        if t < 0:
            raise ValueError(f"step must be non-negative, got {t}")
        return 1.0

    def bias(self, t):
        return gate_bias(self.gamma(t))
