"""Confidence-weighted training-sample memory.

Stored samples carry an age weight (geometric ladder anchored at the newest
sample) and a confidence score derived from the frame's peak classifier value,
boosted by a square root while the selected object is still the initially
annotated one. The memory evicts the sample with the smallest age-times-
confidence product, and the online loss weighs each sample by that same
product, ignoring samples below a confidence floor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

CONFIDENCE_FLOOR = 0.5


@dataclass
class MemorySample:
    frame: int
    payload: Any
    age_weight: float = 1.0
    confidence: float = 1.0

    def __post_init__(self):
        if self.age_weight < 0:
            raise ValueError("age weight must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def _ridge_data_term(theta: np.ndarray, x: np.ndarray, y: float) -> float:
    return float((np.dot(theta, x) - y) ** 2)


def _ridge_regularizer(theta: np.ndarray) -> float:
    return float(np.dot(theta, theta))


@dataclass
class OnlineLossSpec:
    """Configuration of the weighted online loss over a pluggable data term."""

    regularizer_weight: float = 0.1
    data_term: Callable[..., float] = _ridge_data_term
    regularizer: Callable[..., float] = _ridge_regularizer
    learning_rate_param: float = 0.1
    capacity: int = 30
    confidence_floor: float = CONFIDENCE_FLOOR

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= self.learning_rate_param <= 1.0:
            raise ValueError("learning rate parameter must lie in [0, 1]")
        if self.regularizer_weight < 0:
            raise ValueError("regularizer weight must be non-negative")


def confidence(sigma: float, selected_is_initial: bool) -> float:
    """Per-frame sample confidence from the peak score sigma."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    return math.sqrt(sigma) if selected_is_initial else sigma


def decay_age_weights(weights: list[float], gamma: float) -> list[float]:
    """Geometric age ladder, oldest first: alpha_k = (1 - gamma) * alpha_{k+1},
    anchored at 1 for the newest sample. Only the count of the input matters."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    n = len(weights)
    return [(1.0 - gamma) ** (n - 1 - i) for i in range(n)]


def choose_replacement(samples: list[MemorySample]) -> int:
    """Index of the sample with the smallest age * confidence product."""
    if not samples:
        raise ValueError("cannot evict from an empty memory")
    best, best_val = 0, math.inf
    for i, s in enumerate(samples):
        val = s.age_weight * s.confidence
        if val < best_val:
            best, best_val = i, val
    return best


def online_loss(spec: OnlineLossSpec, samples: list[MemorySample], theta) -> float:
    """J = lambda * R(theta) + sum_k alpha_k beta_k Q(theta; x_k, y_k).

    Samples with confidence below the floor contribute nothing.
    """
    total = spec.regularizer_weight * spec.regularizer(theta)
    for s in samples:
        if s.confidence < spec.confidence_floor:
            continue
        x, y = s.payload
        total += s.age_weight * s.confidence * spec.data_term(theta, x, y)
    return float(total)


@dataclass
class MemoryManager:
    """Bounded sample store used by the online tracking loop."""

    spec: OnlineLossSpec = field(default_factory=OnlineLossSpec)
    samples: list[MemorySample] = field(default_factory=list)

    def insert(self, payload, conf: float, frame: int) -> None:
        if len(self.samples) >= self.spec.capacity:
            del self.samples[choose_replacement(self.samples)]
        self.samples.append(MemorySample(frame=frame, payload=payload, confidence=conf))
        ladder = decay_age_weights(
            [s.age_weight for s in self.samples], self.spec.learning_rate_param
        )
        for s, alpha in zip(self.samples, ladder):
            s.age_weight = alpha

    def loss(self, theta) -> float:
        return online_loss(self.spec, self.samples, theta)

    def refit_ridge(self, dim: int) -> np.ndarray:
        """Closed-form minimizer of the bundled weighted least-squares loss."""
        lhs = self.spec.regularizer_weight * np.eye(dim)
        rhs = np.zeros(dim)
        for s in self.samples:
            if s.confidence < self.spec.confidence_floor:
                continue
            w = s.age_weight * s.confidence
            x, y = s.payload
            x = np.asarray(x, dtype=np.float64)
            lhs += w * np.outer(x, x)
            rhs += w * y * x
        return np.linalg.solve(lhs, rhs)
