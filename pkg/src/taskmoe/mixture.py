"""Fusing per-stream choice probabilities into one answer.

Each stream scores the two choices independently, so its pair (p1, p2) need
not sum to one. A stream's confidence is how far apart it puts the two
choices; at test time the streams are averaged with those confidences as
weights, or the single most confident stream is trusted outright.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

ZERO_WEIGHT = 1e-12


class MixtureMode(str, enum.Enum):
    WEIGHTED_SUM = "weighted"
    HARD_CHOICE = "hard"


@dataclass(frozen=True)
class StreamPrediction:
    stream: str
    p1: float
    p2: float

    def __post_init__(self):
        for p in (self.p1, self.p2):
            if not (math.isfinite(p) and 0.0 <= p <= 1.0):
                raise ValueError(f"stream {self.stream}: probability {p!r} outside [0, 1]")

    @property
    def weight(self) -> float:
        return confidence_weight(self)

    @property
    def argmax(self) -> int:
        return 0 if self.p1 >= self.p2 else 1


@dataclass(frozen=True)
class Combined:
    p1: float
    p2: float
    chosen: int  # 0-based: 0 = first choice, 1 = second
    weights: tuple[float, ...]


def confidence_weight(pred: StreamPrediction) -> float:
    return abs(pred.p1 - pred.p2)


def combine_weighted(preds: Sequence[StreamPrediction]) -> Combined:
    if not preds:
        raise ValueError("combine_weighted: no stream predictions")
    weights = [confidence_weight(p) for p in preds]
    total = math.fsum(weights)
    norm = weights if total >= ZERO_WEIGHT else [1.0] * len(preds)
    total = math.fsum(norm)
    p1 = math.fsum(w * p.p1 for w, p in zip(norm, preds)) / total
    p2 = math.fsum(w * p.p2 for w, p in zip(norm, preds)) / total
    return Combined(p1, p2, 0 if p1 >= p2 else 1, tuple(weights))


def combine_hard(preds: Sequence[StreamPrediction]) -> Combined:
    if not preds:
        raise ValueError("combine_hard: no stream predictions")
    weights = [confidence_weight(p) for p in preds]
    best = max(range(len(preds)), key=lambda i: (weights[i], -i))
    winner = preds[best]
    return Combined(winner.p1, winner.p2, winner.argmax, tuple(weights))


def combine(preds: Sequence[StreamPrediction], mode: MixtureMode | str = MixtureMode.WEIGHTED_SUM) -> Combined:
    mode = MixtureMode(mode)
    return combine_weighted(preds) if mode is MixtureMode.WEIGHTED_SUM else combine_hard(preds)
