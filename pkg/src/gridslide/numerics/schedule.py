from __future__ import annotations

import math
from dataclasses import dataclass

from gridslide.errors import ConfigError

KINDS = ("cosine", "warmup_cosine", "constant")


@dataclass(frozen=True)
class Schedule:
    """Scalar hyperparameter schedule over ``total`` steps.

    ``cosine`` anneals start -> final. ``warmup_cosine`` ramps linearly
    start -> peak over ``warmup`` steps and then anneals peak -> final.
    """

    kind: str
    start: float
    final: float
    peak: float | None = None
    warmup: int = 0
    total: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.total < 1:
            raise ConfigError("schedule total must be >= 1")
        if not 0 <= self.warmup <= self.total:
            raise ConfigError("warmup steps must lie in [0, total]")

    @classmethod
    def constant(cls, value: float, total: int = 1) -> "Schedule":
        return cls("constant", value, value, total=total)

    @classmethod
    def cosine(cls, start: float, final: float, total: int) -> "Schedule":
        return cls("cosine", start, final, total=total)

    @classmethod
    def warmup_cosine(cls, start: float, peak: float, final: float, warmup: int, total: int) -> "Schedule":
        return cls("warmup_cosine", start, final, peak=peak, warmup=warmup, total=total)

    def bounds(self) -> tuple[float, float]:
        vals = [self.start, self.final] + ([self.peak] if self.peak is not None else [])
        return min(vals), max(vals)

    def __call__(self, t: int) -> float:
        return schedule_value(self, t)


def schedule_value(s: Schedule, t: int) -> float:
    if s.kind == "constant":
        return s.start
    t = max(0, min(int(t), s.total))
    if s.kind == "cosine":
        peak, warmup = s.start, 0
    else:
        peak, warmup = (s.peak if s.peak is not None else s.start), s.warmup
        if t < warmup:
            return s.start + (peak - s.start) * t / warmup
    span = s.total - warmup
    if span == 0:
        return s.final
    frac = (t - warmup) / span
    return s.final + 0.5 * (peak - s.final) * (1.0 + math.cos(math.pi * frac))
