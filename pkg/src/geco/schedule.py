"""Velocity-rescaling decay used in training and step sizes used at inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DecaySchedule:
    """Truncated linear decay: flat at ``scale`` up to ``onset``, then linear to 0 at 1."""

    scale: float = 4.0
    onset: float = 0.1

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"decay scale must be > 0, got {self.scale}")
        if not 0.0 <= self.onset < 1.0:
            raise ConfigError(f"decay onset must lie in [0, 1), got {self.onset}")

    @property
    def slope(self) -> float:
        """``c(g) / (1 - g)`` for every ``g > onset``."""
        return self.scale / (1.0 - self.onset)


def c_of_gamma(gamma, sched: DecaySchedule = DecaySchedule()):
    """Rescaling factor c(gamma). Accepts scalars or arrays."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(~np.isfinite(g)) or np.any(g < 0.0) or np.any(g > 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    out = np.where(g <= sched.onset, sched.scale, sched.scale * (1.0 - g) / (1.0 - sched.onset))
    return float(out) if out.ndim == 0 else out


def rescale_ratio(gamma, sched: DecaySchedule = DecaySchedule()):
    """``c(gamma) / (1 - gamma)`` for gamma in [0, 1); finite everywhere on that range."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0.0) or np.any(g >= 1.0):
        raise ValueError("gamma must lie in [0, 1)")
    out = np.where(g <= sched.onset, sched.scale / (1.0 - g), sched.slope)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StepSizeTable:
    """Piecewise-constant step sizes over 1-based update indices.

    ``ranges`` holds ``(first, last, eta)`` triples; they must start at 1 and be
    contiguous. Indices past the last range reuse its eta.
    """

    ranges: tuple[tuple[int, int, float], ...] = ((1, 1, 0.1), (2, 4, 0.05), (5, 16, 0.02), (17, 30, 0.01))

    def __post_init__(self):
        rs = tuple((int(a), int(b), float(e)) for a, b, e in self.ranges)
        object.__setattr__(self, "ranges", rs)
        if not rs:
            raise ConfigError("step-size table is empty")
        expect = 1
        for first, last, eta in rs:
            if first != expect or last < first:
                raise ConfigError(f"step ranges must be contiguous from 1; bad range ({first}, {last})")
            if not eta > 0:
                raise ConfigError(f"step size must be > 0, got {eta}")
            expect = last + 1

    @classmethod
    def constant(cls, eta: float, length: int = 1) -> "StepSizeTable":
        return cls(((1, length, eta),))

    @property
    def length(self) -> int:
        return self.ranges[-1][1]

    def to_list(self) -> list[list]:
        return [[a, b, e] for a, b, e in self.ranges]


def eta_of_step(k: int, table: StepSizeTable = StepSizeTable()) -> float:
    if k < 1:
        raise ValueError(f"step index is 1-based, got {k}")
    if not table.ranges:
        raise ConfigError("step-size table is empty")
    for first, last, eta in table.ranges:
        if first <= k <= last:
            return eta
    return table.ranges[-1][2]
