"""Partitions of a finite time interval [0, T].

Partitions are stored as explicit point lists so that non-uniform grids
are first-class; increments are always recomputed as differences of the
stored points rather than cached, which avoids accumulation drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ResourceLimitError

DEFAULT_MAX_DYADIC_LEVEL = 30


@dataclass(frozen=True, eq=False)
class Partition:
    """An ordered grid 0 = t_0 < t_1 < ... < t_K = T.

    Immutable after construction; safe to share across concurrent
    replications.
    """

    points: np.ndarray
    horizon: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 2:
            raise DomainError("partition needs at least two points")
        if pts[0] != 0.0:
            raise DomainError("partition must start at 0")
        if pts[-1] != self.horizon:
            raise DomainError("last partition point must equal the horizon exactly")
        if self.horizon <= 0.0:
            raise DomainError("horizon must be positive")
        if np.any(np.diff(pts) <= 0.0):
            raise DomainError("partition points must be strictly increasing")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points) -> "Partition":
        pts = np.asarray(points, dtype=np.float64)
        if pts.size < 2:
            raise DomainError("partition needs at least two points")
        return cls(points=pts, horizon=float(pts[-1]))

    @property
    def n_steps(self) -> int:
        return len(self.points) - 1

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def mesh(self) -> float:
        return float(self.increments.max())


def dyadic_partition(level: int, horizon: float, *, max_level: int = DEFAULT_MAX_DYADIC_LEVEL) -> Partition:
    """The grid {T k / 2^level : k = 0..2^level}.

    Levels above `max_level` are refused to bound memory.  Shared points of
    consecutive levels coincide bit-exactly, so the grids are nested.
    """
    if level < 0 or int(level) != level:
        raise DomainError(f"level must be a nonnegative integer, got {level}")
    if level > max_level:
        raise ResourceLimitError(f"dyadic level {level} exceeds the maximum {max_level}")
    if horizon <= 0.0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    steps = 1 << int(level)
    # k/2^level is exact in binary floating point; one rounding per point from *T.
    points = (np.arange(steps + 1, dtype=np.float64) / steps) * horizon
    return Partition(points=points, horizon=float(horizon))


def uniform_partition(steps: int, horizon: float) -> Partition:
    """Equidistant grid with the given number of steps."""
    if steps < 1 or int(steps) != steps:
        raise DomainError(f"steps must be a positive integer, got {steps}")
    if horizon <= 0.0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    points = (np.arange(int(steps) + 1, dtype=np.float64) / int(steps)) * horizon
    return Partition(points=points, horizon=float(horizon))


def mesh(p: Partition) -> float:
    """Largest increment of the partition."""
    return p.mesh
