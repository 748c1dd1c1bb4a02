"""The randomized Euler recursion and its right-continuous step-path extension.

One path is generated by iterating

    x_0 = x(0),    x_i = x_{i-1} + dt_i * Fhat_i(t_{i-1}, x_{i-1}),

where Fhat_i draws from the estimator with a fresh substream per step, so
the per-step noises are independent.  The grid values extend to a cadlag
piecewise-constant trajectory holding the last computed value.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError
from .fields import RngStream, StochasticEstimator, VectorField
from .grid import Partition


@dataclass(frozen=True, eq=False)
class StepPath:
    """Grid values of one generated trajectory on a partition."""

    partition: Partition
    values: np.ndarray  # (K+1, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DomainError("values must be a (K+1, d) array")
        if vals.shape[0] != len(self.partition.points):
            raise DomainError("one value row per partition point required")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dimension(self) -> int:
        return self.values.shape[1]


def run_scheme(
    f: VectorField,
    e: StochasticEstimator,
    p: Partition,
    x0,
    stream: RngStream,
) -> StepPath:
    """Generate one randomized Euler path.

    Step i consumes the substream with index stream_index * 2^32 + i, so
    steps are independent and the whole path is a pure function of
    (f, e, p, x0, stream identity).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (f.dimension,):
        raise DomainError(f"x0 must have shape ({f.dimension},)")
    if e.dimension != f.dimension:
        raise DomainError("field and estimator dimensions differ")
    if stream.stream_index >= (1 << 32):
        raise DomainError("stream_index too large to derive per-step substreams")

    pts = p.points
    n = len(pts) - 1
    values = np.empty((n + 1, f.dimension))
    values[0] = x0

    seed = stream.master_seed
    base = stream.stream_index << 32
    sample = e.sample
    x = x0
    try:
        for i in range(1, n + 1):
            t_prev = pts[i - 1]
            x = x + (pts[i] - t_prev) * sample(t_prev, x, RngStream(seed, base + i))
            values[i] = x
    except (OverflowError, FloatingPointError) as err:
        raise DivergenceError(
            f"overflow at step {i} (t={pts[i]:.6g}): {err}", step=i
        ) from err
    _check_finite(values, pts)
    return StepPath(partition=p, values=values)


def _check_finite(values: np.ndarray, pts: np.ndarray) -> None:
    """Raise naming the first non-finite step; vectorized to keep the loop lean."""
    finite = np.isfinite(values).all(axis=1)
    if not finite.all():
        i = int(np.argmin(finite))
        raise DivergenceError(
            f"non-finite state at step {i} (t={pts[i]:.6g})", step=i
        )


def deterministic_euler(f: VectorField, p: Partition, x0) -> StepPath:
    """Classical explicit Euler; equals run_scheme with zero-variance noise bit-for-bit."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (f.dimension,):
        raise DomainError(f"x0 must have shape ({f.dimension},)")
    pts = p.points
    n = len(pts) - 1
    values = np.empty((n + 1, f.dimension))
    values[0] = x0
    x = x0
    try:
        for i in range(1, n + 1):
            t_prev = pts[i - 1]
            x = x + (pts[i] - t_prev) * f.eval(t_prev, x)
            values[i] = x
    except (OverflowError, FloatingPointError) as err:
        raise DivergenceError(
            f"overflow at step {i} (t={pts[i]:.6g}): {err}", step=i
        ) from err
    _check_finite(values, pts)
    return StepPath(partition=p, values=values)


def _eval_indices(p: Partition, ts: np.ndarray) -> np.ndarray:
    """Index i with t in [t_i, t_{i+1}) for each query, and K at t = T."""
    idx = np.searchsorted(p.points, ts, side="right") - 1
    return np.clip(idx, 0, len(p.points) - 1)


def path_eval(path: StepPath, t: float) -> np.ndarray:
    """Evaluate the cadlag step path: values[i] for t in [t_i, t_{i+1}), values[K] at T."""
    if t < 0.0 or t > path.partition.horizon:
        raise DomainError(f"t={t} outside [0, {path.partition.horizon}]")
    idx = int(np.searchsorted(path.partition.points, t, side="right")) - 1
    if idx >= len(path.partition.points) - 1:
        idx = len(path.partition.points) - 1
    return path.values[idx]


def path_eval_many(path: StepPath, ts) -> np.ndarray:
    """Vectorized cadlag evaluation at many times."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.size and (ts.min() < 0.0 or ts.max() > path.partition.horizon):
        raise DomainError("query times outside the path horizon")
    return path.values[_eval_indices(path.partition, ts)]


def path_to_csv(path: StepPath) -> str:
    """CSV serialization: header t,x1,...,xd, 17 significant digits."""
    buf = io.StringIO()
    d = path.dimension
    buf.write("t," + ",".join(f"x{i + 1}" for i in range(d)) + "\n")
    for t, row in zip(path.partition.points, path.values):
        buf.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()
