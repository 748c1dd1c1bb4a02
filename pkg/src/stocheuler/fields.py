"""Deterministic vector fields, randomized unbiased estimators, and RNG streams.

A `VectorField` is the right-hand side F(t, x) of the ODE together with its
declared regularity constants.  A `StochasticEstimator` is a randomized
evaluator whose mean equals F pointwise; it drives the randomized Euler
scheme.  Randomness is injected through explicit `RngStream` arguments,
never hidden global state, so every experiment is reproducible and
replications can use provably independent streams.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_TWO_POW_NEG53 = 2.0 ** -53
_TWO_PI = 2.0 * math.pi

# Below this many values the pure-Python draw path is faster than the
# vectorized one; both produce identical bits (covered by a regression test).
_VECTOR_THRESHOLD = 32


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Counter-based random stream keyed by (master_seed, stream_index).

    Value number c of the stream is a SplitMix64-style hash of the key and
    c, so distinct (master_seed, stream_index) pairs give statistically
    independent streams and a stream never depends on how earlier draws
    were batched.  Both draw paths (scalar and vectorized) produce
    identical bits.
    """

    __slots__ = ("master_seed", "stream_index", "_key", "_counter")

    def __init__(self, master_seed: int, stream_index: int = 0):
        if not (0 <= master_seed < (1 << 64)):
            raise DomainError("master_seed must fit in 64 bits")
        if not (0 <= stream_index < (1 << 64)):
            raise DomainError("stream_index must fit in 64 bits")
        self.master_seed = master_seed
        self.stream_index = stream_index
        self._key = _mix64(_mix64((master_seed + _GAMMA) & _MASK64) ^ stream_index)
        self._counter = 0

    @property
    def counter(self) -> int:
        """Number of 64-bit values consumed so far."""
        return self._counter

    def substream(self, i: int) -> "RngStream":
        """Derived stream with index `self.stream_index * 2^32 + i`.

        Used for per-step noise: distinct steps get distinct indices, hence
        independent streams, without pre-generating any noise.
        """
        if not (0 <= i < (1 << 32)):
            raise DomainError("substream offset must fit in 32 bits")
        if self.stream_index >= (1 << 32):
            raise DomainError("stream_index too large to derive substreams")
        return RngStream(self.master_seed, (self.stream_index << 32) + i)

    def _raw(self, n: int) -> np.ndarray:
        """n hashed 64-bit words, advancing the counter."""
        c0 = self._counter
        self._counter = c0 + n
        state = (np.uint64(self._key) + (np.arange(c0 + 1, c0 + n + 1, dtype=np.uint64)) * np.uint64(_GAMMA))
        return _mix64_np(state)

    def uniforms(self, n: int) -> np.ndarray:
        """n independent floats in [0, 1)."""
        if n < _VECTOR_THRESHOLD:
            key = self._key
            c0 = self._counter
            self._counter = c0 + n
            out = np.empty(n, dtype=np.float64)
            for j in range(n):
                h = _mix64((key + (c0 + j + 1) * _GAMMA) & _MASK64)
                out[j] = (h >> 11) * _TWO_POW_NEG53
            return out
        return (self._raw(n) >> np.uint64(11)) * _TWO_POW_NEG53

    def standard_normals(self, n: int) -> np.ndarray:
        """n independent standard normal draws.

        Each normal consumes exactly two counter values (Box-Muller cosine
        branch), keeping the counter layout batch-size independent.
        np.log/np.cos are used in both paths; their scalar and vectorized
        evaluations are bitwise consistent.
        """
        if n < _VECTOR_THRESHOLD:
            key = self._key
            c0 = self._counter
            self._counter = c0 + 2 * n
            out = np.empty(n, dtype=np.float64)
            for j in range(n):
                h0 = _mix64((key + (c0 + 2 * j + 1) * _GAMMA) & _MASK64)
                h1 = _mix64((key + (c0 + 2 * j + 2) * _GAMMA) & _MASK64)
                u0 = ((h0 >> 11) + 1) * _TWO_POW_NEG53
                u1 = (h1 >> 11) * _TWO_POW_NEG53
                out[j] = math.sqrt(-2.0 * float(np.log(u0))) * float(np.cos(_TWO_PI * u1))
            return out
        h = self._raw(2 * n)
        u0 = ((h[0::2] >> np.uint64(11)) + np.uint64(1)) * _TWO_POW_NEG53
        u1 = (h[1::2] >> np.uint64(11)) * _TWO_POW_NEG53
        return np.sqrt(-2.0 * np.log(u0)) * np.cos(_TWO_PI * u1)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Right-hand side F(t, x) with declared regularity constants.

    k1 bounds the time variation, ||F(s,x)-F(t,x)||_1 <= k1 (1+||x||_1) |s-t|,
    and k2 is the global space Lipschitz constant in the 1-norm.  The
    constants are user-declared and spot-checked by probe tests, not
    verified symbolically.
    """

    dimension: int
    eval: callable
    k2: float
    k1: float = 0.0
    jacobian: callable | None = None
    jacobian_many: callable | None = None  # optional (ts, xs) -> (n, d, d) fast path
    name: str = "field"

    def __post_init__(self):
        if self.dimension < 1:
            raise DomainError("dimension must be positive")
        if self.k1 < 0 or self.k2 < 0:
            raise DomainError("growth constants must be nonnegative")

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.eval(t, x)


@dataclass(frozen=True, eq=False)
class StochasticEstimator:
    """Randomized unbiased evaluator of a vector field.

    `sample(t, x, stream)` returns one draw; `sample_batch(t, x, n, stream)`
    returns n draws consuming the same stream values as n scalar calls.
    k3 is the declared componentwise variance bound along the solution
    (None if the builder could not supply one), k2 the per-realization
    space Lipschitz constant of the sampler.
    """

    dimension: int
    sample: callable
    k2: float
    k3: float | None = None
    analytic_gamma: callable | None = None
    sample_batch: callable | None = None
    name: str = "estimator"
    k2_exceeds_field: bool = False


def _psd_factor(cov: np.ndarray) -> np.ndarray | None:
    """Symmetric square root of an SPD matrix, or None for the zero matrix."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError("covariance must be a square matrix")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(cov).max()))):
        raise DomainError("covariance must be symmetric")
    if not cov.any():
        return None
    w, u = np.linalg.eigh(cov)
    scale = float(w.max())
    if w.min() < -1e-12 * max(scale, 1.0):
        raise DomainError("covariance must be positive semidefinite")
    return u * np.sqrt(np.clip(w, 0.0, None))


def additive_noise_estimator(f: VectorField, noise_cov) -> StochasticEstimator:
    """F(t,x) plus state-independent zero-mean Gaussian noise.

    Zero covariance degenerates to the field itself, bit-for-bit: no
    stream values are consumed in that case.
    """
    noise_cov = np.array(noise_cov, dtype=np.float64)
    if noise_cov.shape != (f.dimension, f.dimension):
        raise DomainError(
            f"noise covariance must be {f.dimension}x{f.dimension}, got {noise_cov.shape}"
        )
    factor = _psd_factor(noise_cov)
    noise_cov.setflags(write=False)
    d = f.dimension
    feval = f.eval

    if factor is None:

        def sample(t, x, stream):
            return feval(t, x)

        def sample_batch(t, x, n, stream):
            return np.broadcast_to(feval(t, x), (n, d)).copy()

        k3 = 0.0
    else:
        factor_t = factor.T.copy()

        def sample(t, x, stream):
            return feval(t, x) + factor @ stream.standard_normals(d)

        def sample_batch(t, x, n, stream):
            z = stream.standard_normals(n * d).reshape(n, d)
            return feval(t, x) + z @ factor_t

        k3 = float(noise_cov.diagonal().max())

    return StochasticEstimator(
        dimension=d,
        sample=sample,
        sample_batch=sample_batch,
        k2=f.k2,
        k3=k3,
        analytic_gamma=lambda t, x: noise_cov,
        name=f"additive_noise({f.name})",
    )


def _enumerated_gamma(components, batch: int, scale: float):
    """Exact noise covariance by enumerating all batch-subsets."""
    m = len(components)
    subsets = list(itertools.combinations(range(m), batch))

    def gamma(t, x):
        vals = np.stack([c.eval(t, x) for c in components])
        total = vals.sum(axis=0)
        acc = np.zeros((vals.shape[1], vals.shape[1]))
        for s in subsets:
            v = scale * vals[list(s)].sum(axis=0) - total
            acc += np.outer(v, v)
        return acc / len(subsets)

    return gamma


def subsample_estimator(
    components: list[VectorField],
    batch: int,
    *,
    k3: float | None = None,
    field_k2: float | None = None,
) -> StochasticEstimator:
    """Uniform without-replacement subsampling of a finite sum of fields.

    Each draw picks a uniform subset of `batch` components and returns
    (m/batch) times their partial sum, which is exactly unbiased for the
    full sum.  The subset is the batch smallest of m stream uniforms
    (stable tie-break), so scalar and batched draws agree bit-exactly.

    The estimator's own Lipschitz constant is the conservative worst-batch
    value, which can exceed the summed field's constant; `k2_exceeds_field`
    records that, against `field_k2` when given, else against the
    component-sum bound.
    """
    m = len(components)
    if m == 0:
        raise DomainError("component list must be nonempty")
    d = components[0].dimension
    for c in components:
        if c.dimension != d:
            raise DomainError("all components must share one dimension")
    if not (1 <= batch <= m):
        raise DomainError(f"batch must be in [1, {m}], got {batch}")

    scale = m / batch
    evals = [c.eval for c in components]

    if batch == m:
        # Full batch: deterministic, no stream values consumed, fixed
        # summation order so the result equals the sum field exactly.
        def sample(t, x, stream):
            acc = evals[0](t, x)
            for ev in evals[1:]:
                acc = acc + ev(t, x)
            return acc

        def sample_batch(t, x, n, stream):
            return np.broadcast_to(sample(t, x, None), (n, d)).copy()

        gamma = lambda t, x: np.zeros((d, d))
        k3 = 0.0 if k3 is None else k3
    else:

        def sample(t, x, stream):
            u = stream.uniforms(m)
            order = sorted(range(m), key=u.__getitem__)
            acc = evals[order[0]](t, x)
            for i in order[1:batch]:
                acc = acc + evals[i](t, x)
            return scale * acc

        def sample_batch(t, x, n, stream):
            vals = np.stack([ev(t, x) for ev in evals])
            u = stream.uniforms(n * m).reshape(n, m)
            order = np.argsort(u, axis=1, kind="stable")
            acc = vals[order[:, 0]].copy()
            for j in range(1, batch):
                acc += vals[order[:, j]]
            return scale * acc

        n_subsets = math.comb(m, batch)
        gamma = _enumerated_gamma(components, batch, scale) if n_subsets <= 10_000 else None

    comp_k2 = sorted((c.k2 for c in components), reverse=True)
    est_k2 = scale * sum(comp_k2[:batch])
    if field_k2 is None:
        field_k2 = sum(comp_k2)

    return StochasticEstimator(
        dimension=d,
        sample=sample,
        sample_batch=sample_batch,
        k2=est_k2,
        k3=k3,
        analytic_gamma=gamma,
        name=f"subsample(m={m},batch={batch})",
        k2_exceeds_field=est_k2 > field_k2,
    )


def estimate_bias(
    e: StochasticEstimator,
    f: VectorField,
    t: float,
    x: np.ndarray,
    draws: int,
    stream: RngStream,
) -> np.ndarray:
    """Empirical mean of `draws` samples minus F(t, x)."""
    if draws < 1:
        raise DomainError("draws must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    if e.sample_batch is not None:
        mean = e.sample_batch(t, x, draws, stream).mean(axis=0)
    else:
        acc = np.zeros(e.dimension)
        for _ in range(draws):
            acc += e.sample(t, x, stream)
        mean = acc / draws
    return mean - f.eval(t, x)


# ---------------------------------------------------------------------------
# Contract probes.  The regularity constants are declared, not derived, so
# these sample the contracts at random points and report the worst case.
# ---------------------------------------------------------------------------


def _probe_points(stream: RngStream, n: int, dim: int, t_max: float, x_scale: float):
    ts = stream.uniforms(n) * t_max
    xs = (stream.uniforms(n * dim).reshape(n, dim) * 2.0 - 1.0) * x_scale
    return ts, xs


def probe_time_growth(f: VectorField, stream: RngStream, n: int = 100, *, t_max: float = 1.0, x_scale: float = 2.0) -> float:
    """Worst observed ||F(s,x)-F(t,x)||_1 / ((1+||x||_1)|s-t|) over n probe pairs."""
    ts, xs = _probe_points(stream, n, f.dimension, t_max, x_scale)
    ss = stream.uniforms(n) * t_max
    worst = 0.0
    for t, s, x in zip(ts, ss, xs):
        if s == t:
            continue
        num = float(np.abs(f.eval(s, x) - f.eval(t, x)).sum())
        worst = max(worst, num / ((1.0 + float(np.abs(x).sum())) * abs(s - t)))
    return worst


def probe_space_lipschitz(f: VectorField, stream: RngStream, n: int = 100, *, t_max: float = 1.0, x_scale: float = 2.0) -> float:
    """Worst observed ||F(t,x)-F(t,y)||_1 / ||x-y||_1 over n probe pairs."""
    ts, xs = _probe_points(stream, n, f.dimension, t_max, x_scale)
    ys = (stream.uniforms(n * f.dimension).reshape(n, f.dimension) * 2.0 - 1.0) * x_scale
    worst = 0.0
    for t, x, y in zip(ts, xs, ys):
        dxy = float(np.abs(x - y).sum())
        if dxy == 0.0:
            continue
        worst = max(worst, float(np.abs(f.eval(t, x) - f.eval(t, y)).sum()) / dxy)
    return worst


def jacobian_fd_error(f: VectorField, t: float, x: np.ndarray, h: float) -> float:
    """Max 1-norm column error of the declared Jacobian vs. forward differences."""
    if f.jacobian is None:
        raise DomainError("field has no jacobian")
    x = np.asarray(x, dtype=np.float64)
    jac = np.asarray(f.jacobian(t, x), dtype=np.float64)
    base = f.eval(t, x)
    worst = 0.0
    for i in range(f.dimension):
        xp = x.copy()
        xp[i] += h
        col = (f.eval(t, xp) - base) / h
        worst = max(worst, float(np.abs(col - jac[:, i]).sum()))
    return worst


def probe_realization_lipschitz(
    e: StochasticEstimator,
    stream: RngStream,
    n: int = 100,
    *,
    t_max: float = 1.0,
    x_scale: float = 2.0,
) -> float:
    """Worst per-realization Lipschitz ratio of the sampler.

    Each probe evaluates the sampler at two states with equal fresh
    streams, so both evaluations see the same realization of the noise.
    """
    ts, xs = _probe_points(stream, n, e.dimension, t_max, x_scale)
    ys = (stream.uniforms(n * e.dimension).reshape(n, e.dimension) * 2.0 - 1.0) * x_scale
    worst = 0.0
    for i, (t, x, y) in enumerate(zip(ts, xs, ys)):
        dxy = float(np.abs(x - y).sum())
        if dxy == 0.0:
            continue
        sx = e.sample(t, x, RngStream(stream.master_seed, 1_000_000 + i))
        sy = e.sample(t, y, RngStream(stream.master_seed, 1_000_000 + i))
        worst = max(worst, float(np.abs(sx - sy).sum()) / dxy)
    return worst
