"""Discrete matrix propagators, their refinement limit, and the CLT covariance.

The discrete propagator over a partition is the ordered product of the
factors I + dt_j * J(t_{j-1}) with J the field Jacobian evaluated along the
reference solution; the newest factor multiplies on the left, which is the
order produced by iterating the linearized error recursion.  Its dyadic
refinement limit P(s, t) is the fundamental solution of the linearized ODE
and transports step noise to the evaluation time; the limit covariance is

    Sigma(t) = integral_0^t P(s, t) Gamma(s) P(s, t)' ds

with Gamma the noise covariance of the estimator along the solution.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import AccuracyError, CapabilityError, DomainError
from .fields import RngStream, StochasticEstimator, VectorField
from .grid import Partition, dyadic_partition
from .reference import ReferenceSolution

DEFAULT_QUAD_POINTS = 257
DEFAULT_LIMIT_MAX_LEVEL = 24


def _ordered_product(factors: np.ndarray) -> np.ndarray:
    """Product F[n-1] @ ... @ F[0] by pairwise tree reduction.

    Adjacent pairing preserves the factor order, so only the floating-point
    association differs from a sequential left-multiply.
    """
    n, d, _ = factors.shape
    if n == 0:
        return np.eye(d)
    while n > 1:
        half = n // 2
        paired = factors[1 : 2 * half : 2] @ factors[0 : 2 * half : 2]
        if n % 2:
            paired = np.concatenate([paired, factors[-1:]])
        factors = paired
        n = factors.shape[0]
    return factors[0]


@dataclass(frozen=True, eq=False)
class PropagatorGrid:
    """Jacobians of a field along the solution on one partition.

    Products over index ranges are computed on demand and memoized, which
    keeps repeated probe-grid evaluations cheap.
    """

    partition: Partition
    jacobians: np.ndarray  # (K, d, d), entry j-1 is J(t_{j-1}, x(t_{j-1}))

    def __post_init__(self):
        jac = np.asarray(self.jacobians, dtype=np.float64)
        if jac.ndim != 3 or jac.shape[0] != self.partition.n_steps:
            raise DomainError("one jacobian per partition step required")
        jac = jac.copy()
        jac.setflags(write=False)
        object.__setattr__(self, "jacobians", jac)
        object.__setattr__(self, "_cache", {})

    @property
    def dimension(self) -> int:
        return self.jacobians.shape[1]

    def _factor_slice(self, lo: int, hi: int) -> np.ndarray:
        """Factors I + dt_j J_{j-1} for steps lo+1 .. hi (0-based slice [lo, hi))."""
        dts = self.partition.increments[lo:hi]
        eye = np.eye(self.dimension)
        return eye[None, :, :] + dts[:, None, None] * self.jacobians[lo:hi]

    def product(self, s: float, t: float) -> np.ndarray:
        """Ordered product over all grid points t_j with s < t_j <= t."""
        if not (0.0 <= s <= t <= self.partition.horizon):
            raise DomainError("need 0 <= s <= t <= T")
        pts = self.partition.points
        # factor j (1-based) is included iff s < t_j <= t
        lo = int(np.searchsorted(pts[1:], s, side="right"))
        hi = int(np.searchsorted(pts[1:], t, side="right"))
        key = (lo, hi)
        cached = self._cache.get(key)
        if cached is None:
            cached = _ordered_product(self._factor_slice(lo, hi))
            self._cache[key] = cached
        return cached


def build_propagator_grid(f: VectorField, ref: ReferenceSolution, p: Partition) -> PropagatorGrid:
    """Evaluate the field Jacobian along the reference solution at the left endpoints."""
    if f.jacobian is None:
        raise CapabilityError(f"field {f.name!r} has no jacobian")
    ts = p.points[:-1]
    xs = ref.eval_many(ts)
    if f.jacobian_many is not None:
        jac = np.asarray(f.jacobian_many(ts, xs), dtype=np.float64)
    else:
        jac = np.stack([np.asarray(f.jacobian(t, x), dtype=np.float64) for t, x in zip(ts, xs)])
    return PropagatorGrid(partition=p, jacobians=jac)


def discrete_propagator(
    f: VectorField,
    ref: ReferenceSolution,
    p: Partition,
    s: float,
    t: float,
) -> np.ndarray:
    """Product of (I + dt_j J(t_{j-1}, x(t_{j-1}))) over s < t_j <= t."""
    return build_propagator_grid(f, ref, p).product(s, t)


def propagator_ode(
    f: VectorField,
    ref: ReferenceSolution,
    s: float,
    t: float,
    *,
    steps: int | None = None,
) -> np.ndarray:
    """Fundamental solution of dP/du = J(u, x(u)) P, P(s, s) = I, by RK4.

    Independent of the product construction; serves as the cross-check
    route for the refinement limit.
    """
    if f.jacobian is None:
        raise CapabilityError(f"field {f.name!r} has no jacobian")
    if not (0.0 <= s <= t <= ref.horizon):
        raise DomainError("need 0 <= s <= t <= T")
    d = f.dimension
    if t == s:
        return np.eye(d)
    if steps is None:
        steps = max(64, int(np.ceil((t - s) * 2048)))
    h = (t - s) / steps

    def chi(u):
        return np.asarray(f.jacobian(u, ref.eval(u)), dtype=np.float64)

    P = np.eye(d)
    for i in range(steps):
        u = s + i * h
        k1 = chi(u) @ P
        k2 = chi(u + 0.5 * h) @ (P + 0.5 * h * k1)
        k3 = chi(u + 0.5 * h) @ (P + 0.5 * h * k2)
        k4 = chi(u + h) @ (P + h * k3)
        P = P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return P


def _dyadic_product(
    f: VectorField,
    ref: ReferenceSolution,
    level: int,
    s: float,
    t: float,
    *,
    chunk_size: int = 1 << 18,
) -> np.ndarray:
    """Product over the level-N dyadic grid, streamed in chunks.

    Matches discrete_propagator on the same grid but never materializes
    more than chunk_size factors, so high refinement levels stay within
    memory.
    """
    steps = 1 << level
    T = ref.horizon
    d = f.dimension

    def count_leq(v: float) -> int:
        """Number of j in [1, steps] with (j/steps)*T <= v, matching the
        per-point rounding of the explicit grid."""
        j = min(max(int(np.floor(v / T * steps)) - 2, 0), steps)
        while j < steps and ((j + 1) / steps) * T <= v:
            j += 1
        while j > 0 and (j / steps) * T > v:
            j -= 1
        return j

    # factor j (1-based) included iff s < t_j <= t, with t_j = (j/steps) T
    lo = count_leq(s)
    hi = count_leq(t)
    if hi <= lo:
        return np.eye(d)

    P = np.eye(d)
    for a in range(lo, hi, chunk_size):
        b = min(a + chunk_size, hi)
        pts = (np.arange(a, b + 1, dtype=np.float64) / steps) * T
        dts = np.diff(pts)
        ts_left = pts[:-1]
        xs = ref.eval_many(ts_left)
        if f.jacobian_many is not None:
            jac = np.asarray(f.jacobian_many(ts_left, xs), dtype=np.float64)
        else:
            jac = np.stack(
                [np.asarray(f.jacobian(ti, xi), dtype=np.float64) for ti, xi in zip(ts_left, xs)]
            )
        factors = np.eye(d)[None, :, :] + dts[:, None, None] * jac
        P = _ordered_product(factors) @ P
    return P


def limit_propagator(
    f: VectorField,
    ref: ReferenceSolution,
    s: float,
    t: float,
    tol: float,
    *,
    start_level: int = 4,
    max_level: int = DEFAULT_LIMIT_MAX_LEVEL,
    cross_check: bool = True,
) -> np.ndarray:
    """Dyadic refinement limit of the discrete propagator products.

    Refines until two successive levels differ by less than tol in the
    spectral norm, then cross-checks the accepted product against the
    matrix-ODE route within 10*tol.  Convergence is first order in the
    mesh, so the accepted product sits within about 2*tol of the limit.
    """
    if f.jacobian is None:
        raise CapabilityError(f"field {f.name!r} has no jacobian")
    if tol <= 0.0:
        raise DomainError("tol must be positive")
    if not (0.0 <= s <= t <= ref.horizon):
        raise DomainError("need 0 <= s <= t <= T")
    if t == s:
        return np.eye(f.dimension)

    prev = None
    accepted = None
    for level in range(start_level, max_level + 1):
        cur = _dyadic_product(f, ref, level, s, t)
        if prev is not None and float(np.linalg.norm(cur - prev, 2)) < tol:
            accepted = cur
            break
        prev = cur
    if accepted is None:
        raise AccuracyError(
            f"propagator refinement did not reach tol={tol:g} by level {max_level}"
        )
    if cross_check:
        ode = propagator_ode(f, ref, s, t)
        gap = float(np.linalg.norm(accepted - ode, 2))
        if gap > 10.0 * tol:
            raise AccuracyError(
                f"refined propagator disagrees with the ODE route by {gap:g} (> 10*tol)"
            )
    return accepted


def gamma(
    e: StochasticEstimator,
    f: VectorField,
    ref: ReferenceSolution,
    s: float,
    draws: int = 0,
    stream: RngStream | None = None,
) -> np.ndarray:
    """Noise covariance E[(Fhat - F)(Fhat - F)'] at time s along the solution.

    Uses the estimator's analytic covariance when available, otherwise a
    Monte Carlo average of symmetrized outer products about the true mean.
    """
    x = ref.eval(s)
    if e.analytic_gamma is not None:
        g = np.asarray(e.analytic_gamma(s, x), dtype=np.float64)
        return 0.5 * (g + g.T)
    if draws < 2:
        raise DomainError("draws must be >= 2 when no analytic covariance is available")
    if stream is None:
        raise DomainError("a stream is required for Monte Carlo covariance")
    center = f.eval(s, x)
    if e.sample_batch is not None:
        dev = e.sample_batch(s, x, draws, stream) - center
    else:
        dev = np.stack([e.sample(s, x, stream) - center for _ in range(draws)])
    g = dev.T @ dev / draws
    return 0.5 * (g + g.T)


def _propagators_to_endpoint(
    f: VectorField,
    ref: ReferenceSolution,
    nodes: np.ndarray,
    *,
    substeps: int = 4,
) -> np.ndarray:
    """P(s_j, t) for all nodes s_j of a uniform grid ending at t.

    Sweeps Q(s) = P(s, t) backwards from Q(t) = I via RK4 on
    dQ/ds = -Q J(s, x(s)), storing Q at every node.
    """
    d = f.dimension
    n = len(nodes)
    out = np.empty((n, d, d))
    out[-1] = np.eye(d)

    def chi(u):
        return np.asarray(f.jacobian(u, ref.eval(u)), dtype=np.float64)

    Q = np.eye(d)
    for j in range(n - 1, 0, -1):
        h = (nodes[j - 1] - nodes[j]) / substeps  # negative
        u = nodes[j]
        for _ in range(substeps):
            k1 = -(Q @ chi(u))
            k2 = -((Q + 0.5 * h * k1) @ chi(u + 0.5 * h))
            k3 = -((Q + 0.5 * h * k2) @ chi(u + 0.5 * h))
            k4 = -((Q + h * k3) @ chi(u + h))
            Q = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            u += h
        out[j - 1] = Q
    return out


def _sigma_impl(
    f: VectorField,
    e: StochasticEstimator,
    ref: ReferenceSolution,
    t: float,
    quad_points: int,
    gamma_draws: int,
    stream: RngStream | None,
) -> tuple[np.ndarray, float]:
    d = f.dimension
    if t == 0.0:
        return np.zeros((d, d)), 0.0
    if quad_points < 3 or quad_points % 2 == 0:
        raise DomainError("quad_points must be odd and at least 3")

    nodes = np.linspace(0.0, t, quad_points)
    P = _propagators_to_endpoint(f, ref, nodes)
    G = np.empty((quad_points, d, d))
    for j, s in enumerate(nodes):
        node_stream = None if stream is None else RngStream(stream.master_seed, stream.stream_index + j)
        G[j] = gamma(e, f, ref, float(s), draws=gamma_draws, stream=node_stream)
    integrand = P @ G @ np.transpose(P, (0, 2, 1))

    h = nodes[1] - nodes[0]
    w = np.full(quad_points, h)
    w[0] = w[-1] = 0.5 * h
    fine = np.tensordot(w, integrand, axes=(0, 0))

    coarse_idx = np.arange(0, quad_points, 2)
    wc = np.full(len(coarse_idx), 2.0 * h)
    wc[0] = wc[-1] = h
    coarse = np.tensordot(wc, integrand[coarse_idx], axes=(0, 0))

    # trapezoid is second order, so the Richardson error estimate is a third
    # of the coarse/fine gap
    err = float(np.linalg.norm(fine - coarse, 2)) / 3.0
    return 0.5 * (fine + fine.T), err


def sigma(
    f: VectorField,
    e: StochasticEstimator,
    ref: ReferenceSolution,
    t: float,
    quad_points: int = DEFAULT_QUAD_POINTS,
    tol: float = 1e-3,
    *,
    gamma_draws: int = 256,
    stream: RngStream | None = None,
) -> np.ndarray:
    """CLT covariance Sigma(t) by composite trapezoid quadrature.

    The integrand P(s, t) Gamma(s) P(s, t)' is evaluated on quad_points
    uniform nodes; a Richardson halving estimates the quadrature error and
    anything above tol raises.  The result is symmetrized.
    """
    if f.jacobian is None:
        raise CapabilityError(f"field {f.name!r} has no jacobian")
    if not (0.0 <= t <= ref.horizon):
        raise DomainError("t outside [0, T]")
    mat, err = _sigma_impl(f, e, ref, t, quad_points, gamma_draws, stream)
    if err > tol:
        raise AccuracyError(f"quadrature error estimate {err:g} exceeds tol {tol:g}")
    return mat


@dataclass(frozen=True, eq=False)
class CovarianceCurve:
    """Sigma(t) sampled on a grid of evaluation times."""

    times: np.ndarray
    matrices: np.ndarray  # (n, d, d)
    quad_errors: np.ndarray

    def to_csv(self) -> str:
        d = self.matrices.shape[1]
        names = ",".join(f"sigma_{i + 1}{j + 1}" for i in range(d) for j in range(d))
        buf = io.StringIO()
        buf.write(f"t,{names},quad_err\n")
        for t, m, q in zip(self.times, self.matrices, self.quad_errors):
            flat = ",".join(f"{v:.17g}" for v in m.reshape(-1))
            buf.write(f"{t:.17g},{flat},{q:.17g}\n")
        return buf.getvalue()


def covariance_curve(
    f: VectorField,
    e: StochasticEstimator,
    ref: ReferenceSolution,
    times,
    quad_points: int = DEFAULT_QUAD_POINTS,
    tol: float = 1e-3,
    *,
    gamma_draws: int = 256,
    stream: RngStream | None = None,
) -> CovarianceCurve:
    """Evaluate sigma on a grid of times, recording quadrature error estimates."""
    times = np.asarray(times, dtype=np.float64)
    mats = np.empty((len(times), f.dimension, f.dimension))
    errs = np.empty(len(times))
    for i, t in enumerate(times):
        mats[i], errs[i] = _sigma_impl(f, e, ref, float(t), quad_points, gamma_draws, stream)
        if errs[i] > tol:
            raise AccuracyError(f"quadrature error {errs[i]:g} at t={t:g} exceeds tol {tol:g}")
    return CovarianceCurve(times=times, matrices=mats, quad_errors=errs)
