"""Monte Carlo ensembles and the empirical verification statistics.

Covers the three diagnostics the library exists for: sup-error ensembles
with a log-log rate fit (the mean-square rate), single-realization traces
over summable dyadic meshes (the pathwise decay), and normality reports
comparing the rescaled endpoint error against its predicted Gaussian limit.
Also provides the discrete Gronwall bounds in both the sharp product form
and the exponential relaxation.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError
from .fields import RngStream, StochasticEstimator, VectorField
from .grid import Partition, dyadic_partition
from .reference import (
    REFINEMENT_FACTOR,
    ReferenceSolution,
    SupErrorPlan,
    solve_reference,
    sup_error,
)
from .scheme import path_eval, run_scheme


def resolve_workers(requested: int | None = None) -> int:
    """Worker count for replication fan-out.

    The environment variable STOCHEULER_THREADS caps the count; a value of
    0 means auto (one worker per CPU).  Unset and unrequested means serial.
    """
    env = os.environ.get("STOCHEULER_THREADS")
    cap = None
    if env is not None:
        cap = int(env)
        if cap == 0:
            cap = os.cpu_count() or 1
    if requested is None or requested == 0:
        requested = cap if cap is not None else 1
    if cap is not None:
        requested = min(requested, cap)
    return max(1, requested)


# ---------------------------------------------------------------------------
# Normal CDF: Zelen-Severo rational approximation (Abramowitz-Stegun
# 26.2.17), absolute error < 7.5e-8, implemented here so every port of the
# diagnostics produces matching numbers.
# ---------------------------------------------------------------------------

_AS_P = 0.2316419
_AS_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z):
    """Standard normal CDF, |error| < 1e-7, vectorized."""
    z = np.asarray(z, dtype=np.float64)
    a = np.abs(z)
    t = 1.0 / (1.0 + _AS_P * a)
    poly = t * (_AS_B[0] + t * (_AS_B[1] + t * (_AS_B[2] + t * (_AS_B[3] + t * _AS_B[4]))))
    upper = _INV_SQRT_2PI * np.exp(-0.5 * a * a) * poly
    out = np.where(z >= 0.0, 1.0 - upper, upper)
    return float(out) if out.ndim == 0 else out


def ks_distance(samples: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance of a sample against the standard normal."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(s)
    cdf = normal_cdf(s)
    grid = np.arange(1, n + 1) / n
    return float(max((grid - cdf).max(), (cdf - (grid - 1.0 / n)).max()))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    """Per-replication sup errors and rescaled endpoint errors."""

    config_hash: str
    sup_errors: np.ndarray  # (M,)
    z_values: np.ndarray  # (M, d), mesh^{-1/2} (path(t*) - x(t*))
    master_seed: int
    mesh: float
    eval_time: float

    @property
    def replications(self) -> int:
        return len(self.sup_errors)

    def to_csv(self) -> str:
        d = self.z_values.shape[1]
        buf = io.StringIO()
        buf.write("replication,sup_error," + ",".join(f"z_{i + 1}" for i in range(d)) + "\n")
        for r, (s, z) in enumerate(zip(self.sup_errors, self.z_values)):
            buf.write(f"{r},{s:.17g}," + ",".join(f"{v:.17g}" for v in z) + "\n")
        return buf.getvalue()


def _ensemble_hash(f, e, p, x0, t_star, M, master_seed, offset) -> str:
    payload = {
        "field": f.name,
        "estimator": e.name,
        "points": hashlib.sha256(np.ascontiguousarray(p.points).tobytes()).hexdigest(),
        "x0": [float(v) for v in np.asarray(x0).ravel()],
        "t_star": float(t_star),
        "replications": int(M),
        "master_seed": int(master_seed),
        "offset": int(offset),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_ensemble(
    f: VectorField,
    e: StochasticEstimator,
    p: Partition,
    x0,
    t_star: float,
    M: int,
    master_seed: int,
    *,
    ref: ReferenceSolution | None = None,
    ref_tol: float = 1e-10,
    n_workers: int | None = None,
    replication_offset: int = 0,
) -> EnsembleResult:
    """M independent paths; replication r uses stream index offset + r.

    Stream indexing is replication-local, so splitting an ensemble into
    ranges and concatenating reproduces the full run bit-exactly, for any
    worker count.
    """
    if M < 1:
        raise DomainError("M must be at least 1")
    if not (0.0 <= t_star <= p.horizon):
        raise DomainError("t_star outside [0, T]")
    x0 = np.asarray(x0, dtype=np.float64)
    if ref is None:
        ref = solve_reference(
            f, x0, p.horizon, ref_tol, min_steps=REFINEMENT_FACTOR * p.n_steps
        )

    mesh = p.mesh
    scale = 1.0 / math.sqrt(mesh)
    x_star = ref.eval(t_star)
    plan = SupErrorPlan(p, ref)

    def one(r: int) -> tuple[float, np.ndarray]:
        index = replication_offset + r
        try:
            path = run_scheme(f, e, p, x0, RngStream(master_seed, index))
        except DivergenceError as err:
            raise DivergenceError(
                f"replication {index} diverged at step {err.step}",
                step=err.step,
                replication=index,
            ) from err
        return plan.evaluate(path.values), scale * (path_eval(path, t_star) - x_star)

    workers = resolve_workers(n_workers)
    if workers > 1 and M > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(M)))
    else:
        results = [one(r) for r in range(M)]

    sups = np.array([r[0] for r in results])
    zs = np.stack([r[1] for r in results])
    return EnsembleResult(
        config_hash=_ensemble_hash(f, e, p, x0, t_star, M, master_seed, replication_offset),
        sup_errors=sups,
        z_values=zs,
        master_seed=master_seed,
        mesh=mesh,
        eval_time=float(t_star),
    )


def rms_sup_error(r: EnsembleResult) -> float:
    """Root mean square of the per-replication sup errors."""
    return float(np.sqrt(np.mean(np.square(r.sup_errors))))


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    meshes: tuple
    rms_errors: tuple
    slope: float
    intercept: float
    residual: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("mesh,rms_error,fit_slope,fit_intercept,residual\n")
        for m, e in zip(self.meshes, self.rms_errors):
            buf.write(
                f"{m:.17g},{e:.17g},{self.slope:.17g},{self.intercept:.17g},{self.residual:.17g}\n"
            )
        return buf.getvalue()


def fit_rate(points) -> RateFit:
    """Ordinary least squares of log(error) on log(mesh)."""
    pts = [(float(m), float(e)) for m, e in points]
    if len(pts) < 3:
        raise DomainError("rate fit needs at least 3 points")
    if any(m <= 0 or e <= 0 for m, e in pts):
        raise DomainError("meshes and errors must be positive")
    lx = np.log([m for m, _ in pts])
    ly = np.log([e for _, e in pts])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean(np.square(ly - (slope * lx + intercept)))))
    return RateFit(
        meshes=tuple(m for m, _ in pts),
        rms_errors=tuple(e for _, e in pts),
        slope=float(slope),
        intercept=float(intercept),
        residual=resid,
    )


# ---------------------------------------------------------------------------
# Pathwise trace over a summable mesh sequence
# ---------------------------------------------------------------------------


def as_trace(
    f: VectorField,
    e: StochasticEstimator,
    x0,
    t_horizon: float,
    levels,
    master_seed: int,
    *,
    ref: ReferenceSolution | None = None,
    ref_tol: float = 1e-10,
) -> list[tuple[int, float]]:
    """One path per dyadic level along a single realization family.

    The dyadic meshes are summable, the regime in which pathwise
    convergence holds; this trace observes a necessary consequence (decay
    of the errors), not the almost-sure statement itself.
    """
    levels = [int(l) for l in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise DomainError("levels must be strictly increasing")
    x0 = np.asarray(x0, dtype=np.float64)
    if ref is None:
        ref = solve_reference(
            f, x0, t_horizon, ref_tol, min_steps=REFINEMENT_FACTOR * (1 << max(levels))
        )
    out = []
    for level in levels:
        p = dyadic_partition(level, t_horizon)
        path = run_scheme(f, e, p, x0, RngStream(master_seed, level))
        out.append((level, sup_error(path, ref)))
    return out


# ---------------------------------------------------------------------------
# Normality diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionDiagnostic:
    direction: tuple
    ks: float | None
    skipped: bool


@dataclass(frozen=True, eq=False)
class NormalityReport:
    """Distribution diagnostics of rescaled endpoint errors vs. N(0, Sigma)."""

    predicted: np.ndarray
    empirical_cov: np.ndarray
    cov_rel_error: float | None
    directions: tuple
    cf_distance: float
    mean_norm: float
    degenerate: bool
    sample_count: int

    @property
    def max_ks(self) -> float | None:
        vals = [d.ks for d in self.directions if not d.skipped]
        return max(vals) if vals else None

    def to_json_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "degenerate": self.degenerate,
            "predicted_sigma": [[float(v) for v in row] for row in self.predicted],
            "empirical_cov": [[float(v) for v in row] for row in self.empirical_cov],
            "cov_rel_error": self.cov_rel_error,
            "mean_norm": self.mean_norm,
            "cf_distance": self.cf_distance,
            "directions": [
                {
                    "direction": [float(v) for v in d.direction],
                    "ks": d.ks,
                    "skipped": d.skipped,
                }
                for d in self.directions
            ],
        }


_CF_MAGNITUDES = (0.5, 1.0, 2.0)
_N_RANDOM_DIRECTIONS = 8


def _test_directions(d: int, config_hash: str) -> list[np.ndarray]:
    dirs = [np.eye(d)[a] for a in range(d)]
    seed = int(config_hash[:16], 16) & ((1 << 64) - 1)
    stream = RngStream(seed, 0xD1A6)
    for _ in range(_N_RANDOM_DIRECTIONS):
        v = stream.standard_normals(d)
        norm = float(np.linalg.norm(v))
        dirs.append(v / norm if norm > 0 else np.eye(d)[0])
    return dirs


def normality_report(r: EnsembleResult, predicted) -> NormalityReport:
    """Compare the ensemble's Z samples against the predicted Gaussian limit.

    Covariance match is measured in the spectral norm; shape is probed by
    KS distances of standardized one-dimensional projections along the
    coordinate axes plus fixed pseudo-random directions seeded from the
    config hash, and by the empirical characteristic function on a fixed
    axis-frequency grid.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    Z = r.z_values
    M, d = Z.shape
    if M < d + 2:
        raise DomainError("need at least d + 2 replications")
    if predicted.shape != (d, d):
        raise DomainError(f"predicted covariance must be {d}x{d}")

    mean = Z.mean(axis=0)
    centered = Z - mean
    emp = centered.T @ centered / (M - 1)

    sig_norm = float(np.linalg.norm(predicted, 2))
    degenerate = sig_norm <= 0.0
    rel = None if degenerate else float(np.linalg.norm(emp - predicted, 2)) / sig_norm

    diagnostics = []
    for u in _test_directions(d, r.config_hash):
        var = float(u @ predicted @ u)
        if var <= 0.0:
            diagnostics.append(DirectionDiagnostic(tuple(u), None, True))
            continue
        std = (Z @ u) / math.sqrt(var)
        diagnostics.append(DirectionDiagnostic(tuple(u), ks_distance(std), False))

    cf = 0.0
    for a in range(d):
        for mag in _CF_MAGNITUDES:
            for sign in (1.0, -1.0):
                alpha = np.zeros(d)
                alpha[a] = sign * mag
                phi_hat = complex(np.mean(np.exp(1j * (Z @ alpha))))
                phi = math.exp(-0.5 * float(alpha @ predicted @ alpha))
                cf = max(cf, abs(phi_hat - phi))

    return NormalityReport(
        predicted=predicted,
        empirical_cov=emp,
        cov_rel_error=rel,
        directions=tuple(diagnostics),
        cf_distance=cf,
        mean_norm=float(np.linalg.norm(Z.mean(axis=0))),
        degenerate=degenerate,
        sample_count=M,
    )


# ---------------------------------------------------------------------------
# Discrete Gronwall bounds
# ---------------------------------------------------------------------------


def gronwall_bound(f_seq, g_seq, n: int) -> tuple[float, float]:
    """Bounds for y_n <= f_n + sum_{k<n} g_k y_k.

    Returns the sharp product-form bound

        f_n + sum_{k<n} f_k g_k prod_{j=k+1}^{n-1} (1 + g_j)

    and its exponential relaxation with exp(sum g_j) in place of the
    product.  The product form is attained by the extremal recursion with
    equality throughout.
    """
    f_seq = [float(v) for v in f_seq]
    g_seq = [float(v) for v in g_seq]
    if n < 0:
        raise DomainError("n must be nonnegative")
    if len(f_seq) < n + 1 or (n > 0 and len(g_seq) < n):
        raise DomainError("sequences too short for the requested index")
    if any(v < 0 for v in f_seq) or any(v < 0 for v in g_seq):
        raise DomainError("sequences must be nonnegative")

    # suffix products prod_{j=k+1}^{n-1} (1+g_j) and suffix sums of g
    prod = 1.0
    gsum = 0.0
    sharp = f_seq[n]
    expb = f_seq[n]
    for k in range(n - 1, -1, -1):
        sharp += f_seq[k] * g_seq[k] * prod
        expb += f_seq[k] * g_seq[k] * math.exp(gsum)
        prod *= 1.0 + g_seq[k]
        gsum += g_seq[k]
    return sharp, expb
