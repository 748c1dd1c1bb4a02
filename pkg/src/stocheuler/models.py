"""Built-in test problems with closed-form solutions and CLT quantities.

Every model bundles a vector field satisfying the global regularity
contracts, a matching estimator, and (where available) closed-form
trajectories and limit covariances that serve as independent oracles for
the numerical routes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import DomainError
from .fields import (
    RngStream,
    StochasticEstimator,
    VectorField,
    additive_noise_estimator,
    subsample_estimator,
)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A named experiment model: field, estimator, initial data, oracles."""

    name: str
    dimension: int
    field: VectorField
    estimator: StochasticEstimator
    x0: np.ndarray
    horizon: float
    solution: callable | None = None  # t -> d-vector
    sigma_closed: callable | None = None  # t -> d x d matrix
    params: dict | None = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        if x0.shape != (self.dimension,):
            raise DomainError("x0 shape does not match the model dimension")
        x0 = x0.copy()
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)


def _linear_sigma_quad(A: np.ndarray, V: np.ndarray, t: float, n: int = 2048) -> np.ndarray:
    """Closed-form integrand exp(A(t-s)) V exp(A'(t-s)) integrated by Simpson.

    Matrix exponentials come from scipy's scaling-and-squaring routine, a
    route independent of the propagator module.
    """
    if t == 0.0:
        return np.zeros_like(A)
    s = np.linspace(0.0, t, n + 1)
    mats = np.stack([scipy.linalg.expm(A * (t - si)) for si in s])
    integrand = mats @ V @ np.transpose(mats, (0, 2, 1))
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    out = (t / n / 3.0) * np.tensordot(w, integrand, axes=(0, 0))
    return 0.5 * (out + out.T)


def model_linear(A, noise_cov, x0, T: float) -> ModelSpec:
    """F(t, x) = A x with additive Gaussian noise.

    Solution exp(At) x0; for scalar A the limit covariance is in closed
    form, otherwise it comes from the matrix-exponential quadrature oracle.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d = A.shape[0]
    if A.shape != (d, d):
        raise DomainError("A must be square")
    x0 = np.asarray(x0, dtype=np.float64).reshape(d)
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=np.float64))
    if T <= 0.0:
        raise DomainError("horizon must be positive")
    A.setflags(write=False)

    k2 = float(np.abs(A).sum(axis=0).max())  # induced 1-norm

    field = VectorField(
        dimension=d,
        eval=lambda t, x: A @ x,
        jacobian=lambda t, x: A,
        jacobian_many=lambda ts, xs: np.broadcast_to(A, (len(ts), d, d)),
        k1=0.0,
        k2=k2,
        name=f"linear(d={d})",
    )
    estimator = additive_noise_estimator(field, noise_cov)

    if d == 1:
        a = float(A[0, 0])
        v = float(noise_cov[0, 0])

        def solution(t):
            return x0 * math.exp(a * t)

        def sigma_closed(t):
            if a == 0.0:
                return np.array([[v * t]])
            return np.array([[v * (math.exp(2.0 * a * t) - 1.0) / (2.0 * a)]])

    else:

        def solution(t):
            return scipy.linalg.expm(A * t) @ x0

        def sigma_closed(t):
            return _linear_sigma_quad(A, noise_cov, t)

    return ModelSpec(
        name="linear",
        dimension=d,
        field=field,
        estimator=estimator,
        x0=x0,
        horizon=float(T),
        solution=solution,
        sigma_closed=sigma_closed,
        params={
            "A": A.tolist(),
            "noise_cov": noise_cov.tolist(),
            "x0": x0.tolist(),
            "T": float(T),
        },
    )


def model_logistic(r: float, cap: float, clip: float, noise_v: float, x0: float, T: float) -> ModelSpec:
    """Logistic growth r x (1 - x/cap), smoothly saturated beyond |x| > clip.

    The raw right-hand side is only locally Lipschitz; outside [-clip, clip]
    it continues with an exponentially decaying slope, which restores a
    global Lipschitz constant without touching trajectories that stay
    interior.  The closed-form logistic solution is exact for initial
    values inside the clamp region.
    """
    x0 = float(np.asarray(x0).reshape(-1)[0]) if np.ndim(x0) else float(x0)
    if not (clip > abs(x0)):
        raise DomainError("need clip > |x0|")
    if not (clip > cap):
        raise DomainError("need clip > cap")
    if cap <= 0.0 or x0 <= 0.0:
        raise DomainError("cap and x0 must be positive")
    if noise_v < 0.0:
        raise DomainError("noise variance must be nonnegative")
    if T <= 0.0:
        raise DomainError("horizon must be positive")

    lam = cap  # slope decay scale of the saturation

    def g(x):
        return r * x * (1.0 - x / cap)

    def gp(x):
        return r * (1.0 - 2.0 * x / cap)

    def scalar_f(x):
        if x > clip:
            return g(clip) + gp(clip) * lam * (1.0 - math.exp(-(x - clip) / lam))
        if x < -clip:
            return g(-clip) - gp(-clip) * lam * (1.0 - math.exp(-(-clip - x) / lam))
        return g(x)

    def scalar_fp(x):
        if x > clip:
            return gp(clip) * math.exp(-(x - clip) / lam)
        if x < -clip:
            return gp(-clip) * math.exp(-(-clip - x) / lam)
        return gp(x)

    field = VectorField(
        dimension=1,
        eval=lambda t, x: np.array([scalar_f(float(x[0]))]),
        jacobian=lambda t, x: np.array([[scalar_fp(float(x[0]))]]),
        jacobian_many=lambda ts, xs: _logistic_jacobian_many(xs, r, cap, clip, lam),
        k1=0.0,
        k2=abs(r) * (1.0 + 2.0 * clip / cap),
        name="logistic",
    )
    estimator = additive_noise_estimator(field, np.array([[noise_v]]))

    def solution(t):
        if r == 0.0:
            return np.array([x0])
        return np.array([cap / (1.0 + (cap / x0 - 1.0) * math.exp(-r * t))])

    return ModelSpec(
        name="logistic",
        dimension=1,
        field=field,
        estimator=estimator,
        x0=np.array([x0]),
        horizon=float(T),
        solution=solution,
        sigma_closed=None,
        params={
            "r": r,
            "cap": cap,
            "clip": clip,
            "noise_v": noise_v,
            "x0": x0,
            "T": float(T),
        },
    )


def _logistic_jacobian_many(xs, r, cap, clip, lam):
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    slope = r * (1.0 - 2.0 * np.clip(x, -clip, clip) / cap)
    decay = np.exp(-np.clip(np.abs(x) - clip, 0.0, None) / lam)
    return (slope * decay).reshape(-1, 1, 1)


def _affine_solution(A: np.ndarray, b: np.ndarray, x0: np.ndarray):
    """Exact solution of xdot = A x + b via the augmented matrix exponential."""
    d = len(x0)
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = A
    aug[:d, d] = b

    def solution(t):
        v = np.concatenate([x0, [1.0]])
        return (scipy.linalg.expm(aug * t) @ v)[:d]

    return solution


def model_subsampled_sum(m: int, seed: int, batch: int, x0, T: float) -> ModelSpec:
    """Sum of m random affine components evaluated by subsampling.

    Components f_i(t, x) = A_i x + b_i have seed-determined entries in
    [-1, 1]/m, so the summed field stays well conditioned; the estimator
    draws uniform batch-subsets without replacement.  The noise covariance
    is exact by subset enumeration, and the declared variance bound is its
    largest diagonal entry along the closed-form solution.
    """
    if m < 2:
        raise DomainError("need at least two components")
    if not (1 <= batch <= m):
        raise DomainError(f"batch must be in [1, {m}]")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    d = len(x0)
    if T <= 0.0:
        raise DomainError("horizon must be positive")

    components = []
    As, bs = [], []
    for i in range(m):
        stream = RngStream(seed & ((1 << 64) - 1), i)
        entries = (stream.uniforms(d * d + d) * 2.0 - 1.0) / m
        Ai = entries[: d * d].reshape(d, d)
        bi = entries[d * d :]
        Ai.setflags(write=False)
        bi.setflags(write=False)
        As.append(Ai)
        bs.append(bi)
        components.append(
            VectorField(
                dimension=d,
                eval=(lambda A, b: lambda t, x: A @ x + b)(Ai, bi),
                k1=0.0,
                k2=float(np.abs(Ai).sum(axis=0).max()),
                name=f"component_{i}",
            )
        )

    A_sum = np.sum(As, axis=0)
    b_sum = np.sum(bs, axis=0)
    field = VectorField(
        dimension=d,
        eval=lambda t, x: A_sum @ x + b_sum,
        jacobian=lambda t, x: A_sum,
        jacobian_many=lambda ts, xs: np.broadcast_to(A_sum, (len(ts), d, d)),
        k1=0.0,
        k2=float(np.abs(A_sum).sum(axis=0).max()),
        name=f"subsampled_sum(m={m})",
    )

    solution = _affine_solution(A_sum, b_sum, x0)
    estimator = subsample_estimator(components, batch, field_k2=field.k2)

    if estimator.analytic_gamma is not None:
        k3 = 0.0
        for t in np.linspace(0.0, T, 33):
            gam = estimator.analytic_gamma(t, solution(t))
            k3 = max(k3, float(np.diagonal(gam).max()))
        estimator = subsample_estimator(components, batch, k3=k3, field_k2=field.k2)

    def sigma_closed(t):
        if t == 0.0 or estimator.analytic_gamma is None:
            return np.zeros((d, d))
        n = 512
        s = np.linspace(0.0, t, n + 1)
        mats = np.stack([scipy.linalg.expm(A_sum * (t - si)) for si in s])
        gams = np.stack([estimator.analytic_gamma(si, solution(si)) for si in s])
        integrand = mats @ gams @ np.transpose(mats, (0, 2, 1))
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        out = (t / n / 3.0) * np.tensordot(w, integrand, axes=(0, 0))
        return 0.5 * (out + out.T)

    return ModelSpec(
        name="subsampled_sum",
        dimension=d,
        field=field,
        estimator=estimator,
        x0=x0,
        horizon=float(T),
        solution=solution,
        sigma_closed=sigma_closed if estimator.analytic_gamma is not None else None,
        params={
            "m": m,
            "seed": seed,
            "batch": batch,
            "x0": x0.tolist(),
            "T": float(T),
        },
    )


def from_config(block: dict) -> ModelSpec:
    """Build a model from a CLI config model block.

    Setting "jacobian": false drops the field Jacobian, which turns the
    propagator-based experiments into capability errors.
    """
    if "name" not in block:
        raise DomainError("model block needs a 'name'")
    name = block["name"]
    args = {k: v for k, v in block.items() if k not in ("name", "jacobian")}
    try:
        if name == "linear":
            spec = model_linear(args["A"], args["noise_cov"], args["x0"], args["T"])
        elif name == "logistic":
            spec = model_logistic(
                args["r"], args["cap"], args["clip"], args["noise_v"], args["x0"], args["T"]
            )
        elif name == "subsampled_sum":
            spec = model_subsampled_sum(
                args["m"], args["seed"], args["batch"], args["x0"], args["T"]
            )
        else:
            raise DomainError(f"unknown model {name!r}")
    except KeyError as err:
        raise DomainError(f"model block missing parameter {err.args[0]!r}") from err

    if block.get("jacobian") is False:
        field = replace(spec.field, jacobian=None, jacobian_many=None)
        spec = replace(spec, field=field)
    return spec
