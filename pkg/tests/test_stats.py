import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stocheuler as se
from stocheuler import (
    DomainError,
    EnsembleResult,
    RngStream,
    additive_noise_estimator,
    as_trace,
    deterministic_euler,
    dyadic_partition,
    fit_rate,
    gronwall_bound,
    ks_distance,
    normal_cdf,
    normality_report,
    rms_sup_error,
    run_ensemble,
    solve_reference,
    sup_error,
)


def make_ensemble(z, sup=None, config_hash="ab" * 16):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    sup = np.zeros(len(z)) if sup is None else np.asarray(sup, dtype=float)
    return EnsembleResult(
        config_hash=config_hash,
        sup_errors=sup,
        z_values=z,
        master_seed=0,
        mesh=0.01,
        eval_time=1.0,
    )


# ---------------------------------------------------------------------------
# normal cdf and KS
# ---------------------------------------------------------------------------


def test_normal_cdf_accuracy():
    # oracle: the exact CDF via the library complementary error function
    zs = np.linspace(-8.0, 8.0, 4001)
    exact = np.array([0.5 * math.erfc(-z / math.sqrt(2.0)) for z in zs])
    assert np.abs(normal_cdf(zs) - exact).max() < 1e-7


def test_normal_cdf_basics():
    assert normal_cdf(0.0) == pytest.approx(0.5, abs=1e-7)
    z = np.array([-1.0, 1.0])
    c = normal_cdf(z)
    assert c[0] + c[1] == pytest.approx(1.0, abs=2e-7)


def test_ks_distance_gaussian_oracle():
    rng = np.random.default_rng(3)
    d = ks_distance(rng.standard_normal(5000))
    assert d < 0.03


def test_ks_distance_shifted_detects():
    rng = np.random.default_rng(3)
    d = ks_distance(rng.standard_normal(5000) + 1.0)
    assert d > 0.3


# ---------------------------------------------------------------------------
# rms / fit_rate
# ---------------------------------------------------------------------------


def test_rms_examples():
    assert rms_sup_error(make_ensemble([0.0, 0.0], sup=[3.0, 3.0])) == 3.0
    assert rms_sup_error(make_ensemble([0.0, 0.0], sup=[0.0, 2.0])) == pytest.approx(math.sqrt(2.0))


def test_rms_zero_noise_single_rep(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.zeros((1, 1)))
    p = dyadic_partition(1, 1.0)
    ens = run_ensemble(exp_field, e, p, [1.0], 1.0, 1, 7, ref=exp_reference)
    det = deterministic_euler(exp_field, p, [1.0])
    assert rms_sup_error(ens) == sup_error(det, exp_reference)


def test_fit_exact_half_power():
    meshes = [2.0**-k for k in range(2, 8)]
    fit = fit_rate([(m, 3.0 * math.sqrt(m)) for m in meshes])
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.residual < 1e-12
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)


def test_fit_exact_first_order():
    meshes = [2.0**-k for k in range(2, 8)]
    fit = fit_rate([(m, 0.7 * m) for m in meshes])
    assert fit.slope == pytest.approx(1.0, abs=1e-12)


def test_fit_duplicate_meshes_closed_form():
    # points (h, e1), (h, e2), (h/2, e3): slope from the 3-point normal equations
    h, e1, e2, e3 = 0.1, 0.02, 0.03, 0.012
    lx = np.log([h, h, h / 2])
    ly = np.log([e1, e2, e3])
    xbar, ybar = lx.mean(), ly.mean()
    slope = ((lx - xbar) * (ly - ybar)).sum() / ((lx - xbar) ** 2).sum()
    fit = fit_rate([(h, e1), (h, e2), (h / 2, e3)])
    assert fit.slope == pytest.approx(slope, rel=1e-12)
    assert fit.residual > 0.0


def test_fit_validation():
    with pytest.raises(DomainError):
        fit_rate([(0.1, 1.0), (0.2, 2.0)])
    with pytest.raises(DomainError):
        fit_rate([(0.1, 1.0), (0.2, 2.0), (-0.1, 1.0)])
    with pytest.raises(DomainError):
        fit_rate([(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)])


@given(
    slope=st.floats(min_value=0.1, max_value=2.0),
    scale=st.floats(min_value=0.01, max_value=100.0),
)
@settings(max_examples=100, deadline=None)
def test_fit_recovers_planted_exponent(slope, scale):
    meshes = [2.0**-k for k in range(1, 9)]
    fit = fit_rate([(m, scale * m**slope) for m in meshes])
    assert abs(fit.slope - slope) < 1e-10


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def test_ensemble_reproducible(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.array([[0.4]]))
    p = dyadic_partition(5, 1.0)
    a = run_ensemble(exp_field, e, p, [1.0], 1.0, 12, 99, ref=exp_reference)
    b = run_ensemble(exp_field, e, p, [1.0], 1.0, 12, 99, ref=exp_reference)
    assert np.array_equal(a.sup_errors, b.sup_errors)
    assert np.array_equal(a.z_values, b.z_values)
    assert a.config_hash == b.config_hash


def test_ensemble_zero_field_zero_noise(zero_field, zero_reference):
    e = additive_noise_estimator(zero_field, np.zeros((1, 1)))
    p = dyadic_partition(4, 1.0)
    ens = run_ensemble(zero_field, e, p, [1.0], 1.0, 5, 3, ref=zero_reference)
    assert np.array_equal(ens.sup_errors, np.zeros(5))
    assert np.array_equal(ens.z_values, np.zeros((5, 1)))


def test_ensemble_split_concatenation(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.array([[0.4]]))
    p = dyadic_partition(5, 1.0)
    full = run_ensemble(exp_field, e, p, [1.0], 1.0, 10, 5, ref=exp_reference)
    first = run_ensemble(exp_field, e, p, [1.0], 1.0, 5, 5, ref=exp_reference)
    second = run_ensemble(
        exp_field, e, p, [1.0], 1.0, 5, 5, ref=exp_reference, replication_offset=5
    )
    assert np.array_equal(full.sup_errors, np.concatenate([first.sup_errors, second.sup_errors]))
    assert np.array_equal(full.z_values, np.concatenate([first.z_values, second.z_values]))


def test_ensemble_worker_counts_agree(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.array([[0.4]]))
    p = dyadic_partition(5, 1.0)
    runs = [
        run_ensemble(exp_field, e, p, [1.0], 1.0, 16, 42, ref=exp_reference, n_workers=w)
        for w in (1, 2, 8)
    ]
    for other in runs[1:]:
        assert np.array_equal(runs[0].sup_errors, other.sup_errors)
        assert np.array_equal(runs[0].z_values, other.z_values)


def test_ensemble_divergence_names_replication(exp_reference):
    f = se.VectorField(dimension=1, eval=lambda t, x: x * x * 1e200, k2=1.0)
    e = additive_noise_estimator(f, np.zeros((1, 1)))
    p = dyadic_partition(3, 1.0)
    with np.errstate(over="ignore"), pytest.raises(se.DivergenceError) as exc:
        run_ensemble(f, e, p, [2.0], 1.0, 3, 0, ref=exp_reference)
    assert exc.value.replication is not None


def test_ensemble_csv():
    ens = make_ensemble([[0.1], [0.2]], sup=[1.0, 2.0])
    lines = ens.to_csv().strip().split("\n")
    assert lines[0] == "replication,sup_error,z_1"
    assert lines[1].startswith("0,1,")


# ---------------------------------------------------------------------------
# as_trace
# ---------------------------------------------------------------------------


def test_trace_zero_noise_strictly_decreasing(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.zeros((1, 1)))
    trace = as_trace(exp_field, e, [1.0], 1.0, range(2, 9), 0, ref=exp_reference)
    errs = [err for _, err in trace]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # zero-noise trace equals the deterministic Euler error per level
    for level, err in trace:
        det = deterministic_euler(exp_field, dyadic_partition(level, 1.0), [1.0])
        assert err == sup_error(det, exp_reference)


def test_trace_zero_field_all_zero(zero_field, zero_reference):
    e = additive_noise_estimator(zero_field, np.zeros((1, 1)))
    trace = as_trace(zero_field, e, [1.0], 1.0, [2, 4, 6], 0, ref=zero_reference)
    assert [err for _, err in trace] == [0.0, 0.0, 0.0]


def test_trace_levels_validation(exp_field, exp_reference):
    e = additive_noise_estimator(exp_field, np.zeros((1, 1)))
    with pytest.raises(DomainError):
        as_trace(exp_field, e, [1.0], 1.0, [4, 4, 5], 0, ref=exp_reference)


# ---------------------------------------------------------------------------
# normality reports
# ---------------------------------------------------------------------------


def test_normality_gaussian_oracle():
    # direct sampling from N(0, Sigma) must pass all diagnostics at M = 5000
    rng = np.random.default_rng(17)
    Sigma = np.array([[2.0, 0.3], [0.3, 0.5]])
    Z = rng.multivariate_normal([0.0, 0.0], Sigma, size=5000)
    rep = normality_report(make_ensemble(Z), Sigma)
    assert not rep.degenerate
    assert rep.max_ks < 0.03
    assert rep.cf_distance < 0.02
    assert rep.cov_rel_error < 0.1
    assert len(rep.directions) == 2 + 8


def test_normality_degenerate_all_skipped():
    rep = normality_report(make_ensemble(np.zeros((10, 1))), np.zeros((1, 1)))
    assert rep.degenerate
    assert rep.cov_rel_error is None
    assert all(d.skipped for d in rep.directions)
    assert rep.max_ks is None


def test_normality_two_point_variance():
    z = np.tile([-1.0, 1.0], 50)
    rep = normality_report(make_ensemble(z), np.eye(1))
    M = 100
    assert float(rep.empirical_cov[0, 0]) == pytest.approx(M / (M - 1) * 1.0)
    assert rep.mean_norm == 0.0


def test_normality_scaling_covariance():
    rng = np.random.default_rng(8)
    Z = rng.standard_normal((2000, 2))
    c = 3.7
    rep1 = normality_report(make_ensemble(Z), np.eye(2))
    rep2 = normality_report(make_ensemble(c * Z), c**2 * np.eye(2))
    assert np.allclose(rep2.empirical_cov, c**2 * rep1.empirical_cov, rtol=1e-12)
    for d1, d2 in zip(rep1.directions, rep2.directions):
        assert d1.ks == pytest.approx(d2.ks, rel=1e-12)


def test_normality_min_sample_precondition():
    with pytest.raises(DomainError):
        normality_report(make_ensemble(np.zeros((3, 2))), np.eye(2))


def test_normality_directions_reproducible():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((100, 2))
    r1 = normality_report(make_ensemble(Z, config_hash="cd" * 16), np.eye(2))
    r2 = normality_report(make_ensemble(Z, config_hash="cd" * 16), np.eye(2))
    r3 = normality_report(make_ensemble(Z, config_hash="ef" * 16), np.eye(2))
    assert [d.direction for d in r1.directions] == [d.direction for d in r2.directions]
    assert [d.direction for d in r1.directions] != [d.direction for d in r3.directions]


def test_normality_json_roundtrip():
    import json

    rng = np.random.default_rng(2)
    rep = normality_report(make_ensemble(rng.standard_normal((50, 1))), np.eye(1))
    doc = json.loads(json.dumps(rep.to_json_dict()))
    assert doc["sample_count"] == 50
    assert len(doc["directions"]) == 9


# ---------------------------------------------------------------------------
# Gronwall
# ---------------------------------------------------------------------------


def test_gronwall_examples():
    sharp, expb = gronwall_bound([1.0, 1.0, 1.0], [1.0, 1.0], 2)
    assert sharp == 4.0
    assert sharp <= expb
    # g = 0: both bounds collapse to f_n
    sharp, expb = gronwall_bound([2.0, 3.0, 5.0], [0.0, 0.0], 2)
    assert sharp == expb == 5.0
    # n = 0: empty sums
    sharp, expb = gronwall_bound([7.0], [], 0)
    assert sharp == expb == 7.0


def test_gronwall_validation():
    with pytest.raises(DomainError):
        gronwall_bound([1.0, -0.5], [1.0], 1)
    with pytest.raises(DomainError):
        gronwall_bound([1.0], [-1.0], 1)
    with pytest.raises(DomainError):
        gronwall_bound([1.0], [1.0], 2)


@given(
    data=st.lists(
        st.tuples(
            st.floats(min_value=0.0, max_value=2.0),
            st.floats(min_value=0.0, max_value=2.0),
        ),
        min_size=1,
        max_size=20,
    )
)
@settings(max_examples=300, deadline=None)
def test_gronwall_dominates_extremal_recursion(data):
    f = [a for a, _ in data]
    g = [b for _, b in data]
    n = len(data) - 1
    # extremal sequence: recursion with equality
    y = []
    for k in range(n + 1):
        y.append(f[k] + sum(g[j] * y[j] for j in range(k)))
    sharp, expb = gronwall_bound(f, g, n)
    # recursion and product form associate differently; n*eps scale slack
    slack = 64 * np.spacing(max(sharp, 1.0))
    assert y[n] <= sharp + slack
    assert sharp <= expb + 8 * np.spacing(max(expb, 1.0))
    # sharpness: the extremal sequence attains the product bound
    assert abs(y[n] - sharp) <= slack
