import math

import numpy as np
import pytest

import stocheuler as se
from stocheuler import (
    DomainError,
    StepPath,
    VectorField,
    deterministic_euler,
    dyadic_partition,
    solve_reference,
    sup_error,
    uniform_partition,
)
from stocheuler.reference import integral_residual


def test_exponential_endpoint():
    f = se.VectorField(dimension=1, eval=lambda t, x: x, k2=1.0)
    ref = solve_reference(f, [1.0], 1.0, 1e-10)
    assert float(ref.eval(1.0)[0]) == pytest.approx(math.e, abs=1e-10)
    assert ref.tolerance < 1e-11


def test_decay_endpoint():
    f = se.VectorField(dimension=1, eval=lambda t, x: -x, k2=1.0)
    ref = solve_reference(f, [1.0], 1.0, 1e-10)
    assert float(ref.eval(1.0)[0]) == pytest.approx(1.0 / math.e, abs=1e-10)


def test_zero_field_constant_zero_residual(zero_field):
    ref = solve_reference(zero_field, [0.7], 1.0, 1e-10)
    assert np.array_equal(ref.values, np.full_like(ref.values, 0.7))
    n = len(ref.grid.points) - 1
    assert integral_residual(ref, zero_field, n) == 0.0


def test_integral_residual_small(exp_field, exp_reference):
    n = len(exp_reference.grid.points) - 1
    for idx in (n // 2, n):
        assert integral_residual(exp_reference, exp_field, idx) < 1e-10


def test_solution_lipschitz_bound(exp_reference):
    # |x(s) - x(t)| <= C |s-t| with C = sup |F| = e along the solution
    ts = np.linspace(0.0, 1.0, 701)
    vals = exp_reference.eval_many(ts)
    diffs = np.abs(np.diff(vals, axis=0)).sum(axis=1)
    assert diffs.max() <= math.e * (ts[1] - ts[0]) * 1.0001


def test_min_steps_respected(exp_field):
    ref = solve_reference(exp_field, [1.0], 1.0, 1e-8, min_steps=4096)
    assert len(ref.grid.points) - 1 >= 4096


def test_tolerance_validation(exp_field):
    with pytest.raises(DomainError):
        solve_reference(exp_field, [1.0], 1.0, 0.0)
    with pytest.raises(DomainError):
        solve_reference(exp_field, [1.0], -1.0, 1e-8)


def test_accuracy_error_on_budget(exp_field):
    with pytest.raises(se.AccuracyError):
        solve_reference(exp_field, [1.0], 1.0, 1e-16, max_steps=1024)


# ---------------------------------------------------------------------------
# sup_error
# ---------------------------------------------------------------------------


def test_sampled_and_held_solution_bound(exp_field, exp_reference):
    # holding the exact solution on a grid errs at most C * mesh
    p = dyadic_partition(4, 1.0)
    vals = exp_reference.eval_many(p.points)
    path = StepPath(partition=p, values=vals)
    c = math.e  # sup |F| along the solution
    assert sup_error(path, exp_reference) <= c * p.mesh


def test_identical_constant_zero_error(zero_field):
    ref = solve_reference(zero_field, [0.5], 1.0, 1e-10)
    p = uniform_partition(8, 1.0)
    path = StepPath(partition=p, values=np.full((9, 1), 0.5))
    assert sup_error(path, ref) == 0.0


def test_euler_endpoint_lower_bound(exp_field, exp_reference):
    # endpoint error |e - 2.25| is a lower bound for the sup
    path = deterministic_euler(exp_field, dyadic_partition(1, 1.0), [1.0])
    err = sup_error(path, exp_reference)
    assert err >= math.e - 2.25 - 1e-12
    # the sup is attained in the left limit just before t = 1
    assert err == pytest.approx(math.e - 1.5, abs=1e-9)


def test_left_limit_detection(zero_field):
    # a path jumping at T/2 against a constant solution: worst gap is just
    # before the endpoint unless left limits are checked
    ref = solve_reference(zero_field, [0.0], 1.0, 1e-10)
    p = se.Partition.from_points([0.0, 0.5, 1.0])
    path = StepPath(partition=p, values=np.array([[0.0], [2.0], [0.0]]))
    assert sup_error(path, ref) == 2.0


def test_oracle_self_consistency(exp_field):
    # halving the reference mesh moves the measured error by < 10 * tol
    tol = 1e-9
    path = deterministic_euler(exp_field, dyadic_partition(3, 1.0), [1.0])
    coarse = solve_reference(exp_field, [1.0], 1.0, tol, min_steps=2048)
    fine = solve_reference(exp_field, [1.0], 1.0, tol, min_steps=4096)
    assert abs(sup_error(path, coarse) - sup_error(path, fine)) < 10 * tol


def test_horizon_mismatch(exp_field, exp_reference):
    path = deterministic_euler(exp_field, dyadic_partition(2, 2.0), [1.0])
    with pytest.raises(DomainError):
        sup_error(path, exp_reference)


def test_dimension_mismatch(exp_reference):
    p = dyadic_partition(1, 1.0)
    path = StepPath(partition=p, values=np.zeros((3, 2)))
    with pytest.raises(DomainError):
        sup_error(path, exp_reference)


def test_eval_many_grid_points_exact(exp_reference):
    # interpolation must reproduce stored grid values bit-exactly
    got = exp_reference.eval_many(exp_reference.grid.points)
    assert np.array_equal(got, exp_reference.values)


def test_eval_domain(exp_reference):
    with pytest.raises(DomainError):
        exp_reference.eval(-0.5)
    with pytest.raises(DomainError):
        exp_reference.eval(1.5)
