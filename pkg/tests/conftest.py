import numpy as np
import pytest

import stocheuler as se


@pytest.fixture(scope="session")
def exp_field():
    """Scalar field F(t, x) = x."""
    return se.VectorField(
        dimension=1,
        eval=lambda t, x: x,
        jacobian=lambda t, x: np.eye(1),
        jacobian_many=lambda ts, xs: np.ones((len(ts), 1, 1)),
        k1=0.0,
        k2=1.0,
        name="exp",
    )


@pytest.fixture(scope="session")
def zero_field():
    return se.VectorField(
        dimension=1,
        eval=lambda t, x: np.zeros(1),
        jacobian=lambda t, x: np.zeros((1, 1)),
        k1=0.0,
        k2=0.0,
        name="zero",
    )


@pytest.fixture(scope="session")
def exp_reference(exp_field):
    return se.solve_reference(exp_field, np.array([1.0]), 1.0, 1e-10)


@pytest.fixture(scope="session")
def zero_reference(zero_field):
    return se.solve_reference(zero_field, np.array([1.0]), 1.0, 1e-10)
