import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from helmpw.linsys import SingularMatrixError, factorize, solve


def test_identity():
    F = factorize(sp.identity(4))
    b = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(solve(F, b), b)


def test_two_by_two():
    F = factorize(sp.csc_matrix([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(F.solve(np.array([3.0, 3.0])), [1.0, 1.0])
    assert F.condition_estimate() == pytest.approx(3.0)


def test_zero_row_reports_index():
    A = sp.csc_matrix(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 4.0]]))
    with pytest.raises(SingularMatrixError) as exc:
        factorize(A)
    assert exc.value.row == 1


def test_numerically_singular():
    with pytest.raises(SingularMatrixError):
        factorize(sp.csc_matrix([[1.0, 1.0], [1.0, 1.0 + 1e-15]]))


def test_shape_errors():
    with pytest.raises(ValueError):
        factorize(sp.csc_matrix(np.ones((2, 3))))
    F = factorize(sp.identity(3))
    with pytest.raises(ValueError):
        solve(F, np.ones(4))


def test_random_diagonally_dominant():
    rng = np.random.default_rng(50)
    A = sp.random(50, 50, density=0.1, random_state=rng).toarray()
    A += np.diag(np.abs(A).sum(axis=1) + 1.0)
    F = factorize(sp.csc_matrix(A))
    for _ in range(10):
        b = rng.normal(size=50)
        x = F.solve(b)
        assert np.abs(A @ x - b).max() <= 1e-10 * np.abs(b).max()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30))
def test_solve_is_deterministic_and_stateless(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) + n * np.eye(n)
    F = factorize(sp.csc_matrix(A))
    bs = rng.normal(size=(3, n))
    first = [F.solve(b) for b in bs]
    again = [F.solve(b) for b in bs[::-1]][::-1]
    for x, y in zip(first, again):
        assert np.array_equal(x, y)


def test_row_scaling_does_not_trigger_singularity():
    A = sp.csr_matrix(np.array([[1e16, 2e16], [1.0, 3.0]]))
    F = factorize(A)
    x = F.solve(np.array([3e16, 4.0]))
    assert np.allclose(x, [1.0, 1.0])
