import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topograd.sparse_linalg import (ConvergenceError, DimensionError, SolveOptions, SparseMatrix,
                                    TripletAccumulator, cg_solve, read_matrix_market, spmv,
                                    write_matrix_market)

A2 = SparseMatrix.from_dense([[4.0, 1.0], [1.0, 3.0]])


@pytest.mark.parametrize("A, x, expected", [
    (np.eye(2), (3.0, -1.0), (3.0, -1.0)),
    ([[4.0, 1.0], [1.0, 3.0]], (1.0, 0.0), (4.0, 1.0)),
    ([[4.0, 1.0], [1.0, 3.0]], (1.0, 2.0), (6.0, 7.0)),
])
def test_spmv_examples(A, x, expected):
    assert np.array_equal(spmv(SparseMatrix.from_dense(A), np.array(x)), expected)


def test_spmv_dimension_mismatch():
    with pytest.raises(DimensionError):
        spmv(A2, np.ones(3))


def test_cg_identity_one_iteration():
    b = np.array([0.3, -2.0, 7.5])
    res = cg_solve(SparseMatrix.from_dense(np.eye(3)), b)
    assert np.allclose(res.x, b, rtol=0, atol=1e-14)
    assert res.iterations == 1


def test_cg_two_by_two():
    x, it, res = cg_solve(A2, np.array([1.0, 2.0]))
    assert np.allclose(x, [1 / 11, 7 / 11], rtol=0, atol=1e-10)
    assert it <= 2


def test_cg_zero_rhs():
    res = cg_solve(A2, np.zeros(2))
    assert np.array_equal(res.x, np.zeros(2))
    assert res.residual == 0.0


def test_cg_dimension_mismatch():
    with pytest.raises(DimensionError):
        cg_solve(A2, np.ones(3))


def test_cg_zero_diagonal_with_jacobi():
    A = SparseMatrix.from_dense([[0.0, 1.0], [1.0, 2.0]])
    with pytest.raises(ZeroDivisionError):
        cg_solve(A, np.ones(2))


def test_cg_reports_non_convergence():
    n = 50
    A = SparseMatrix.from_dense(np.diag(np.linspace(1, 1e4, n)) + 0.0)
    opts = SolveOptions(tolerance=1e-14, max_iterations=2, preconditioner="none")
    with pytest.raises(ConvergenceError) as err:
        cg_solve(A, np.ones(n), opts)
    assert err.value.iterations == 2
    assert err.value.x.shape == (n,)


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tolerance=0)
    with pytest.raises(ValueError):
        SolveOptions(preconditioner="ilu")


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 200), seed=st.integers(0, 2**32 - 1),
       precond=st.sampled_from(["jacobi", "none"]))
def test_cg_matches_dense_solver(n, seed, precond):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((n, n))
    A = Q @ Q.T + n * np.eye(n)
    b = rng.standard_normal(n)
    res = cg_solve(SparseMatrix.from_dense(A), b, SolveOptions(1e-10, preconditioner=precond))
    exact = np.linalg.solve(A, b)
    assert np.linalg.norm(res.x - exact) <= 1e-8 * max(1.0, np.linalg.norm(exact))
    assert res.iterations <= 3 * n


def test_triplets_sum_duplicates():
    acc = TripletAccumulator(3)
    acc.add([0, 0, 2], [0, 0, 1], [1.0, 2.0, 5.0])
    other = TripletAccumulator(3)
    other.add([2], [1], [1.0])
    acc.merge(other)
    A = acc.tocsr()
    assert np.array_equal(A.toarray(), [[3, 0, 0], [0, 0, 0], [0, 6, 0]])
    assert A.row_offsets.tolist() == [0, 1, 1, 2]


def test_sparse_matrix_algebra():
    B = A2 + A2 * 2.0 - A2
    assert np.array_equal(B.toarray(), 2 * A2.toarray())
    assert A2.is_symmetric()
    assert np.array_equal(A2.diagonal(), [4, 3])
    assert np.array_equal(A2.row_sums(), [5, 4])


def test_matrix_market_round_trip(tmp_path):
    path = tmp_path / "a.mtx"
    write_matrix_market(path, A2, comment="test")
    assert np.array_equal(read_matrix_market(path).toarray(), A2.toarray())


def test_cg_rejects_non_finite_rhs():
    with pytest.raises(FloatingPointError):
        cg_solve(A2, np.array([1.0, np.inf]))
