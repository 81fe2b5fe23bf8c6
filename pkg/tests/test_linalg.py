import numpy as np
import pytest
import scipy.sparse as sp

from ddconvect.assembly import assemble_flow, assemble_transport
from ddconvect.benchmarks import example1, example2
from ddconvect.errors import ConfigurationError, SolverError
from ddconvect.fespace import FESystem
from ddconvect.linalg import (
    DENSE_LIMIT, backward_error, bicgstab, block_jacobi_preconditioner, conjugate_gradient,
    dense_lu_solve, direct_solve, export_matrix_market, ilu_preconditioner,
    jacobi_preconditioner, solve,
)
from ddconvect.mesh import build_mesh

FIXTURES = [(example1, 4, 0), (example1, 2, 1), (example2, 1, 0), (example2, 2, 1)]


def fixture_systems(make, n, k):
    bench = make()
    fes = FESystem(build_mesh(bench.domain(n)), k)
    phi = fes.interpolate_vector(bench.exact.phi)
    w = fes.interpolate_vector(bench.exact.u)
    flow = assemble_flow(fes, bench.config, phi, w, newton=True)
    trans = assemble_transport(fes, bench.config, w)
    A, b = flow.reduced()
    yield "flow", A, b
    yield "jacobian", flow.reduced_jacobian(), b
    A, b = trans.reduced()
    yield "transport", A, b


def rel_diff(x, ref):
    return np.abs(x - ref).max() / np.abs(ref).max()


@pytest.mark.parametrize("make,n,k", FIXTURES, ids=["ex1-n4-k0", "ex1-n2-k1", "ex2-n1-k0", "ex2-n2-k1"])
def test_krylov_matches_dense_lu(make, n, k):
    for kind, A, b in fixture_systems(make, n, k):
        assert A.shape[0] <= DENSE_LIMIT
        ref, _ = dense_lu_solve(A, b)
        pre = jacobi_preconditioner(A) if kind == "transport" else ilu_preconditioner(A)
        x, rep = bicgstab(A, b, preconditioner=pre)
        assert rep.converged, kind
        assert rel_diff(x, ref) <= 1e-8, kind
        x, _ = direct_solve(A, b)
        assert rel_diff(x, ref) <= 1e-8, kind


def test_cg_on_symmetric_transport():
    bench = example1()
    fes = FESystem(build_mesh(bench.domain(4)), 0)
    A, b = assemble_transport(fes, bench.config).reduced()
    assert abs(A - A.T).max() <= 1e-14
    ref, _ = dense_lu_solve(A, b)
    x, rep = conjugate_gradient(A, b, preconditioner=jacobi_preconditioner(A))
    assert rep.converged and rel_diff(x, ref) <= 1e-8


def test_cg_rejects_indefinite_matrix():
    A = sp.diags([1.0, -1.0, 2.0]).tocsr()
    with pytest.raises(SolverError):
        conjugate_gradient(A, np.ones(3))


def test_bicgstab_reports_breakdown():
    # r_hat orthogonal to A r0 gives a zero denominator in the first step
    A = sp.csr_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    x, rep = bicgstab(A, np.array([1.0, 0.0]))
    assert rep.breakdown and not rep.converged


def test_solve_falls_back_to_lu_after_breakdown():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    x, rep = solve(A, np.array([1.0, 0.0]), method="bicgstab")
    assert rep.method == "dense-lu"
    assert np.allclose(A @ x, [1.0, 0.0])
    with pytest.raises(SolverError):
        solve(A, np.array([1.0, 0.0]), method="bicgstab", fallback=False)


def test_zero_rhs_returns_zero():
    A = sp.identity(4, format="csr")
    x, rep = bicgstab(A, np.zeros(4))
    assert rep.converged and not np.any(x)


def test_jacobi_rejects_zero_diagonal():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 0.0]]))
    with pytest.raises(ConfigurationError):
        jacobi_preconditioner(A)
    pre = block_jacobi_preconditioner(A, [1])
    assert np.allclose(pre(np.array([2.0, 3.0])), [2.0, 3.0])


def test_singular_matrix_raises():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        solve(A, np.array([1.0, 0.0]))


def test_shape_validation():
    with pytest.raises(ConfigurationError):
        solve(sp.identity(3, format="csr"), np.ones(2))
    with pytest.raises(ConfigurationError):
        solve(sp.identity(3, format="csr"), np.ones(3), method="gmres")
    with pytest.raises(ConfigurationError):
        dense_lu_solve(sp.identity(DENSE_LIMIT + 1, format="csr"), np.ones(DENSE_LIMIT + 1))


def test_backward_error_of_exact_solution(rng):
    A = sp.random(30, 30, density=0.3, random_state=1) + 5 * sp.identity(30)
    x = rng.standard_normal(30)
    assert backward_error(A, A @ x, x) <= 1e-15


def test_matrix_market_roundtrip(tmp_path):
    from scipy.io import mmread

    A = sp.random(6, 6, density=0.5, random_state=3).tocsr()
    export_matrix_market(tmp_path / "a.mtx", A, comment="flow block")
    assert abs(sp.csr_matrix(mmread(str(tmp_path / "a.mtx"))) - A).max() == 0


def test_cg_energy_error_is_monotone():
    bench = example1()
    fes = FESystem(build_mesh(bench.domain(2)), 0)
    A, b = assemble_transport(fes, bench.config).reduced()
    assert A.shape[0] <= 20
    ref, _ = dense_lu_solve(A, b)
    errs = []
    for m in range(1, A.shape[0] + 1):
        x, _ = conjugate_gradient(A, b, max_iter=m, preconditioner=jacobi_preconditioner(A))
        e = x - ref
        errs.append(np.sqrt(e @ (A @ e)))
    assert all(b2 <= a2 * (1 + 1e-12) + 1e-14 for a2, b2 in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-8 * errs[0]


def test_solvers_are_deterministic():
    _, A, b = next(fixture_systems(example1, 4, 0))
    runs = [bicgstab(A, b, preconditioner=ilu_preconditioner(A))[0] for _ in range(2)]
    assert np.array_equal(runs[0], runs[1])
    runs = [direct_solve(A, b)[0] for _ in range(2)]
    assert np.array_equal(runs[0], runs[1])
