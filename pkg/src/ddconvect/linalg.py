"""Krylov solvers, preconditioners and direct fallbacks.

Matrices are ``scipy.sparse`` CSR matrices in canonical form (sorted
column indices, no duplicates).  The Krylov loops are written out so that
breakdown is reported instead of silently ignored, and the residual in
every report is recomputed from the returned iterate.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, SolverError

log = logging.getLogger(__name__)

KRYLOV_TOL = 1e-12
KRYLOV_MAXITER = 20000
DENSE_LIMIT = 2000
# acceptance threshold for the relative residual of a direct solve
DIRECT_TOL = 1e-8
# or, failing that, for its normwise backward error
BACKWARD_TOL = 1e-13


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    breakdown: bool = False
    method: str = ""


def as_csr(A):
    """Canonical CSR copy of ``A``."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def _check(A, b):
    if A.shape[0] != A.shape[1]:
        raise ConfigurationError(f"matrix must be square, got {A.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (A.shape[0],):
        raise ConfigurationError(f"rhs of length {b.shape} does not match {A.shape}")
    return b


def _true_residual(A, b, x):
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return r / nb if nb > 0 else r


def _identity(r):
    return r


def jacobi_preconditioner(A):
    """Callable applying D^{-1}; zero diagonal entries are an error."""
    d = np.asarray(A.diagonal(), dtype=float)
    if np.any(d == 0):
        raise ConfigurationError(
            f"Jacobi preconditioner: {np.count_nonzero(d == 0)} zero diagonal entries"
        )
    inv = 1.0 / d
    return lambda r: inv * r


def block_jacobi_preconditioner(A, identity_rows=()):
    """Jacobi on the field rows, identity on ``identity_rows`` (e.g. the multiplier)."""
    d = np.asarray(A.diagonal(), dtype=float).copy()
    idx = np.asarray(identity_rows, dtype=np.int64)
    d[idx] = 1.0
    if np.any(d == 0):
        raise ConfigurationError("block Jacobi preconditioner: zero diagonal in field block")
    inv = 1.0 / d
    return lambda r: inv * r


def ilu_preconditioner(A, drop_tol=1e-4, fill_factor=10.0):
    """Callable applying an incomplete LU factorization of ``A``.

    Uses the same symmetric minimum degree ordering without threshold
    pivoting as the direct solver, which keeps the saddle-point flow
    matrices stable; falls back to SuperLU's default ordering on failure.
    """
    Acsc = sp.csc_matrix(A)
    try:
        ilu = spla.spilu(Acsc, drop_tol=drop_tol, fill_factor=fill_factor,
                         permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                         options=dict(SymmetricMode=True))
    except RuntimeError:
        try:
            ilu = spla.spilu(Acsc, drop_tol=drop_tol, fill_factor=fill_factor)
        except RuntimeError as exc:
            raise SolverError(f"incomplete LU failed: {exc}") from exc
    return ilu.solve


def bicgstab(A, b, x0=None, tol=KRYLOV_TOL, max_iter=KRYLOV_MAXITER, preconditioner=None):
    """Right-preconditioned BiCGSTAB.

    Returns ``(x, SolveReport)``; on breakdown the report is flagged and the
    best iterate seen is returned.
    """
    b = _check(A, b)
    M = preconditioner or _identity
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, method="bicgstab")
    r = b - A @ x
    r_hat = r.copy()
    rho_old = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    best, best_res = x.copy(), np.linalg.norm(r) / nb
    tiny = np.finfo(float).tiny * 1e10
    breakdown = False
    it = 0
    while it < max_iter and best_res > tol:
        it += 1
        rho = r_hat @ r
        if abs(rho) < tiny or abs(omega) < tiny:
            breakdown = True
            break
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        ph = M(p)
        v = A @ ph
        denom = r_hat @ v
        if abs(denom) < tiny:
            breakdown = True
            break
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) / nb <= tol:
            x = x + alpha * ph
            r = s
        else:
            sh = M(s)
            t = A @ sh
            tt = t @ t
            if tt < tiny:
                breakdown = True
                break
            omega = (t @ s) / tt
            x = x + alpha * ph + omega * sh
            r = s - omega * t
        rho_old = rho
        res = np.linalg.norm(r) / nb
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            # guard against drift of the recurrence
            r = b - A @ x
            res = np.linalg.norm(r) / nb
            best, best_res = x.copy(), res
    final = _true_residual(A, b, best)
    return best, SolveReport(it, final, final <= tol, breakdown, "bicgstab")


def conjugate_gradient(A, b, x0=None, tol=KRYLOV_TOL, max_iter=KRYLOV_MAXITER,
                       preconditioner=None):
    """Preconditioned CG; a non-positive curvature p^T A p raises SolverError."""
    b = _check(A, b)
    M = preconditioner or _identity
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    nb = np.linalg.norm(b)
    if nb == 0:
        return np.zeros_like(b), SolveReport(0, 0.0, True, method="cg")
    r = b - A @ x
    z = M(r)
    p = z.copy()
    rz = r @ z
    it = 0
    res = np.linalg.norm(r) / nb
    while it < max_iter and res > tol:
        it += 1
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0:
            raise SolverError(
                "conjugate gradient: matrix is not positive definite", last=x
            )
        a = rz / curv
        x = x + a * p
        r = r - a * Ap
        res = np.linalg.norm(r) / nb
        if res <= tol:
            r = b - A @ x
            res = np.linalg.norm(r) / nb
            if res <= tol:
                break
        z = M(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    final = _true_residual(A, b, x)
    return x, SolveReport(it, final, final <= tol, False, "cg")


def backward_error(A, b, x):
    """Normwise backward error |b - Ax| / (|A| |x| + |b|) in the sup norm."""
    r = np.abs(b - A @ x).max(initial=0.0)
    nA = abs(A).sum(axis=1).max() if sp.issparse(A) else np.abs(A).sum(axis=1).max()
    denom = float(nA) * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
    return r / denom if denom > 0 else r


def _refine(A, b, x, apply_inverse, steps=2):
    """Iterative refinement with an existing factorization."""
    for _ in range(steps):
        r = b - A @ x
        if not np.any(r):
            break
        x = x + apply_inverse(r)
    return x


def _direct_report(A, b, x, method):
    res = _true_residual(A, b, x)
    ok = bool(np.all(np.isfinite(x)) and (res <= DIRECT_TOL or backward_error(A, b, x) <= BACKWARD_TOL))
    return SolveReport(1, res, ok, False, method)


def dense_lu_solve(A, b):
    """Dense LU oracle/fallback for small systems."""
    b = _check(A, b)
    if A.shape[0] > DENSE_LIMIT:
        raise ConfigurationError(f"dense LU limited to {DENSE_LIMIT} unknowns")
    D = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    lu = sla.lu_factor(D)
    x = _refine(D, b, sla.lu_solve(lu, b), lambda r: sla.lu_solve(lu, r))
    return x, _direct_report(D, b, x, "dense-lu")


def direct_solve(A, b):
    """Sparse LU (SuperLU) solve with iterative refinement.

    The flow and transport matrices are structurally symmetric with a
    dominant diagonal away from the multiplier, so a symmetric minimum
    degree ordering without threshold pivoting keeps the fill small.  If
    that factorization is inaccurate the default partial-pivoting LU is
    used instead.
    """
    b = _check(A, b)
    Acsc = sp.csc_matrix(A)
    try:
        lu = spla.splu(Acsc, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
        x = _refine(A, b, lu.solve(b), lu.solve)
        rep = _direct_report(A, b, x, "splu")
        if rep.converged:
            return x, rep
    except RuntimeError:
        pass
    try:
        lu = spla.splu(Acsc)
    except RuntimeError as exc:
        raise SolverError(f"sparse LU failed: {exc}") from exc
    x = _refine(A, b, lu.solve(b), lu.solve)
    return x, _direct_report(A, b, x, "splu")


SOLVERS = ("direct", "bicgstab", "cg", "dense")


def solve(A, b, method="direct", tol=KRYLOV_TOL, max_iter=KRYLOV_MAXITER, x0=None,
          preconditioner=None, fallback=True):
    """Dispatch to a linear solver; Krylov failures fall back to a direct solve.

    Raises SolverError when no method reaches the tolerance.
    """
    if method not in SOLVERS:
        raise ConfigurationError(f"unknown linear solver {method!r}")
    if method == "direct":
        x, rep = direct_solve(A, b)
    elif method == "dense":
        x, rep = dense_lu_solve(A, b)
    else:
        fn = bicgstab if method == "bicgstab" else conjugate_gradient
        x, rep = fn(A, b, x0=x0, tol=tol, max_iter=max_iter, preconditioner=preconditioner)
        if not rep.converged and fallback:
            log.warning("%s did not converge (res %.2e, breakdown=%s); using LU",
                        method, rep.residual, rep.breakdown)
            x, rep = (dense_lu_solve if A.shape[0] <= DENSE_LIMIT else direct_solve)(A, b)
    if not np.all(np.isfinite(x)):
        raise SolverError(f"{rep.method} produced non-finite values", last=x)
    if not rep.converged:
        raise SolverError(f"{rep.method} did not converge (res {rep.residual:.2e})", last=x)
    return x, rep


def export_matrix_market(path, A, comment=""):
    """Write ``A`` in MatrixMarket coordinate format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(A), comment=comment)
