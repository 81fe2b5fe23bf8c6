"""Sparse assembly against a dense element-by-element oracle.

The oracle builds its own k=0 bases from barycentric coordinates and its
own edge orientation, integrates with a collapsed Gauss-Legendre rule of
much higher degree and fills a dense matrix one entry at a time.  All data
are polynomial so both quadratures are exact.
"""

import numpy as np
import pytest

from ddconvect.assembly import (
    assemble_flow, assemble_transport, lagrange_gram, residual,
)
from ddconvect.benchmarks import example1, example2
from ddconvect.fespace import FESystem
from ddconvect.mesh import BoundaryTag, build_mesh
from ddconvect.problem import ProblemConfig, Viscosity
from ddconvect.solver import solve_coupled

UNITS = (np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]))
ALPHA, G = (0.7, -0.4), (0.2, -1.0)


def collapsed_rule(n=8):
    """Duffy-mapped tensor Gauss-Legendre rule on the reference triangle."""
    s, w = np.polynomial.legendre.leggauss(n)
    s, w = 0.5 * (s + 1), 0.5 * w
    pts, wts = [], []
    for a, wa in zip(s, w):
        for b, wb in zip(s, w):
            pts.append((a, b * (1 - a)))
            wts.append(wa * wb * (1 - a))
    return np.array(pts), np.array(wts)


def nu_poly(x):
    return 1.0 + 0.5 * x[..., 0] * x[..., 1]


def f_u(x):
    return np.stack([x[..., 0] ** 2 - x[..., 1], 1.0 + x[..., 0] * x[..., 1]], axis=-1)


def f_phi(x):
    return np.stack([x[..., 0] - 2 * x[..., 1] ** 2, 0.5 + x[..., 1]], axis=-1)


def u_D(x):
    return np.stack([x[..., 1] ** 2, x[..., 0] - x[..., 0] * x[..., 1]], axis=-1)


def phi_D(x):
    return np.stack([1 + x[..., 0], x[..., 0] * x[..., 1]], axis=-1)


def phi_N(x, n):
    return np.stack([x[..., 0] * n[..., 0], (1 - x[..., 1]) * n[..., 1]], axis=-1)


def polynomial_config(**kw):
    base = dict(
        gamma=2.0, nu=Viscosity(nu_poly, 1.0, 1.5, name="bilinear"), alpha=ALPHA, K=(1.3, 0.6),
        g=G, f_u=f_u, f_phi=f_phi, u_D=u_D, phi_D=phi_D, phi_N=phi_N,
    )
    base.update(kw)
    return ProblemConfig(**base)


class Oracle:
    """Dense k=0 matrices built entry by entry."""

    def __init__(self, mesh):
        self.mesh = mesh
        V, E, M = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        self.V, self.E, self.M = V, E, M
        self.off_s = 2 * M
        self.off_u = self.off_s + 2 * E
        self.lam = self.off_u + 2 * V
        self.n = self.lam + 1
        self.edge_index = {tuple(sorted(e)): i for i, e in enumerate(mesh.edges.tolist())}
        self.pts, self.wts = collapsed_rule()

    def element(self, m):
        """Quadrature points, weights and closed-form basis data of triangle m."""
        ids = self.mesh.triangles[m]
        P = self.mesh.vertices[ids]
        J = np.column_stack([P[1] - P[0], P[2] - P[0]])
        area = 0.5 * abs(np.linalg.det(J))
        x = P[0] + self.pts @ J.T
        w = self.wts * 2 * area
        # barycentric gradients from the inverse of the vertex matrix
        B = np.linalg.inv(np.vstack([np.ones(3), P.T]))
        lam = np.column_stack([np.ones(len(x)), x]) @ B.T
        grad = B[:, 1:]
        rt = []
        for i in range(3):
            a, b = [ids[j] for j in range(3) if j != i]
            lo, hi = min(a, b), max(a, b)
            t = self.mesh.vertices[hi] - self.mesh.vertices[lo]
            n_glob = np.array([t[1], -t[0]])
            mid = 0.5 * (self.mesh.vertices[a] + self.mesh.vertices[b])
            s = np.sign(n_glob @ (mid - P[i]))
            length = np.hypot(*t)
            rt.append((self.edge_index[(lo, hi)], s * length / (2 * area), P[i]))
        return ids, x, w, lam, grad, rt

    def flow_functions(self, m, xq, lam, grad, rt):
        """Global index and (T, S, divS, U, gradU) of each local flow function at one point."""
        out = []
        for j, Uj in enumerate(UNITS):
            out.append((2 * m + j, Uj, None, None, None, None))
        for row in range(2):
            for e, c, p in rt:
                S = np.zeros((2, 2))
                S[row] = c * (xq - p)
                div = np.zeros(2)
                div[row] = 2 * c
                out.append((self.off_s + row * self.E + e, None, S, div, None, None))
        for comp in range(2):
            for i, v in enumerate(self.ids):
                U = np.zeros(2)
                U[comp] = lam[i]
                gU = np.zeros((2, 2))
                gU[comp] = grad[i]
                out.append((self.off_u + comp * self.V + v, None, None, None, U, gU))
        return out

    def flow(self, cfg, phi, w, newton=False):
        k1, k2, k3 = cfg.stabilization
        gam = cfg.gamma_eff
        A = np.zeros((self.n, self.n))
        Jx = np.zeros((self.n, self.n))
        b = np.zeros(self.n)
        V = self.V
        for m in range(self.M):
            ids, x, wq, lam, grad, rt = self.element(m)
            self.ids = ids
            for q in range(len(x)):
                xq, L = x[q], lam[q]
                ph = np.array([L @ phi[ids], L @ phi[ids + V]])
                wv = np.array([L @ w[ids], L @ w[ids + V]])
                nu = nu_poly(xq)
                f = (np.dot(ALPHA, ph)) * np.array(G) + f_u(xq)
                if cfg.dt is not None:
                    f = f + np.array([L @ cfg.u_old[ids], L @ cfg.u_old[ids + V]]) / cfg.dt
                funcs = self.flow_functions(m, xq, L, grad, rt)
                for i, Ti, Si, di, Ui, gi in funcs:
                    if Ui is not None:
                        b[i] += wq[q] * f @ Ui
                    if Si is not None:
                        b[i] -= wq[q] * k2 * f @ di
                        A[self.lam, i] += wq[q] * np.trace(Si)
                        A[i, self.lam] += wq[q] * np.trace(Si)
                    for j, Tj, Sj, dj, Uj, gj in funcs:
                        val, jac = 0.0, 0.0
                        if Ti is not None:      # strain test r
                            if Tj is not None:
                                val = 2 * nu * np.sum(Tj * Ti)
                            elif Sj is not None:
                                val = -np.sum(Ti * dev(Sj))
                            else:
                                val = -np.sum(Ti * np.outer(Uj, wv))
                                jac = -np.sum(Ti * np.outer(wv, Uj))
                        elif Si is not None:    # pseudo-stress test tau
                            if Tj is not None:
                                val = (1 - 2 * k3 * nu) * np.sum(dev(Si) * Tj)
                            elif Sj is not None:
                                val = k3 * np.sum(dev(Si) * dev(Sj)) + k2 * di @ dj
                            else:
                                Wj = 0.5 * (gj - gj.T)
                                val = ((1 - k2 * gam) * di @ Uj + np.sum(Si * Wj)
                                       + k3 * np.sum(dev(Si) * np.outer(Uj, wv)))
                                jac = k3 * np.sum(dev(Si) * np.outer(wv, Uj))
                        else:                   # velocity test v
                            Ei, Wi = 0.5 * (gi + gi.T), 0.5 * (gi - gi.T)
                            if Tj is not None:
                                val = -k1 * np.sum(Ei * Tj)
                            elif Sj is not None:
                                val = -Ui @ dj - np.sum(Wi * Sj)
                            else:
                                Ej = 0.5 * (gj + gj.T)
                                val = gam * Ui @ Uj + k1 * np.sum(Ei * Ej)
                        A[i, j] += wq[q] * val
                        Jx[i, j] += wq[q] * jac
        self.boundary_flux(b)
        return A, b, Jx

    def boundary_flux(self, b):
        """Integral of u_D . tau n over the boundary, by a 10-point rule per edge."""
        s, w = np.polynomial.legendre.leggauss(10)
        s, w = 0.5 * (s + 1), 0.5 * w
        for e in np.flatnonzero(self.mesh.edge_tris[:, 1] < 0):
            a, c = self.mesh.edges[e]
            m = self.mesh.edge_tris[e, 0]
            ids, _, _, _, _, rt = self.element(m)
            pa, pc = self.mesh.vertices[a], self.mesh.vertices[c]
            opp = [v for v in ids if v not in (a, c)][0]
            t = pc - pa
            n = np.array([t[1], -t[0]]) / np.hypot(*t)
            if n @ (pa - self.mesh.vertices[opp]) < 0:
                n = -n
            for sq, wq in zip(s, w):
                xq = pa + sq * t
                ud = u_D(xq)
                for ge, coef, p in rt:
                    flux = coef * (xq - p) @ n * wq * np.hypot(*t)
                    for row in range(2):
                        b[self.off_s + row * self.E + ge] += flux * ud[row]

    def transport(self, cfg, u, advection=True):
        V = self.V
        A = np.zeros((2 * V, 2 * V))
        b = np.zeros(2 * V)
        inv_dt = 0.0 if cfg.dt is None else 1.0 / cfg.dt
        for m in range(self.M):
            ids, x, wq, lam, grad, _ = self.element(m)
            for q in range(len(x)):
                L = lam[q]
                uv = np.array([L @ u[ids], L @ u[ids + V]])
                src = f_phi(x[q])
                for c in range(2):
                    load = src[c]
                    if inv_dt:
                        load = load + inv_dt * (L @ cfg.phi_old[ids + c * V])
                    for i in range(3):
                        b[ids[i] + c * V] += wq[q] * load * L[i]
                        for j in range(3):
                            val = cfg.K[c] * grad[i] @ grad[j] + inv_dt * L[i] * L[j]
                            if advection:
                                val += (uv @ grad[j]) * L[i]
                            A[ids[i] + c * V, ids[j] + c * V] += wq[q] * val
        # Neumann part of the boundary
        s, w = np.polynomial.legendre.leggauss(10)
        s, w = 0.5 * (s + 1), 0.5 * w
        for e in self.mesh.edges_tagged(BoundaryTag.NEUMANN_TEMP):
            a, c_ = self.mesh.edges[e]
            m = self.mesh.edge_tris[e, 0]
            ids = self.mesh.triangles[m]
            opp = [v for v in ids if v not in (a, c_)][0]
            pa, pc = self.mesh.vertices[a], self.mesh.vertices[c_]
            t = pc - pa
            n = np.array([t[1], -t[0]]) / np.hypot(*t)
            if n @ (pa - self.mesh.vertices[opp]) < 0:
                n = -n
            for sq, wq in zip(s, w):
                flux = phi_N(pa + sq * t, n)
                for c in range(2):
                    b[a + c * V] += wq * np.hypot(*t) * flux[c] * (1 - sq)
                    b[c_ + c * V] += wq * np.hypot(*t) * flux[c] * sq
        return A, b


def dev(S):
    return S - 0.5 * np.trace(S) * np.eye(2)


@pytest.fixture
def oracle_data(two_triangles, rng):
    fes = FESystem(two_triangles, 0)
    phi = rng.standard_normal(fes.n_phi)
    w = 0.5 * rng.standard_normal(fes.n_u)
    return fes, Oracle(two_triangles), phi, w


@pytest.mark.parametrize("transient", [False, True], ids=["stationary", "backward-euler"])
def test_flow_matches_dense_oracle(oracle_data, rng, transient):
    fes, orc, phi, w = oracle_data
    cfg = polynomial_config()
    if transient:
        cfg = cfg.with_(dt=0.25, u_old=rng.standard_normal(fes.n_u))
    sysf = assemble_flow(fes, cfg, phi, w, newton=True)
    A, b, J = orc.flow(cfg, phi, w)
    assert sysf.matrix.shape == A.shape
    assert np.abs(sysf.matrix.toarray() - A).max() <= 1e-10
    assert np.abs(sysf.jacobian_extra.toarray() - J).max() <= 1e-10
    assert np.abs(sysf.rhs - b).max() <= 1e-10


@pytest.mark.parametrize("transient", [False, True], ids=["stationary", "backward-euler"])
def test_transport_matches_dense_oracle(oracle_data, rng, transient):
    fes, orc, _, w = oracle_data
    cfg = polynomial_config()
    if transient:
        cfg = cfg.with_(dt=0.1, u_old=np.zeros(fes.n_u), phi_old=rng.standard_normal(fes.n_phi))
    sys_t = assemble_transport(fes, cfg, w)
    A, b = orc.transport(cfg, w)
    assert np.abs(sys_t.matrix.toarray() - A).max() <= 1e-10
    assert np.abs(sys_t.rhs - b).max() <= 1e-10


def test_lagged_advection_moves_to_rhs(oracle_data):
    fes, orc, phi, w = oracle_data
    cfg = polynomial_config()
    lhs = assemble_transport(fes, cfg, w)
    rhs = assemble_transport(fes, cfg, w, phi_prev=phi, advection="rhs")
    A_sym, _ = orc.transport(cfg, w, advection=False)
    assert np.abs(rhs.matrix.toarray() - A_sym).max() <= 1e-10
    # same residual at phi_prev
    assert np.allclose(lhs.matrix @ phi - lhs.rhs, rhs.matrix @ phi - rhs.rhs, atol=1e-12)


def test_newton_jacobian_is_derivative(oracle_data, rng):
    """matrix(w) + jacobian_extra(w) is the derivative of u -> A(u) u."""
    fes, _, phi, w = oracle_data
    cfg = polynomial_config()
    x = rng.standard_normal(fes.n_flow)
    sl = slice(fes.off_u, fes.off_u + fes.n_u)
    x[sl] = w

    def F(y):
        return assemble_flow(fes, cfg, phi, y[sl]).matrix @ y

    s = assemble_flow(fes, cfg, phi, w, newton=True)
    J = (s.matrix + s.jacobian_extra).toarray()
    d = rng.standard_normal(fes.n_flow)
    eps = 1e-6
    fd = (F(x + eps * d) - F(x - eps * d)) / (2 * eps)
    assert np.allclose(fd, J @ d, atol=1e-8)


def test_cached_and_uncached_assembly_agree(rng):
    bench = example1()
    fes = FESystem(build_mesh(bench.domain(3)), 1)
    phi = rng.standard_normal(fes.n_phi)
    w = rng.standard_normal(fes.n_u)
    a = assemble_flow(fes, bench.config, phi, w, newton=True)
    b = assemble_flow(fes, bench.config, phi, w, newton=True)
    c = assemble_flow(FESystem(fes.mesh, 1), bench.config, phi, w, newton=True, chunk=7)
    for other in (b, c):
        assert abs(a.matrix - other.matrix).max() <= 1e-13
        assert abs(a.jacobian_extra - other.jacobian_extra).max() <= 1e-13
        assert np.allclose(a.rhs, other.rhs, rtol=0, atol=1e-13)


def test_stiffness_matches_cotangent_formula(two_triangles):
    """P1 stiffness entries equal -(cot a + cot b) / 2 on interior edges."""
    fes = FESystem(two_triangles, 0)
    G = lagrange_gram(fes).toarray()
    cfg = polynomial_config(K=(1.0, 1.0), phi_N=None, f_phi=None)
    A = assemble_transport(fes, cfg).matrix.toarray()[:4, :4]
    # both triangles are right isosceles: the diagonal edge sees two right angles
    assert A[0, 2] == pytest.approx(0.0, abs=1e-14)
    assert A[0, 1] == pytest.approx(-0.5, abs=1e-14)
    assert np.allclose(A.sum(axis=1), 0, atol=1e-14)
    # H1 Gram = stiffness + mass, mass of the unit square sums to 1
    assert (G - A).sum() == pytest.approx(1.0, abs=1e-13)


def _coercivity_probe(bench, n, rng, trials=200):
    fes = FESystem(build_mesh(bench.domain(n)), 0)
    phi = fes.interpolate_vector(bench.exact.phi)
    w = fes.interpolate_vector(bench.exact.u)
    A = assemble_flow(fes, bench.config, phi, w).matrix
    keep = np.ones(fes.n_flow, dtype=bool)
    keep[fes.velocity_fixed] = False
    keep[fes.off_lambda] = False
    r = np.zeros(fes.n_flow)
    r[fes.off_sigma:fes.off_u] = fes.mean_trace_row()
    vals = []
    for _ in range(trials):
        y = np.where(keep, rng.standard_normal(fes.n_flow), 0.0)
        y -= (r @ y) / (r @ r) * r
        vals.append(y @ (A @ y))
    return np.array(vals)


@pytest.mark.parametrize("make", [example1, example2], ids=["ex1", "ex2"])
def test_coercivity_probe(make, rng):
    vals = _coercivity_probe(make(), 3, rng)
    assert np.all(vals > 0)


def test_residual_vanishes_at_discrete_solution():
    bench = example1()
    fes = FESystem(build_mesh(bench.domain(2)), 0)
    state, hist = solve_coupled(fes, bench.config)
    res = residual(fes, bench.config, state)
    assert res.relative <= 1e-8
    perturbed = state.copy()
    perturbed.phi[np.setdiff1d(np.arange(fes.n_phi), fes.phi_fixed)[:3]] += 1e-2
    assert residual(fes, bench.config, perturbed).relative > 1e-6
