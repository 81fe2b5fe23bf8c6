"""Sparse assembly of the augmented flow system and the transport system.

Flow rows are ordered like the unknowns: strain test functions ``r``,
pseudo-stress test functions ``tau`` (both rows), velocity test functions
``v`` and finally the mean-trace constraint.  Element contributions are
computed in vectorized chunks and scattered through a COO triplet list,
whose conversion to CSR sums duplicates in a fixed order.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, EvaluationError
from .fespace import _LOCAL_EDGES, _REF_VERTS, FESystem, dev
from .mesh import BoundaryTag
from .problem import ProblemConfig
from .quadrature import gauss_legendre_01, rule_for_degree
from .state import CoupledState

CHUNK = 2048


def default_degree(k):
    return 2 * (k + 1) + 2


@dataclass
class AssembledSystem:
    """Full square matrix and rhs plus the Dirichlet-type constraints.

    Constrained unknowns are eliminated by lifting: the reduced system acts
    on the free unknowns only.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    jacobian_extra: Optional[sp.csr_matrix] = None

    def __post_init__(self):
        n = self.matrix.shape[0]
        mask = np.ones(n, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)

    @property
    def n(self):
        return self.matrix.shape[0]

    def lift(self):
        x = np.zeros(self.n)
        x[self.fixed] = self.fixed_values
        return x

    def reduced(self):
        """(A_ff, b_f - A_fc x_c)."""
        A = self.matrix[self.free]
        b = self.rhs[self.free] - A[:, self.fixed] @ self.fixed_values
        return A[:, self.free].tocsr(), b

    def reduced_jacobian(self):
        """Free-free block of matrix + jacobian_extra."""
        J = self.matrix if self.jacobian_extra is None else self.matrix + self.jacobian_extra
        return J[self.free][:, self.free].tocsr()

    def expand(self, x_free):
        x = self.lift()
        x[self.free] = x_free
        return x

    def free_residual(self, x):
        """Rows of ``A x - b`` belonging to free unknowns."""
        return (self.matrix @ x - self.rhs)[self.free]


# ----------------------------------------------------------------- helpers

def _chunks(n, size=CHUNK):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def _weights(fes, elems, rule):
    return rule.weights[None, :] * fes.geom.det[elems][:, None]


def _gram(wq, A, B):
    """Local matrices sum_q wq A_i : B_j for bases A (m,q,i,...), B (m,q,j,...)."""
    m, q, ni = A.shape[:3]
    nj = B.shape[2]
    Af = (A * wq.reshape((m, q) + (1,) * (A.ndim - 2))).reshape(m, q, ni, -1)
    Bf = B.reshape(m, q, nj, -1)
    Af = Af.transpose(0, 2, 1, 3).reshape(m, ni, -1)
    Bf = Bf.transpose(0, 1, 3, 2).reshape(m, -1, nj)
    return Af @ Bf


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite {what} encountered at quadrature points")
    return arr


def _field(fn, x, what):
    vals = np.asarray(fn(x), dtype=float)
    if vals.shape != x.shape:
        raise ConfigurationError(f"{what} must map (..., 2) points to (..., 2) values")
    return _check_finite(vals, what)


def boundary_edge_quadrature(fes: FESystem, edges, npts):
    """Gauss points on boundary edges.

    Returns the owning elements, reference points (m, q, 2), physical points
    (m, q, 2), scaled weights (m, q) and outward unit normals (m, 2).
    """
    mesh = fes.mesh
    edges = np.asarray(edges, dtype=np.int64)
    elems = mesh.edge_tris[edges, 0]
    local = np.argmax(mesh.tri_edges[elems] == edges[:, None], axis=1)
    s, w = gauss_legendre_01(npts)
    a = np.array([_LOCAL_EDGES[i][0] for i in range(3)])[local]
    b = np.array([_LOCAL_EDGES[i][1] for i in range(3)])[local]
    start, tang = _REF_VERTS[a], _REF_VERTS[b] - _REF_VERTS[a]
    xhat = start[:, None, :] + s[None, :, None] * tang[:, None, :]
    xphys = fes.physical_points(elems, xhat)
    tri = mesh.vertices[mesh.triangles[elems]]
    t_phys = tri[np.arange(len(elems)), b] - tri[np.arange(len(elems)), a]
    length = np.hypot(t_phys[:, 0], t_phys[:, 1])
    normals = np.column_stack([t_phys[:, 1], -t_phys[:, 0]]) / length[:, None]
    return elems, xhat, xphys, w[None, :] * length[:, None], normals


def _phi_at(fes, phi, elems, xhat):
    if phi is None:
        shape = (len(elems), np.shape(xhat)[-2], 2)
        return np.zeros(shape), np.zeros(shape + (2,))
    return fes.eval_vector(phi, elems, xhat)


def _velocity_at(fes, u, elems, xhat):
    """Velocity coefficients are the flow-vector slice of length n_u."""
    if u is None:
        shape = (len(elems), np.shape(xhat)[-2], 2)
        return np.zeros(shape), np.zeros(shape + (2,))
    return fes.eval_vector(u, elems, xhat)


def _momentum_source(fes, cfg: ProblemConfig, phi, elems, xhat, x):
    """(alpha . phi) g + f_u (+ u_old / dt) at quadrature points."""
    phi_vals, _ = _phi_at(fes, phi, elems, xhat)
    a = phi_vals @ np.asarray(cfg.alpha, dtype=float)
    f = a[..., None] * np.asarray(cfg.g, dtype=float)
    if cfg.f_u is not None:
        f = f + _field(cfg.f_u, x, "f_u")
    if cfg.dt is not None and cfg.u_old is not None:
        u_old, _ = fes.eval_vector(cfg.u_old, elems, xhat)
        f = f + u_old / cfg.dt
    return _check_finite(f, "momentum source")


# -------------------------------------------------------------------- flow

# basis values kept between flow assemblies, in floats per FE system
CACHE_FLOATS = 4e7


class _Pattern:
    """Fixed COO triplet layout summed into CSR data with one bincount."""

    def __init__(self, rows, cols, n):
        key = np.asarray(rows, dtype=np.int64) * n + np.asarray(cols, dtype=np.int64)
        uniq, self.inverse = np.unique(key, return_inverse=True)
        self.indices = (uniq % n).astype(np.int32)
        counts = np.bincount(uniq // n, minlength=n)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.nnz = len(uniq)
        self.n = n

    def csr(self, vals):
        data = np.bincount(self.inverse, weights=vals, minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()),
                             shape=(self.n, self.n))


class _FlowChunk:
    """Iterate-independent quadrature data of one chunk of elements."""

    def __init__(self, fes, elems, rule):
        xhat = rule.points
        self.elems = elems
        self.wq = _weights(fes, elems, rule)
        self.x = fes.physical_points(elems, xhat)
        self.T = fes.strain_basis(elems, xhat)
        self.S, self.divS = fes.sigma_basis(elems, xhat)
        self.Sd = dev(self.S)
        self.U, G = fes.vector_lagrange_basis(elems, xhat)
        self.E = 0.5 * (G + np.swapaxes(G, -1, -2))
        self.W = 0.5 * (G - np.swapaxes(G, -1, -2))
        self.dofs = fes.flow_dofs(elems)
        self.nt, self.ns, self.nv = self.T.shape[2], self.S.shape[2], self.U.shape[2]
        self.static = None

    def slices(self):
        nt, ns, nv = self.nt, self.ns, self.nv
        return slice(0, nt), slice(nt, nt + ns), slice(nt + ns, nt + ns + nv)

    def size(self):
        return sum(a.size for a in (self.T, self.S, self.divS, self.Sd, self.U, self.E, self.W))


def _flow_chunks(fes, degree, chunk):
    """Chunk data and the CSR layout of the flow matrix.

    The chunk list is cached on ``fes`` when its basis values fit in
    CACHE_FLOATS; otherwise chunks are produced on the fly.
    """
    key = (degree, chunk)
    cache = getattr(fes, "_flow_cache", None)
    if cache is not None and cache[0] == key:
        return cache[1], cache[2]
    rule = rule_for_degree(degree)
    M = fes.mesh.n_triangles
    dofs = fes.flow_dofs()
    n = dofs.shape[1]
    trace_row = np.zeros(fes.n_flow)
    trace_row[fes.off_sigma:fes.off_sigma + fes.n_sigma] = fes.mean_trace_row(degree)
    nz = np.flatnonzero(trace_row)
    lam = fes.off_lambda
    rows = [np.broadcast_to(dofs[:, :, None], (M, n, n)).ravel(), nz, np.full(len(nz), lam)]
    cols = [np.broadcast_to(dofs[:, None, :], (M, n, n)).ravel(), np.full(len(nz), lam), nz]
    shared = dict(
        pattern=_Pattern(np.concatenate(rows), np.concatenate(cols), fes.n_flow),
        trace=np.concatenate([trace_row[nz], trace_row[nz]]),
        static_key=None,
    )
    first = _FlowChunk(fes, np.arange(min(chunk, M)), rule)
    per_elem = first.size() / len(first.elems)
    if per_elem * M > CACHE_FLOATS:
        chunks = (_FlowChunk(fes, e, rule) for e in _chunks(M, chunk))
        return chunks, shared
    chunks = [first] + [_FlowChunk(fes, e, rule) for e in list(_chunks(M, chunk))[1:]]
    fes._flow_cache = (key, chunks, shared)
    return chunks, shared


def _static_blocks(c, nu, k1, k2, k3, gamma):
    """Local matrix of every term that does not involve the convective velocity."""
    wq = c.wq
    loc = np.zeros((len(c.elems), c.nt + c.ns + c.nv, c.nt + c.ns + c.nv))
    it, is_, iu = c.slices()
    loc[:, it, it] = _gram(2 * nu * wq, c.T, c.T)
    loc[:, is_, it] = _gram((1 - 2 * k3 * nu) * wq, c.Sd, c.T)
    loc[:, iu, it] = -k1 * _gram(wq, c.E, c.T)
    loc[:, it, is_] = -_gram(wq, c.T, c.Sd)
    loc[:, is_, is_] = k3 * _gram(wq, c.Sd, c.Sd) + k2 * _gram(wq, c.divS, c.divS)
    loc[:, iu, is_] = -_gram(wq, c.U, c.divS) - _gram(wq, c.W, c.S)
    loc[:, is_, iu] = (1 - k2 * gamma) * _gram(wq, c.divS, c.U) + _gram(wq, c.S, c.W)
    loc[:, iu, iu] = gamma * _gram(wq, c.U, c.U) + k1 * _gram(wq, c.E, c.E)
    return loc


def _velocity_values(fes, w, c):
    """Convective velocity at the chunk's quadrature points from cached bases."""
    _, _, iu = c.slices()
    coef = w[c.dofs[:, iu] - fes.off_u]
    return np.einsum("mqbc,mb->mqc", c.U, coef)


def assemble_flow(fes: FESystem, cfg: ProblemConfig, phi=None, w=None, *,
                  newton=False, degree=None, chunk=CHUNK):
    """Matrix of A_phi + B_w with the mean-trace multiplier, and rhs F_phi.

    Parameters
    ----------
    phi : array (n_phi,), optional
        Temperature/concentration coefficients entering nu and the buoyancy.
    w : array (n_u,), optional
        Frozen convective velocity of B_w.
    newton : bool
        Also assemble the derivative of B with respect to its frozen slot,
        the integral of (w (x) du)^d : {kappa3 tau^d - r}, into
        ``jacobian_extra`` so that matrix + jacobian_extra is the Jacobian
        of u -> B_u(u, .) at u = w.

    Notes
    -----
    Basis values and, for viscosities that do not depend on phi, the
    w-independent local blocks are cached on ``fes`` between calls.
    """
    if phi is not None and np.shape(phi) != (fes.n_phi,):
        raise ConfigurationError("phi has the wrong length")
    if w is not None and np.shape(w) != (fes.n_u,):
        raise ConfigurationError("w has the wrong length")
    k1, k2, k3 = cfg.stabilization
    gamma = cfg.gamma_eff
    degree = default_degree(fes.k) if degree is None else degree
    rule = rule_for_degree(degree)
    chunks, shared = _flow_chunks(fes, degree, chunk)
    static_key = (k1, k2, k3, gamma, cfg.nu) if cfg.nu.spatial else None
    reuse = static_key is not None and shared["static_key"] == static_key
    vals, jvals = [], []
    rhs = np.zeros(fes.n_flow)

    for c in chunks:
        xhat = rule.points
        it, is_, iu = c.slices()
        phi_vals = None
        if reuse and c.static is not None:
            loc = c.static.copy()
        else:
            phi_vals, _ = _phi_at(fes, phi, c.elems, xhat)
            nu = _check_finite(cfg.nu(c.x, phi_vals), "viscosity")
            static = _static_blocks(c, nu, k1, k2, k3, gamma)
            c.static = static if static_key is not None else None
            loc = static.copy() if static_key is not None else static
        if w is not None:
            wv = _velocity_values(fes, w, c)
            Uw = c.U[..., :, None] * wv[:, :, None, None, :]  # u (x) w for each trial u
            loc[:, is_, iu] += k3 * _gram(c.wq, c.Sd, Uw)
            loc[:, it, iu] = -_gram(c.wq, c.T, Uw)
            if newton:
                jac = np.zeros_like(loc)
                wU = wv[:, :, None, :, None] * c.U[..., None, :]  # w (x) u
                jac[:, is_, iu] = k3 * _gram(c.wq, c.Sd, wU)
                jac[:, it, iu] = -_gram(c.wq, c.T, wU)
                jvals.append(jac.ravel())
        elif newton:
            jvals.append(np.zeros(loc.size))
        vals.append(loc.ravel())

        f = _momentum_source(fes, cfg, phi, c.elems, xhat, c.x)
        np.add.at(rhs, c.dofs[:, iu], np.einsum("mq,mqc,mqic->mi", c.wq, f, c.U))
        np.add.at(rhs, c.dofs[:, is_], -k2 * np.einsum("mq,mqc,mqic->mi", c.wq, f, c.divS))

    shared["static_key"] = static_key

    if cfg.u_D is not None:
        _wall_term(fes, cfg.u_D, rhs)

    pattern = shared["pattern"]
    jac = None
    if newton:
        jac = pattern.csr(np.concatenate(jvals + [np.zeros(len(shared["trace"]))]))
    A = pattern.csr(np.concatenate(vals + [shared["trace"]]))
    fixed, fixed_vals = fes.interpolate_wall(cfg.u_D)
    return AssembledSystem(A, rhs, fixed, fixed_vals, jac)


def _to_csr(vals, rows, cols, n):
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    A.sum_duplicates()
    return A


def _wall_term(fes, u_D, rhs):
    """Adds the integral of u_D . (tau n) over the boundary to the tau rows."""
    edges = fes.mesh.boundary_edges
    elems, xhat, xphys, wq, normals = boundary_edge_quadrature(fes, edges, fes.k + 3)
    ud = _field(u_D, xphys, "u_D")
    v, _ = fes.rt_basis(elems, xhat)
    flux = np.einsum("mqbd,md->mqb", v, normals)
    l2g = fes.rt_l2g[elems] + fes.off_sigma
    np.add.at(rhs, l2g, np.einsum("mq,mqb,mq->mb", wq, flux, ud[..., 0]))
    np.add.at(rhs, l2g + fes.n_rt, np.einsum("mq,mqb,mq->mb", wq, flux, ud[..., 1]))


# --------------------------------------------------------------- transport

def assemble_transport(fes: FESystem, cfg: ProblemConfig, u=None, phi_prev=None, *,
                       advection="lhs", degree=None, chunk=CHUNK):
    """Matrix of C (+ advection, + mass/dt) and rhs of the transport step.

    ``advection="lhs"`` keeps (grad phi) u . psi on the matrix with the
    unknown phi.  ``"rhs"`` lags it with ``phi_prev`` on the right-hand side,
    leaving a symmetric matrix.
    """
    if advection not in ("lhs", "rhs"):
        raise ConfigurationError("advection must be 'lhs' or 'rhs'")
    if u is not None and np.shape(u) != (fes.n_u,):
        raise ConfigurationError("u has the wrong length")
    K = np.asarray(cfg.K, dtype=float)
    rule = rule_for_degree(default_degree(fes.k) if degree is None else degree)
    M, nl = fes.mesh.n_triangles, fes.n_lag
    rows, cols, vals = [], [], []
    rhs = np.zeros(fes.n_phi)
    inv_dt = 1.0 / cfg.dt if cfg.dt is not None else 0.0

    for elems in _chunks(M, chunk):
        xhat = rule.points
        wq = _weights(fes, elems, rule)
        x = fes.physical_points(elems, xhat)
        v, g = fes.lagrange_basis(elems, xhat)
        uv, _ = _velocity_at(fes, u, elems, xhat)
        stiff = _gram(wq, g, g)
        mass = _gram(wq, v, v)
        adv = _gram(wq, v, np.einsum("mqd,mqjd->mqj", uv, g))
        l2g = fes.lag_l2g[elems]
        src = _field(cfg.f_phi, x, "f_phi") if cfg.f_phi is not None else None
        if advection == "rhs" or (inv_dt and cfg.phi_old is not None):
            old_vals, _ = _phi_at(fes, cfg.phi_old, elems, xhat)
        if advection == "rhs":
            _, prev_grad = _phi_at(fes, phi_prev, elems, xhat)
        for c in range(2):
            loc = K[c] * stiff + inv_dt * mass
            if advection == "lhs":
                loc = loc + adv
            dofs = l2g + c * nl
            rows.append(np.broadcast_to(dofs[:, :, None], loc.shape).ravel())
            cols.append(np.broadcast_to(dofs[:, None, :], loc.shape).ravel())
            vals.append(loc.ravel())
            load = np.zeros(v.shape[:2])
            if src is not None:
                load = load + src[..., c]
            if inv_dt and cfg.phi_old is not None:
                load = load + inv_dt * old_vals[..., c]
            if advection == "rhs":
                load = load - np.einsum("mqd,mqd->mq", prev_grad[:, :, c, :], uv)
            np.add.at(rhs, dofs, np.einsum("mq,mq,mqi->mi", wq, load, v))

    if cfg.phi_N is not None:
        _neumann_term(fes, cfg.phi_N, rhs)

    A = _to_csr(vals, rows, cols, fes.n_phi)
    if cfg.phi_D is not None:
        fixed, fixed_vals = fes.interpolate_dirichlet(cfg.phi_D)
    else:
        fixed, fixed_vals = fes.phi_fixed, np.zeros(len(fes.phi_fixed))
    return AssembledSystem(A, rhs, fixed, fixed_vals)


def _neumann_term(fes, phi_N, rhs):
    edges = fes.mesh.edges_tagged(BoundaryTag.NEUMANN_TEMP)
    if len(edges) == 0:
        return
    elems, xhat, xphys, wq, normals = boundary_edge_quadrature(fes, edges, fes.p + 3)
    n = np.broadcast_to(normals[:, None, :], xphys.shape)
    flux = _check_finite(np.asarray(phi_N(xphys, n), dtype=float), "Neumann flux")
    v, _ = fes.lagrange_basis(elems, xhat)
    l2g = fes.lag_l2g[elems]
    for c in range(2):
        np.add.at(rhs, l2g + c * fes.n_lag, np.einsum("mq,mq,mqi->mi", wq, flux[..., c], v))


def lagrange_gram(fes: FESystem):
    """Mass + stiffness matrix of the scalar Lagrange space (discrete H1 inner product)."""
    cached = getattr(fes, "_h1_gram", None)
    if cached is not None:
        return cached
    rule = rule_for_degree(2 * fes.p)
    elems = np.arange(fes.mesh.n_triangles)
    v, g = fes.lagrange_basis(elems, rule.points)
    wq = _weights(fes, elems, rule)
    loc = np.einsum("mq,mqi,mqj->mij", wq, v, v) + np.einsum("mq,mqid,mqjd->mij", wq, g, g)
    l2g = fes.lag_l2g
    G = _to_csr(
        [loc.ravel()],
        [np.broadcast_to(l2g[:, :, None], loc.shape).ravel()],
        [np.broadcast_to(l2g[:, None, :], loc.shape).ravel()],
        fes.n_lag,
    )
    fes._h1_gram = G
    return G


def h1_norm(fes: FESystem, coeffs):
    """Discrete H1 norm of a two-component Lagrange coefficient vector."""
    G = lagrange_gram(fes)
    n = fes.n_lag
    a, b = coeffs[:n], coeffs[n:]
    return float(np.sqrt(max(a @ (G @ a) + b @ (G @ b), 0.0)))


# ------------------------------------------------------------ time stepping

def apply_backward_euler(cfg: ProblemConfig, dt, u_old, phi_old) -> ProblemConfig:
    """Configuration of one backward Euler step from (u_old, phi_old).

    The reaction coefficient becomes gamma + 1/dt wherever gamma appears,
    the momentum source gains u_old/dt, and transport gains the mass term
    with phi_old/dt on the right-hand side.
    """
    if dt is None or not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    return cfg.with_(
        dt=float(dt),
        u_old=np.asarray(u_old, dtype=float),
        phi_old=np.asarray(phi_old, dtype=float),
    )


# ---------------------------------------------------------------- residual

@dataclass
class Residual:
    flow: np.ndarray
    transport: np.ndarray
    flow_scale: float
    transport_scale: float

    @property
    def relative(self):
        """Largest of the two relative sup-norm residuals."""
        rf = np.abs(self.flow).max(initial=0.0) / self.flow_scale
        rt = np.abs(self.transport).max(initial=0.0) / self.transport_scale
        return float(max(rf, rt))


def _scale(b):
    s = float(np.abs(b).max(initial=0.0))
    return s if s > 0 else 1.0


def residual(fes: FESystem, cfg: ProblemConfig, state: CoupledState, **kw) -> Residual:
    """Residual of the coupled nonlinear system at ``state`` (free rows only).

    The flow rows use (phi, w) = (state.phi, state.u) and the transport rows
    use the state's own velocity; scales are the sup norms of the reduced
    right-hand sides.
    """
    flow = assemble_flow(fes, cfg, state.phi, state.u, **kw)
    trans = assemble_transport(fes, cfg, state.u, state.phi, **kw)
    _, bf = flow.reduced()
    _, bt = trans.reduced()
    return Residual(
        flow.free_residual(state.flow),
        trans.free_residual(state.phi),
        _scale(bf),
        _scale(bt),
    )
