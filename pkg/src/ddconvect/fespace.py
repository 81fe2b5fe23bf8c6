"""Reference elements and global numbering for the four discrete spaces.

* strain: discontinuous P_k, two independent entries (t11, t12) of a
  symmetric trace-free 2x2 tensor, t22 = -t11 built in;
* pseudo-stress: two Raviart-Thomas RT_k fields, one per tensor row;
* velocity and temperature/concentration: continuous P_{k+1} Lagrange.

Raviart-Thomas degrees of freedom are point values of the normal
component at the k+1 Gauss points of each edge (normal and point order
fixed by the global edge direction, lower to higher vertex index) plus
interior moments against P_{k-1}^2.  Physical shape functions come from
the contravariant Piola map of a reference basis.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import ConfigurationError, EvaluationError, GeometryError, UnsupportedDegreeError
from .mesh import BoundaryTag, Mesh
from .quadrature import gauss_legendre_01, rule_for_degree

SUPPORTED_K = (0, 1, 2)

_REF_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
# local edge i runs from vertex (i+1)%3 to (i+2)%3 and is opposite vertex i
_LOCAL_EDGES = ((1, 2), (2, 0), (0, 1))

DEV_EPS = 1e-14


def dim_p(k):
    return (k + 1) * (k + 2) // 2


def dim_rt(k):
    return (k + 1) * (k + 3)


# ---------------------------------------------------------------- polynomials

@lru_cache(maxsize=None)
def _exponents(deg):
    return tuple((a, d - a) for d in range(deg + 1) for a in range(d, -1, -1))


def _monomials(exps, x):
    """Monomial values and gradients at points ``x[..., 2]``."""
    X, Y = x[..., 0], x[..., 1]
    top = max(max(a, b) for a, b in exps) + 1
    px = [np.ones_like(X)]
    py = [np.ones_like(Y)]
    for _ in range(top):
        px.append(px[-1] * X)
        py.append(py[-1] * Y)
    val = np.stack([px[a] * py[b] for a, b in exps], axis=-1)
    zero = np.zeros_like(X)
    dx = np.stack([a * px[a - 1] * py[b] if a else zero for a, b in exps], axis=-1)
    dy = np.stack([b * px[a] * py[b - 1] if b else zero for a, b in exps], axis=-1)
    return val, np.stack([dx, dy], axis=-1)


class PolynomialBasis:
    """Reference basis stored as coefficients on monomials of degree <= deg.

    ``coef`` has shape (n_basis, n_components, n_monomials).
    """

    def __init__(self, deg, coef):
        self.deg = deg
        self.exps = _exponents(deg)
        self.coef = coef

    def __len__(self):
        return self.coef.shape[0]

    def values(self, x):
        val, _ = _monomials(self.exps, x)
        return np.einsum("...m,bcm->...bc", val, self.coef)

    def gradients(self, x):
        _, grad = _monomials(self.exps, x)
        return np.einsum("...md,bcm->...bcd", grad, self.coef)


def lattice_nodes(p):
    """Reference Lagrange nodes of degree p: vertices, edge nodes, interior."""
    if p == 0:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]])
    nodes = [*_REF_VERTS]
    for a, b in _LOCAL_EDGES:
        for j in range(1, p):
            nodes.append(_REF_VERTS[a] + j / p * (_REF_VERTS[b] - _REF_VERTS[a]))
    for j in range(1, p):
        for i in range(1, p - j):
            nodes.append(np.array([i / p, j / p]))
    return np.array(nodes)


@lru_cache(maxsize=None)
def lagrange_reference(p) -> PolynomialBasis:
    exps = _exponents(p)
    V, _ = _monomials(exps, lattice_nodes(p))
    coef = np.linalg.inv(V).T[:, None, :]
    return PolynomialBasis(p, coef)


def _rt_candidates(k):
    """Vector monomials spanning P_k^2 + x * homogeneous P_k, on degree k+1 monomials."""
    exps = _exponents(k + 1)
    pos = {e: i for i, e in enumerate(exps)}
    cands = []
    for a, b in _exponents(k):
        for c in range(2):
            v = np.zeros((2, len(exps)))
            v[c, pos[(a, b)]] = 1.0
            cands.append(v)
    for a, b in _exponents(k):
        if a + b == k:
            v = np.zeros((2, len(exps)))
            v[0, pos[(a + 1, b)]] = 1.0
            v[1, pos[(a, b + 1)]] = 1.0
            cands.append(v)
    return np.array(cands)


def _ref_edge_geometry(i):
    a, b = _LOCAL_EDGES[i]
    t = _REF_VERTS[b] - _REF_VERTS[a]
    length = np.hypot(*t)
    normal = np.array([t[1], -t[0]]) / length
    return _REF_VERTS[a], t, normal, length


@lru_cache(maxsize=None)
def rt_reference(k) -> PolynomialBasis:
    """Reference RT_k basis dual to (normal value * |edge|) at edge Gauss points
    and interior moments against P_{k-1}^2."""
    cands = PolynomialBasis(k + 1, _rt_candidates(k))
    n = len(cands)
    D = np.zeros((n, n))
    s, _ = gauss_legendre_01(k + 1)
    row = 0
    for i in range(3):
        start, t, normal, length = _ref_edge_geometry(i)
        pts = start + s[:, None] * t
        vals = cands.values(pts)  # (q, n, 2)
        D[row:row + k + 1] = length * vals @ normal
        row += k + 1
    if k > 0:
        rule = rule_for_degree(2 * k + 1)
        vals = cands.values(rule.points)  # (q, n, 2)
        mono, _ = _monomials(_exponents(k - 1), rule.points)  # (q, nm)
        for m in range(mono.shape[1]):
            for c in range(2):
                D[row] = np.einsum("q,q,qn->n", rule.weights, mono[:, m], vals[:, :, c])
                row += 1
    assert row == n
    inv = np.linalg.inv(D)
    coef = np.einsum("jl,jcm->lcm", inv, cands.coef)
    return PolynomialBasis(k + 1, coef)


# ------------------------------------------------------------ tensor helpers

def dev(T):
    """Deviatoric part of 2x2 tensors stored in the last two axes."""
    tr = T[..., 0, 0] + T[..., 1, 1]
    out = T.copy()
    out[..., 0, 0] -= 0.5 * tr
    out[..., 1, 1] -= 0.5 * tr
    return out


def sym(T):
    return 0.5 * (T + np.swapaxes(T, -1, -2))


def skew(T):
    return 0.5 * (T - np.swapaxes(T, -1, -2))


STRAIN_UNITS = np.array([[[1.0, 0.0], [0.0, -1.0]], [[0.0, 1.0], [1.0, 0.0]]])


# ------------------------------------------------------------- single element

def _check_inside(triangle, point, tol=1e-12):
    tri = np.asarray(triangle, dtype=float)
    J = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    det = np.linalg.det(J)
    if abs(det) <= 1e-14 * max(np.abs(J).max(), 1e-300) ** 2:
        raise GeometryError("degenerate triangle")
    xhat = np.linalg.solve(J, np.asarray(point, dtype=float) - tri[0])
    if xhat.min() < -tol or xhat.sum() > 1 + tol:
        raise EvaluationError(f"point {point} lies outside the triangle")
    return J, det, xhat


def eval_lagrange_basis(degree, triangle, point):
    """Nodal P_degree basis of one triangle at one point: (values, gradients)."""
    if degree < 0 or degree > 3:
        raise UnsupportedDegreeError(f"Lagrange degree {degree} not supported")
    J, _, xhat = _check_inside(triangle, point)
    ref = lagrange_reference(degree)
    vals = ref.values(xhat)[:, 0]
    grads = ref.gradients(xhat)[:, 0, :] @ np.linalg.inv(J)
    return vals, grads


def eval_strain_basis(k, triangle, point):
    """Symmetric trace-free 2x2 basis tensors (2 * dim P_k of them)."""
    vals, _ = eval_lagrange_basis(k, triangle, point)
    return [v * U for U in STRAIN_UNITS for v in vals]


def eval_rt_basis(k, triangle, point):
    """RT_k shape functions of one triangle, local edge orientation.

    Edge functions have unit outward normal component at their own Gauss
    point and zero at the others.  Returns (values (n, 2), divergences (n,)).
    """
    if k not in SUPPORTED_K:
        raise UnsupportedDegreeError(f"RT_{k} not supported")
    tri = np.asarray(triangle, dtype=float)
    J, det, xhat = _check_inside(tri, point)
    ref = rt_reference(k)
    v = ref.values(xhat)
    g = ref.gradients(xhat)
    vals = v @ J.T / det
    divs = (g[:, 0, 0] + g[:, 1, 1]) / det
    scale = np.ones(len(ref))
    for i, (a, b) in enumerate(_LOCAL_EDGES):
        scale[i * (k + 1):(i + 1) * (k + 1)] = np.hypot(*(tri[b] - tri[a]))
    return vals * scale[:, None], divs * scale


# ------------------------------------------------------------------ the system

@dataclass(frozen=True)
class Geometry:
    v0: np.ndarray
    J: np.ndarray
    det: np.ndarray
    invJ: np.ndarray

    def to_physical(self, xhat):
        return self.v0[:, None, :] + np.einsum("mij,mqj->mqi", self.J, xhat)


def _as_batch(xhat, m):
    xhat = np.asarray(xhat, dtype=float)
    if xhat.ndim == 2:
        return np.broadcast_to(xhat[None], (m,) + xhat.shape)
    return xhat


class FESystem:
    """Degree-k discrete spaces on a mesh with global numbering.

    Flow unknowns are laid out as ``[t | sigma row 1 | sigma row 2 |
    u_1 | u_2 | lambda]`` and transport unknowns as ``[phi_1 | phi_2]``.
    Velocity and transport vectors always carry their boundary values;
    constrained entries are eliminated at solve time.
    """

    def __init__(self, mesh: Mesh, k: int):
        if k not in SUPPORTED_K:
            raise UnsupportedDegreeError(f"k={k} not supported (use 0, 1 or 2)")
        self.mesh = mesh
        self.k = k
        self.p = k + 1
        M, E, V = mesh.n_triangles, mesh.n_edges, mesh.n_vertices

        self.dk = dim_p(k)
        self.n_t = 2 * self.dk * M
        self.rt_loc = dim_rt(k)
        self.rt_int = k * (k + 1)
        self.n_rt = E * (k + 1) + M * self.rt_int
        self.n_sigma = 2 * self.n_rt
        p = self.p
        self.lag_int = (p - 1) * (p - 2) // 2
        self.lag_loc = dim_p(p)
        self.n_lag = V + E * (p - 1) + M * self.lag_int
        self.n_u = 2 * self.n_lag
        self.n_phi = 2 * self.n_lag

        self.off_t = 0
        self.off_sigma = self.n_t
        self.off_u = self.n_t + self.n_sigma
        self.off_lambda = self.off_u + self.n_u
        self.n_flow = self.off_lambda + 1

        self._build_geometry()
        self._build_lagrange_map()
        self._build_rt_map()

    # ---------------------------------------------------------------- setup
    def _build_geometry(self):
        P = self.mesh.vertices[self.mesh.triangles]
        J = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=-1)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            raise GeometryError("mesh contains degenerate or clockwise triangles")
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1] / det
        invJ[:, 1, 1] = J[:, 0, 0] / det
        invJ[:, 0, 1] = -J[:, 0, 1] / det
        invJ[:, 1, 0] = -J[:, 1, 0] / det
        self.geom = Geometry(P[:, 0], J, det, invJ)

    def _local_orientation(self):
        t = self.mesh.triangles
        agree = np.empty((len(t), 3), dtype=bool)
        for i, (a, b) in enumerate(_LOCAL_EDGES):
            agree[:, i] = t[:, a] < t[:, b]
        return agree

    def _build_lagrange_map(self):
        mesh, p = self.mesh, self.p
        M, V, E = mesh.n_triangles, mesh.n_vertices, mesh.n_edges
        agree = self._local_orientation()
        l2g = np.empty((M, self.lag_loc), dtype=np.int64)
        l2g[:, :3] = mesh.triangles
        col = 3
        for i in range(3):
            e = mesh.tri_edges[:, i]
            for j in range(p - 1):
                jg = np.where(agree[:, i], j, p - 2 - j)
                l2g[:, col] = V + e * (p - 1) + jg
                col += 1
        for j in range(self.lag_int):
            l2g[:, col] = V + E * (p - 1) + np.arange(M) * self.lag_int + j
            col += 1
        self.lag_l2g = l2g
        coords = np.empty((self.n_lag, 2))
        ref_nodes = lattice_nodes(p)
        phys = self.geom.to_physical(_as_batch(ref_nodes, M))
        coords[l2g.ravel()] = phys.reshape(-1, 2)
        self.lag_coords = coords

        def nodes_on(edges):
            if len(edges) == 0:
                return np.zeros(0, dtype=np.int64)
            ids = [mesh.edges[edges].ravel()]
            if p > 1:
                ids.append((V + edges[:, None] * (p - 1) + np.arange(p - 1)).ravel())
            return np.unique(np.concatenate(ids))

        self.boundary_nodes = nodes_on(mesh.boundary_edges)
        self.dirichlet_nodes = nodes_on(mesh.edges_tagged(BoundaryTag.DIRICHLET_TEMP))

    def _build_rt_map(self):
        mesh, k = self.mesh, self.k
        M, E = mesh.n_triangles, mesh.n_edges
        agree = self._local_orientation()
        lengths = mesh.edge_lengths()
        l2g = np.empty((M, self.rt_loc), dtype=np.int64)
        scale = np.ones((M, self.rt_loc))
        col = 0
        for i in range(3):
            e = mesh.tri_edges[:, i]
            for j in range(k + 1):
                jg = np.where(agree[:, i], j, k - j)
                l2g[:, col] = e * (k + 1) + jg
                scale[:, col] = np.where(agree[:, i], 1.0, -1.0) * lengths[e]
                col += 1
        for j in range(self.rt_int):
            l2g[:, col] = E * (k + 1) + np.arange(M) * self.rt_int + j
            col += 1
        self.rt_l2g = l2g
        self.rt_scale = scale

    # ------------------------------------------------------------- indices
    def strain_dofs(self, elems=None):
        """Global flow indices of the local strain basis, shape (m, 2*dk)."""
        elems = np.arange(self.mesh.n_triangles) if elems is None else np.asarray(elems)
        return self.off_t + elems[:, None] * (2 * self.dk) + np.arange(2 * self.dk)

    def sigma_dofs(self, elems=None):
        l2g = self.rt_l2g if elems is None else self.rt_l2g[elems]
        return self.off_sigma + np.concatenate([l2g, l2g + self.n_rt], axis=1)

    def velocity_dofs(self, elems=None):
        l2g = self.lag_l2g if elems is None else self.lag_l2g[elems]
        return self.off_u + np.concatenate([l2g, l2g + self.n_lag], axis=1)

    def phi_dofs(self, elems=None):
        l2g = self.lag_l2g if elems is None else self.lag_l2g[elems]
        return np.concatenate([l2g, l2g + self.n_lag], axis=1)

    def flow_dofs(self, elems=None):
        return np.concatenate(
            [self.strain_dofs(elems), self.sigma_dofs(elems), self.velocity_dofs(elems)], axis=1
        )

    @cached_property
    def velocity_fixed(self):
        """Flow indices of velocity DOFs on the boundary (both components)."""
        b = self.boundary_nodes
        return self.off_u + np.concatenate([b, b + self.n_lag])

    @cached_property
    def phi_fixed(self):
        d = self.dirichlet_nodes
        return np.concatenate([d, d + self.n_lag])

    @property
    def n_total(self):
        """Flow plus transport unknowns, multiplier included."""
        return self.n_flow + self.n_phi

    def dof_counts(self):
        return {
            "t": self.n_t,
            "sigma": self.n_sigma,
            "u": self.n_u,
            "lambda": 1,
            "flow": self.n_flow,
            "phi": self.n_phi,
            "total": self.n_total,
        }

    # ---------------------------------------------------------- evaluation
    def physical_points(self, elems, xhat):
        """Images (m,q,2) of reference points under the element maps."""
        elems = np.asarray(elems)
        xhat = _as_batch(xhat, len(elems))
        g = self.geom
        return g.v0[elems][:, None, :] + np.einsum("mij,mqj->mqi", g.J[elems], xhat)

    @staticmethod
    def _reference_eval(ref, elems, xhat, what):
        """Reference values or gradients, evaluated once when points are shared."""
        xhat = np.asarray(xhat, dtype=float)
        fn = ref.values if what == "values" else ref.gradients
        if xhat.ndim == 2:
            out = fn(xhat)
            return np.broadcast_to(out[None], (len(elems),) + out.shape)
        return fn(xhat)

    def lagrange_basis(self, elems, xhat):
        """Scalar P_{k+1} basis: values (m,q,b) and physical gradients (m,q,b,2)."""
        elems = np.asarray(elems)
        ref = lagrange_reference(self.p)
        vals = self._reference_eval(ref, elems, xhat, "values")[..., 0]
        g = self._reference_eval(ref, elems, xhat, "gradients")[..., 0, :]
        invJ = self.geom.invJ[elems]
        grads = g[..., 0, None] * invJ[:, None, None, 0, :] + g[..., 1, None] * invJ[:, None, None, 1, :]
        return vals, grads

    def strain_scalar_basis(self, elems, xhat):
        elems = np.asarray(elems)
        return self._reference_eval(lagrange_reference(self.k), elems, xhat, "values")[..., 0]

    def strain_basis(self, elems, xhat):
        """Tensor values of the local strain basis, shape (m,q,2*dk,2,2)."""
        s = self.strain_scalar_basis(elems, xhat)
        return np.concatenate(
            [s[..., None, None] * STRAIN_UNITS[0], s[..., None, None] * STRAIN_UNITS[1]], axis=2
        )

    def rt_basis(self, elems, xhat):
        """Piola-mapped RT_k basis with global orientation: values (m,q,b,2), div (m,q,b)."""
        elems = np.asarray(elems)
        ref = rt_reference(self.k)
        v = self._reference_eval(ref, elems, xhat, "values")
        g = self._reference_eval(ref, elems, xhat, "gradients")
        det = self.geom.det[elems]
        sc = self.rt_scale[elems] / det[:, None]
        J = self.geom.J[elems]
        vals = v[..., 0, None] * J[:, None, None, :, 0] + v[..., 1, None] * J[:, None, None, :, 1]
        vals = vals * sc[:, None, :, None]
        divs = (g[..., 0, 0] + g[..., 1, 1]) * sc[:, None, :]
        return vals, divs

    def sigma_basis(self, elems, xhat):
        """Both rows: tensor values (m,q,2*nrt,2,2) and row divergences (m,q,2*nrt,2)."""
        v, d = self.rt_basis(elems, xhat)
        m, q, b, _ = v.shape
        vals = np.zeros((m, q, 2 * b, 2, 2))
        divs = np.zeros((m, q, 2 * b, 2))
        vals[:, :, :b, 0, :] = v
        vals[:, :, b:, 1, :] = v
        divs[:, :, :b, 0] = d
        divs[:, :, b:, 1] = d
        return vals, divs

    def vector_lagrange_basis(self, elems, xhat):
        """Two-component P_{k+1} basis: values (m,q,2b,2), gradients (m,q,2b,2,2)."""
        v, g = self.lagrange_basis(elems, xhat)
        m, q, b = v.shape
        vals = np.zeros((m, q, 2 * b, 2))
        grads = np.zeros((m, q, 2 * b, 2, 2))
        vals[:, :, :b, 0] = v
        vals[:, :, b:, 1] = v
        grads[:, :, :b, 0, :] = g
        grads[:, :, b:, 1, :] = g
        return vals, grads

    # fields ----------------------------------------------------------------
    def eval_strain(self, t, elems, xhat):
        c = t[self.strain_dofs(elems) - self.off_t]
        return np.einsum("mqbij,mb->mqij", self.strain_basis(elems, xhat), c)

    def eval_sigma(self, sigma, elems, xhat):
        """Tensor values (m,q,2,2) and row divergences (m,q,2)."""
        elems = np.asarray(elems)
        v, d = self.rt_basis(elems, xhat)
        l2g = self.rt_l2g[elems]
        c = np.stack([sigma[l2g], sigma[l2g + self.n_rt]], axis=1)  # (m, 2, b)
        vals = np.einsum("mqbj,mrb->mqrj", v, c)
        divs = np.einsum("mqb,mrb->mqr", d, c)
        return vals, divs

    def eval_vector(self, coeffs, elems, xhat):
        """Values (m,q,2) and gradients (m,q,2,2) of a two-component Lagrange field."""
        elems = np.asarray(elems)
        v, g = self.lagrange_basis(elems, xhat)
        l2g = self.lag_l2g[elems]
        c = np.stack([coeffs[l2g], coeffs[l2g + self.n_lag]], axis=1)  # (m, 2, b)
        return np.einsum("mqb,mcb->mqc", v, c), np.einsum("mqbd,mcb->mqcd", g, c)

    # interpolation ---------------------------------------------------------
    def interpolate_vector(self, f):
        """Nodal interpolant of f: R^2 -> R^2 into the two-component Lagrange space."""
        vals = np.asarray(f(self.lag_coords), dtype=float)
        if vals.shape != (self.n_lag, 2):
            raise ConfigurationError("vector field must return an (n, 2) array")
        return np.concatenate([vals[:, 0], vals[:, 1]])

    def interpolate_dirichlet(self, phi_D):
        """Nodal values of the temperature/concentration data at Dirichlet nodes.

        Returns ``(indices, values)`` in transport numbering.
        """
        nodes = self.dirichlet_nodes
        vals = np.asarray(phi_D(self.lag_coords[nodes]), dtype=float)
        if vals.shape != (len(nodes), 2) or not np.all(np.isfinite(vals)):
            raise ConfigurationError("Dirichlet data undefined at some boundary nodes")
        return self.phi_fixed, np.concatenate([vals[:, 0], vals[:, 1]])

    def interpolate_wall(self, u_D=None):
        """Boundary velocity values (flow numbering); zero unless u_D is given."""
        nodes = self.boundary_nodes
        if u_D is None:
            return self.velocity_fixed, np.zeros(2 * len(nodes))
        vals = np.asarray(u_D(self.lag_coords[nodes]), dtype=float)
        return self.velocity_fixed, np.concatenate([vals[:, 0], vals[:, 1]])

    def mean_trace_row(self, degree=None):
        """Vector r with r @ sigma = integral of tr(sigma_h)."""
        rule = rule_for_degree(self.k + 1 if degree is None else degree)
        elems = np.arange(self.mesh.n_triangles)
        v, _ = self.rt_basis(elems, rule.points)
        w = rule.weights[None, :] * self.geom.det[:, None]
        row = np.zeros(self.n_sigma)
        l2g = self.rt_l2g
        np.add.at(row, l2g, np.einsum("mq,mqb->mb", w, v[..., 0]))
        np.add.at(row, l2g + self.n_rt, np.einsum("mq,mqb->mb", w, v[..., 1]))
        return row


def build_system(mesh: Mesh, k: int) -> FESystem:
    return FESystem(mesh, k)


def paper_dof_count(mesh: Mesh, k: int) -> int:
    """Total unknown count by the closed-form node/edge/element formula."""
    return (
        4 * mesh.n_vertices
        + (2 * (k + 1) + 4 * k) * mesh.n_edges
        + ((k + 1) * (k + 2) + 2 * k * (k + 1) + 2 * k * (k - 1)) * mesh.n_triangles
        + 1
    )
