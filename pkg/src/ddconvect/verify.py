"""Error norms, experimental orders of convergence and convergence tables."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .assembly import default_degree
from .benchmarks import Benchmark, get_benchmark
from .errors import ConfigurationError, SolverError
from .exact import ExactSolution
from .fespace import FESystem, paper_dof_count
from .mesh import build_mesh, refine_uniform
from .quadrature import rule_for_degree
from .solver import FixedPointConfig, recover_pressure, solve_coupled, time_march
from .state import CoupledState

log = logging.getLogger(__name__)

FIELDS = ("t", "sig", "u", "phi", "p")
CSV_HEADER = ["k", "h", "N"] + [f"{p}_{f}" for f in FIELDS for p in ("e", "r")]


@dataclass
class ErrorNorms:
    """e(t) in L2, e(sigma) in H(div), e(u) and e(phi) in H1, e(p) in L2."""

    t: float
    sig: float
    u: float
    phi: float
    p: float

    def as_tuple(self):
        return (self.t, self.sig, self.u, self.phi, self.p)


def discrete_fields(fes: FESystem, state: CoupledState, elems, xhat, pressure=None):
    """Values of every discrete field at reference points of ``elems``."""
    S, divS = fes.eval_sigma(state.sigma, elems, xhat)
    u, gu = fes.eval_vector(state.u, elems, xhat)
    phi, gphi = fes.eval_vector(state.phi, elems, xhat)
    pressure = pressure or recover_pressure(fes, state)
    return dict(
        t=fes.eval_strain(state.t, elems, xhat), S=S, divS=divS, u=u, gu=gu,
        phi=phi, gphi=gphi, p=pressure(elems, xhat),
    )


def exact_fields(ex: ExactSolution, x):
    return dict(
        t=ex.t(x), S=ex.sigma(x), divS=ex.div_sigma(x), u=ex.u(x), gu=ex.grad_u(x),
        phi=ex.phi(x), gphi=ex.grad_phi(x), p=ex.p(x),
    )


def _norms(w, a, b):
    def sq(key, axes):
        d = a[key] - b[key]
        return np.sum(w * np.sum(d ** 2, axis=axes)) if axes else np.sum(w * d ** 2)

    return ErrorNorms(
        t=math.sqrt(sq("t", (-2, -1))),
        sig=math.sqrt(sq("S", (-2, -1)) + sq("divS", -1)),
        u=math.sqrt(sq("u", -1) + sq("gu", (-2, -1))),
        phi=math.sqrt(sq("phi", -1) + sq("gphi", (-2, -1))),
        p=math.sqrt(sq("p", None)),
    )


def error_norms(fes: FESystem, state: CoupledState, exact: ExactSolution, degree=None):
    """Errors of ``state`` against the closed-form solution ``exact``."""
    rule = rule_for_degree(default_degree(fes.k) if degree is None else degree)
    elems = np.arange(fes.mesh.n_triangles)
    x = fes.physical_points(elems, rule.points)
    w = rule.weights[None, :] * fes.geom.det[:, None]
    return _norms(w, discrete_fields(fes, state, elems, rule.points), exact_fields(exact, x))


def locate_reference(fes: FESystem, points):
    """Element index and reference coordinates of physical points (n, 2)."""
    elems = fes.mesh.locate(points)
    if np.any(elems < 0):
        raise ConfigurationError("points outside the mesh")
    xhat = np.einsum("mij,mj->mi", fes.geom.invJ[elems], points - fes.geom.v0[elems])
    return elems, np.clip(xhat, 0.0, 1.0)[:, None, :]


def reference_error_norms(fes: FESystem, state: CoupledState, ref_fes: FESystem,
                          ref_state: CoupledState, degree=None):
    """Errors of a coarse ``state`` against a discrete reference on a finer mesh.

    Integrals run over the reference mesh; coarse fields are evaluated at
    its quadrature points by point location, which is exact on nested meshes.
    """
    rule = rule_for_degree(default_degree(ref_fes.k) if degree is None else degree)
    elems = np.arange(ref_fes.mesh.n_triangles)
    x = ref_fes.physical_points(elems, rule.points)
    w = rule.weights[None, :] * ref_fes.geom.det[:, None]
    fine = discrete_fields(ref_fes, ref_state, elems, rule.points)
    ce, cx = locate_reference(fes, x.reshape(-1, 2))
    coarse = discrete_fields(fes, state, ce, cx)
    shape = x.shape[:2]
    coarse = {k: v.reshape(shape + v.shape[2:]) for k, v in coarse.items()}
    return _norms(w, coarse, fine)


def eoc(e, e_prime, h, h_prime):
    """log(e / e') / log(h / h')."""
    if min(e, e_prime, h, h_prime) <= 0:
        raise ConfigurationError("errors and mesh sizes must be positive")
    if h == h_prime:
        raise ConfigurationError("mesh sizes must differ")
    return math.log(e / e_prime) / math.log(h / h_prime)


@dataclass
class ConvergenceRow:
    k: int
    h: float
    N: int
    e_t: float
    e_sig: float
    e_u: float
    e_phi: float
    e_p: float
    r_t: Optional[float] = None
    r_sig: Optional[float] = None
    r_u: Optional[float] = None
    r_phi: Optional[float] = None
    r_p: Optional[float] = None
    paper_N: int = 0
    outer_iterations: int = 0
    newton_iterations: int = 0
    residual: Optional[float] = None
    increment: Optional[float] = None
    pressure_mean: Optional[float] = None
    pressure_norm: Optional[float] = None

    def errors(self):
        return tuple(getattr(self, f"e_{f}") for f in FIELDS)

    def rates(self):
        return tuple(getattr(self, f"r_{f}") for f in FIELDS)


def fill_rates(rows: List[ConvergenceRow]):
    for prev, row in zip(rows, rows[1:]):
        for f in FIELDS:
            e0, e1 = getattr(prev, f"e_{f}"), getattr(row, f"e_{f}")
            if e0 > 0 and e1 > 0:
                setattr(row, f"r_{f}", eoc(e0, e1, prev.h, row.h))
    return rows


def _fmt(v, full):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v)) if full else f"{float(v):.2e}"


def _rate_fmt(v, full):
    if v is None:
        return ""
    return repr(float(v)) if full else f"{float(v):.2f}"


def write_csv(rows: List[ConvergenceRow], path):
    """``path`` with 3 significant digits and ``<stem>.full.csv`` at full precision."""
    path = str(path)
    full_path = path[:-4] + ".full.csv" if path.endswith(".csv") else path + ".full.csv"
    for target, full in ((path, False), (full_path, True)):
        with open(target, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_HEADER)
            for r in rows:
                line = [str(r.k), _fmt(r.h, full), str(r.N)]
                for f in FIELDS:
                    line += [_fmt(getattr(r, f"e_{f}"), full), _rate_fmt(getattr(r, f"r_{f}"), full)]
                wr.writerow(line)
    return path, full_path


# ------------------------------------------------------------------ studies

@dataclass
class LevelResult:
    resolution: int
    fes: FESystem
    state: CoupledState
    row: ConvergenceRow
    history: object = None
    steps: list = field(default_factory=list)


def level_meshes(bench: Benchmark, levels, coarse=None, resolutions=None):
    """Meshes of a convergence study, coarsest first.

    An explicit list of ``resolutions`` builds each mesh directly.  Without
    one, a benchmark with a default sequence uses its first ``levels``
    entries unless ``coarse`` is given; otherwise the coarsest mesh is
    refined ``levels - 1`` times, giving nested meshes.
    """
    if resolutions is None and coarse is None and bench.resolutions is not None:
        if levels > len(bench.resolutions):
            raise ConfigurationError(
                f"example {bench.example} defines {len(bench.resolutions)} levels, got {levels}")
        resolutions = bench.resolutions[:levels]
    if resolutions is not None:
        res = [int(r) for r in resolutions]
        if len(res) != levels or any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigurationError("resolutions must be increasing, one per level")
        return [build_mesh(bench.domain(r)) for r in res]
    n0 = bench.coarse if coarse is None else coarse
    mesh = build_mesh(bench.domain(n0))
    out = [mesh]
    for _ in range(levels - 1):
        out.append(refine_uniform(out[-1]))
    return out


def _base_row(fes, k, hist, state):
    pm, pn = recover_pressure(fes, state).mean_and_norm()
    return dict(
        k=k, h=fes.mesh.h, N=fes.n_total, paper_N=paper_dof_count(fes.mesh, k),
        outer_iterations=hist.outer_iterations,
        newton_iterations=int(sum(hist.newton_iterations)),
        residual=hist.residual,
        increment=hist.increments[-1] if hist.increments else None,
        pressure_mean=pm, pressure_norm=pn,
    )


def _solve_stationary(bench, mesh, k, fp):
    fes = FESystem(mesh, k)
    state, hist = solve_coupled(fes, bench.config, fp)
    return fes, state, hist


def _solve_transient(bench, mesh, k, fp, steps):
    fes = FESystem(mesh, k)
    out = time_march(fes, bench.config, bench.dt, steps * bench.dt, bench.u0, bench.phi0, fp,
                     stride=1)
    last = out[-1]
    return fes, last.state, last.history, out


def convergence_study(example, k, levels, fp=None, coarse=None, steps=None, jobs=1,
                      keep_steps=False, resolutions=None):
    """Run an experiment on ``levels`` nested meshes and tabulate errors and EOCs.

    Stationary examples compare with their exact solution.  Example 3 runs
    ``steps`` backward Euler steps (default up to its final time) and uses
    the finest level as reference, so it returns ``levels - 1`` rows.
    """
    if levels < 2:
        raise ConfigurationError("a convergence study needs at least 2 levels")
    bench = example if isinstance(example, Benchmark) else get_benchmark(example)
    fp = fp or FixedPointConfig()
    meshes = level_meshes(bench, levels, coarse, resolutions)
    transient = bench.exact is None
    if transient and steps is None:
        steps = int(round(bench.t_final / bench.dt))

    def run(i):
        try:
            if transient:
                return _solve_transient(bench, meshes[i], k, fp, steps)
            return _solve_stationary(bench, meshes[i], k, fp) + (None,)
        except SolverError as exc:
            raise SolverError(f"level {i} (h={meshes[i].h:.4g}): {exc}",
                              exc.history, exc.last) from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            solved = list(pool.map(run, range(levels)))
    else:
        solved = [run(i) for i in range(levels)]

    results = []
    ref_fes, ref_state = solved[-1][0], solved[-1][1]
    for i, (fes, state, hist, steps_out) in enumerate(solved):
        if transient and i == levels - 1:
            break
        if transient:
            err = reference_error_norms(fes, state, ref_fes, ref_state)
        else:
            err = error_norms(fes, state, bench.exact)
        row = ConvergenceRow(
            e_t=err.t, e_sig=err.sig, e_u=err.u, e_phi=err.phi, e_p=err.p,
            **_base_row(fes, k, hist, state),
        )
        results.append(LevelResult(meshes[i].n_triangles, fes, state, row, hist,
                                   steps_out if keep_steps else []))
    fill_rates([r.row for r in results])
    if transient:
        results.append(LevelResult(meshes[-1].n_triangles, ref_fes, ref_state, None,
                                   solved[-1][2], solved[-1][3] if keep_steps else []))
    return results


def rows_of(results):
    return [r.row for r in results if r.row is not None]


def row_dict(row: ConvergenceRow):
    return asdict(row)
