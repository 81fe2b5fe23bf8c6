"""Fixed-point driver, flow and transport subsolvers, pressure recovery
and backward Euler time marching."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from .assembly import (
    apply_backward_euler, assemble_flow, assemble_transport, h1_norm, residual,
)
from .errors import ConfigurationError, SolverError
from .fespace import FESystem
from .linalg import (
    KRYLOV_MAXITER, KRYLOV_TOL, ilu_preconditioner, jacobi_preconditioner, solve,
)
from .problem import ProblemConfig
from .quadrature import rule_for_degree
from .state import CoupledState

log = logging.getLogger(__name__)


class FlowMode(str, Enum):
    NEWTON = "newton"
    PICARD = "picard"


@dataclass(frozen=True)
class FixedPointConfig:
    """Controls of the outer fixed-point loop and its subsolvers.

    ``linear_solver`` is ``"direct"`` (sparse LU), ``"bicgstab"`` (flow and
    transport) or ``"krylov"`` (BiCGSTAB for flow, CG for transport when
    the transport matrix is symmetric, BiCGSTAB otherwise).
    """

    tol: float = 1e-6
    max_outer: int = 100
    mode: FlowMode = FlowMode.NEWTON
    newton_tol: float = 1e-10
    newton_max: int = 20
    divergence_window: int = 5
    divergence_limit: float = 1e12
    min_step: float = 1.0 / 64.0
    advection: str = "lhs"
    linear_solver: str = "direct"
    krylov_tol: float = KRYLOV_TOL
    krylov_max_iter: int = KRYLOV_MAXITER
    certify: bool = True

    def __post_init__(self):
        if not (self.tol > 0 and self.newton_tol > 0):
            raise ConfigurationError("tolerances must be positive")
        if self.max_outer < 1 or self.newton_max < 1:
            raise ConfigurationError("iteration limits must be positive")
        if not 0 < self.min_step <= 1:
            raise ConfigurationError("min_step must lie in (0, 1]")
        object.__setattr__(self, "mode", FlowMode(self.mode))
        if self.advection not in ("lhs", "rhs"):
            raise ConfigurationError("advection must be 'lhs' or 'rhs'")
        if self.linear_solver not in ("direct", "bicgstab", "krylov", "dense"):
            raise ConfigurationError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class SolveHistory:
    increments: List[float] = field(default_factory=list)
    newton_iterations: List[int] = field(default_factory=list)
    newton_residuals: List[List[float]] = field(default_factory=list)
    linear_iterations: int = 0
    residual: Optional[float] = None

    @property
    def outer_iterations(self):
        return len(self.increments)


def _linear(A, b, fp: FixedPointConfig, kind, history=None, multiplier=None, symmetric=False):
    method = fp.linear_solver
    pre = None
    if method == "krylov":
        method = "cg" if symmetric else "bicgstab"
    if method in ("bicgstab", "cg"):
        if multiplier is not None:
            pre = ilu_preconditioner(A)
        else:
            pre = jacobi_preconditioner(A)
    x, rep = solve(A, b, method=method, tol=fp.krylov_tol, max_iter=fp.krylov_max_iter,
                   preconditioner=pre)
    if history is not None:
        history.linear_iterations += rep.iterations
    log.debug("%s solve: %s", kind, rep)
    return x


# --------------------------------------------------------------------- flow

def _flow_linear_solve(fes, sysf, fp, history, jacobian=False, rhs=None):
    A = sysf.reduced_jacobian() if jacobian else sysf.reduced()[0]
    b = sysf.reduced()[1] if rhs is None else rhs
    # the multiplier stays the last free unknown
    return _linear(A, b, fp, "flow", history, multiplier=A.shape[0] - 1)


def _rel(r, scale):
    return float(np.abs(r).max(initial=0.0) / scale)


def solve_flow(fes: FESystem, cfg: ProblemConfig, phi, w_guess=None, fp=None,
               x0=None, history=None):
    """Realize the flow operator at temperature/concentration ``phi``.

    PICARD mode performs one linear solve with the convective velocity
    frozen at ``w_guess``.  NEWTON mode solves u -> A_phi(x) + B_u(x) = F
    with the full Jacobian, starting from ``x0`` (a flow vector) or from
    the Picard solution for ``w_guess``.  Returns the flow vector.
    """
    fp = fp or FixedPointConfig()
    if fp.mode == FlowMode.PICARD or x0 is None:
        sysf = assemble_flow(fes, cfg, phi, w_guess)
        x = sysf.expand(_flow_linear_solve(fes, sysf, fp, history))
        if fp.mode == FlowMode.PICARD:
            return x
    else:
        x = np.array(x0, dtype=float)
    off = slice(fes.off_u, fes.off_lambda)

    def evaluate(x):
        sysf = assemble_flow(fes, cfg, phi, x[off], newton=True)
        x[sysf.fixed] = sysf.fixed_values
        r = sysf.free_residual(x)
        return sysf, r

    sysf, r = evaluate(x)
    scale = float(np.abs(sysf.reduced()[1]).max(initial=0.0)) or 1.0
    residuals = []
    increases = 0
    for it in range(fp.newton_max + 1):
        res = _rel(r, scale)
        residuals.append(res)
        if not np.isfinite(res) or res > fp.divergence_limit:
            raise SolverError(f"Newton diverged (residual {res:.3e})", residuals, x)
        if len(residuals) > 1 and res > residuals[-2]:
            increases += 1
            if increases >= fp.divergence_window:
                raise SolverError("Newton residual grew over consecutive iterates",
                                  residuals, x)
        else:
            increases = 0
        if res <= fp.newton_tol:
            break
        if it == fp.newton_max:
            raise SolverError(
                f"Newton did not reach {fp.newton_tol:.1e} in {fp.newton_max} iterations "
                f"(residual {res:.3e})", residuals, x,
            )
        delta = _flow_linear_solve(fes, sysf, fp, history, jacobian=True, rhs=-r)
        x, sysf, r = _line_search(x, sysf.free, delta, r, evaluate, fp.min_step)
    if history is not None:
        history.newton_iterations.append(len(residuals) - 1)
        history.newton_residuals.append(residuals)
    return x


def _line_search(x, free, delta, r, evaluate, min_step):
    """Halve the Newton step until the residual 2-norm decreases.

    The step reaching ``min_step`` is taken regardless, leaving the
    divergence checks of the caller in charge.
    """
    norm0 = np.linalg.norm(r)
    step = 1.0
    while True:
        trial = x.copy()
        trial[free] += step * delta
        sysf, r_new = evaluate(trial)
        if np.linalg.norm(r_new) < (1.0 - 1e-4 * step) * norm0 or step <= min_step:
            if step < 1.0:
                log.debug("Newton step damped to %.3g", step)
            return trial, sysf, r_new
        step *= 0.5


# ---------------------------------------------------------------- transport

def solve_transport(fes: FESystem, cfg: ProblemConfig, u, phi_prev=None, fp=None,
                    history=None, advection=None):
    """Realize the transport operator for velocity ``u`` (coefficients, length n_u)."""
    fp = fp or FixedPointConfig()
    adv = advection or fp.advection
    if adv == "rhs" and phi_prev is None:
        raise ConfigurationError("the lagged advection variant needs phi_prev")
    syst = assemble_transport(fes, cfg, u, phi_prev, advection=adv)
    A, b = syst.reduced()
    symmetric = adv == "rhs" or u is None or not np.any(u)
    return syst.expand(_linear(A, b, fp, "transport", history, symmetric=symmetric))


# ------------------------------------------------------------ fixed point

def initial_guess(fes: FESystem, cfg: ProblemConfig, fp=None) -> CoupledState:
    """Pure diffusion for phi, then the flow problem with B = 0."""
    fp = fp or FixedPointConfig()
    phi = solve_transport(fes, cfg, None, None, fp, advection="lhs")
    sysf = assemble_flow(fes, cfg, phi, None)
    flow = sysf.expand(_flow_linear_solve(fes, sysf, fp, None))
    return CoupledState(fes, flow, phi)


def _increment(fes, a: CoupledState, b: CoupledState):
    du = h1_norm(fes, a.u - b.u)
    dphi = h1_norm(fes, a.phi - b.phi)
    return float(np.hypot(du, dphi))


def solve_coupled(fes: FESystem, cfg: ProblemConfig, fp=None, state0=None,
                  history=None):
    """Alternate flow and transport solves until the (u, phi) increment is
    below ``fp.tol`` in the discrete H1 norm.

    Returns ``(state, history)``; raises SolverError on non-convergence or
    when the coupled residual of the final state exceeds ``fp.tol``.
    """
    fp = fp or FixedPointConfig()
    history = history if history is not None else SolveHistory()
    state = state0.copy() if state0 is not None else initial_guess(fes, cfg, fp)
    for m in range(fp.max_outer):
        flow = solve_flow(fes, cfg, state.phi, state.u, fp, x0=state.flow, history=history)
        u_new = flow[fes.off_u:fes.off_lambda]
        phi = solve_transport(fes, cfg, u_new, state.phi, fp, history)
        new = CoupledState(fes, flow, phi)
        inc = _increment(fes, new, state)
        history.increments.append(inc)
        log.info("outer %d: H1 increment %.3e", m + 1, inc)
        state = new
        if not np.isfinite(inc):
            raise SolverError("fixed-point iterate became non-finite", history.increments, state)
        if inc <= fp.tol:
            break
    else:
        raise SolverError(
            f"fixed point did not converge in {fp.max_outer} iterations "
            f"(last increment {history.increments[-1]:.3e})", history.increments, state,
        )
    if fp.certify:
        res = residual(fes, cfg, state).relative
        history.residual = res
        if res > fp.tol:
            raise SolverError(f"coupled residual {res:.3e} exceeds {fp.tol:.1e}",
                              history.increments, state)
    return state, history


# ----------------------------------------------------------------- pressure

def velocity_norm_sq(fes: FESystem, u, degree=None):
    rule = rule_for_degree(2 * fes.p if degree is None else degree)
    elems = np.arange(fes.mesh.n_triangles)
    vals, _ = fes.eval_vector(u, elems, rule.points)
    w = rule.weights[None, :] * fes.geom.det[:, None]
    return float(np.sum(w * np.sum(vals ** 2, axis=-1)))


@dataclass
class PressureField:
    """Post-processed pressure -1/2 tr(sigma_h + u_h (x) u_h) + |u_h|^2 / (2|Omega|)."""

    fes: FESystem
    state: CoupledState
    shift: float

    def __call__(self, elems, xhat):
        S, _ = self.fes.eval_sigma(self.state.sigma, elems, xhat)
        u, _ = self.fes.eval_vector(self.state.u, elems, xhat)
        tr = S[..., 0, 0] + S[..., 1, 1] + np.sum(u ** 2, axis=-1)
        return -0.5 * tr + self.shift

    def mean_and_norm(self, degree=None):
        """(integral of p_h, L2 norm of p_h)."""
        rule = rule_for_degree(2 * self.fes.p + 2 if degree is None else degree)
        elems = np.arange(self.fes.mesh.n_triangles)
        p = self(elems, rule.points)
        w = rule.weights[None, :] * self.fes.geom.det[:, None]
        return float(np.sum(w * p)), float(np.sqrt(np.sum(w * p ** 2)))

    def cell_averages(self):
        rule = rule_for_degree(2 * self.fes.p + 2)
        elems = np.arange(self.fes.mesh.n_triangles)
        return 2.0 * (self(elems, rule.points) @ rule.weights)


def recover_pressure(fes: FESystem, state: CoupledState) -> PressureField:
    area = float(np.sum(fes.geom.det)) / 2.0
    return PressureField(fes, state, velocity_norm_sq(fes, state.u) / (2.0 * area))


# ------------------------------------------------------------- time march

@dataclass
class TimeStep:
    index: int
    time: float
    state: CoupledState
    history: SolveHistory


def interpolate_initial(fes: FESystem, cfg: ProblemConfig, u0, phi0) -> CoupledState:
    """Nodal interpolants of the initial fields; boundary values follow the data."""
    state = CoupledState.zeros(fes)
    u = fes.interpolate_vector(u0)
    fixed, vals = fes.interpolate_wall(cfg.u_D)
    state.flow[fes.off_u:fes.off_lambda] = u
    state.flow[fixed] = vals
    state.phi[:] = fes.interpolate_vector(phi0)
    return state


def time_march(fes: FESystem, cfg: ProblemConfig, dt, t_final, u0, phi0, fp=None,
               stride=1, callback: Optional[Callable[[TimeStep], None]] = None):
    """Backward Euler from (u0, phi0) up to ``t_final``.

    Every step solves the coupled problem of the modified configuration,
    warm-started from the previous step.  Returns every ``stride``-th step
    and always the last one.
    """
    if dt is None or not dt > 0:
        raise ConfigurationError("time step must be positive")
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigurationError("t_final must be a positive multiple of dt")
    fp = fp or FixedPointConfig()
    prev = interpolate_initial(fes, cfg, u0, phi0)
    out = []
    warm = None
    for n in range(1, n_steps + 1):
        step_cfg = apply_backward_euler(cfg, dt, prev.u, prev.phi)
        try:
            if warm is None:
                warm = initial_guess(fes, step_cfg, fp)
            state, hist = solve_coupled(fes, step_cfg, fp, state0=warm)
        except SolverError as exc:
            raise SolverError(f"time step {n}: {exc}", exc.history, exc.last) from exc
        step = TimeStep(n, n * dt, state, hist)
        if callback is not None:
            callback(step)
        if n % stride == 0 or n == n_steps:
            out.append(step)
        prev = warm = state
    return out
