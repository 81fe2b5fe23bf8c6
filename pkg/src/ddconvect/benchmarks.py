"""Data of the three reference experiments."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .exact import ExactSolution, example1_solution, example2_solution
from .mesh import (
    DomainSpec, Pattern, Shape, selector_horizontal_sides, selector_l_shape_outer,
    selector_vertical_sides,
)
from .problem import ProblemConfig, constant_viscosity

PI = np.pi


@dataclass(frozen=True)
class Benchmark:
    """One experiment: domain family, problem data and optional exact solution.

    ``coarse`` is the resolution of the coarsest level; for time-dependent
    runs ``u0``/``phi0`` are the initial fields and ``dt``/``t_final`` the
    time grid.  ``resolutions``, when set, is the default increasing level
    sequence used instead of dyadic refinement of ``coarse``.
    """

    example: int
    shape: Shape
    selector: object
    coarse: int
    config: ProblemConfig
    exact: Optional[ExactSolution] = None
    u0: Optional[object] = None
    phi0: Optional[object] = None
    dt: Optional[float] = None
    t_final: Optional[float] = None
    pattern: Pattern = Pattern.CRISSCROSS
    resolutions: Optional[tuple] = None

    def domain(self, resolution):
        return DomainSpec(self.shape, resolution, self.selector, self.pattern)


def manufactured_config(ex: ExactSolution, **overrides) -> ProblemConfig:
    """Problem data whose solution is ``ex``."""
    kw = dict(
        gamma=ex.gamma, nu=ex.nu, alpha=ex.alpha, K=ex.K, g=ex.g,
        f_u=ex.f_u, f_phi=ex.f_phi, phi_D=ex.phi, phi_N=ex.neumann_flux, u_D=ex.u,
    )
    kw.update(overrides)
    return ProblemConfig(**kw)


def example1(coarse=8):
    ex = example1_solution()
    return Benchmark(1, Shape.UNIT_SQUARE, selector_horizontal_sides, coarse,
                     manufactured_config(ex), ex)


def example2(coarse=2):
    ex = example2_solution()
    return Benchmark(2, Shape.L_SHAPE, selector_l_shape_outer, coarse,
                     manufactured_config(ex), ex)


def example3_u0(x):
    X, Y = x[..., 0], x[..., 1]
    return np.stack([np.sin(PI * X) ** 2 * np.sin(2 * PI * Y),
                     -np.sin(2 * PI * X) * np.sin(PI * Y) ** 2], axis=-1)


def example3_phi0(x):
    X, Y = x[..., 0], x[..., 1]
    return np.stack([np.exp(X + Y), np.exp(X - Y)], axis=-1)


def example3_phi_D(x):
    """(1, 1) on x1 = 0 and (-1, -1) on x1 = 1."""
    s = np.where(x[..., 0] < 0.5, 1.0, -1.0)
    return np.stack([s, s], axis=-1)


# diagonal meshes with h = sqrt(2)/n; the last one is the reference
EXAMPLE3_RESOLUTIONS = (20, 25, 30, 35, 40, 45)


def example3(coarse=20, dt=1.0 / 50.0, t_final=0.5, resolutions=EXAMPLE3_RESOLUTIONS):
    cfg = ProblemConfig(
        gamma=1e-3, nu=constant_viscosity(1e-2), alpha=(1.0, 10.0), K=(1.0, 0.1),
        phi_D=example3_phi_D,
    )
    return Benchmark(3, Shape.UNIT_SQUARE, selector_vertical_sides, coarse, cfg,
                     u0=example3_u0, phi0=example3_phi0, dt=dt, t_final=t_final,
                     pattern=Pattern.DIAGONAL,
                     resolutions=tuple(resolutions) if resolutions is not None else None)


BENCHMARKS = {1: example1, 2: example2, 3: example3}


def get_benchmark(example, **kw) -> Benchmark:
    try:
        return BENCHMARKS[int(example)](**kw)
    except (KeyError, ValueError):
        raise ConfigurationError(f"unknown example {example!r}; choose 1, 2 or 3") from None
