"""Physical data, coefficient registry and stabilization parameters."""

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError


class Viscosity:
    """Kinematic viscosity with known bounds.

    The callable receives the physical points ``x[..., 2]`` and the
    temperature/concentration values ``phi[..., 2]`` at those points;
    ``spatial=True`` viscosities ignore ``phi``.
    """

    def __init__(self, fn, lower, upper, spatial=True, name="custom"):
        self.fn = fn
        self.lower = float(lower)
        self.upper = float(upper)
        self.spatial = spatial
        self.name = name

    def __call__(self, x, phi=None):
        if self.spatial:
            return np.asarray(self.fn(x), dtype=float)
        return np.asarray(self.fn(phi), dtype=float)

    def __repr__(self):
        return f"Viscosity({self.name!r}, bounds=({self.lower}, {self.upper}))"


def constant_viscosity(value):
    value = float(value)
    return Viscosity(lambda x: np.full(x.shape[:-1], value), value, value, name=f"constant({value})")


def rational_viscosity(lower=1.0, upper=2.0):
    """1 / (x1^2 + x2^2 + 1); bounds are those quoted with the first benchmark."""
    return Viscosity(lambda x: 1.0 / (x[..., 0] ** 2 + x[..., 1] ** 2 + 1.0), lower, upper,
                     name="rational")


def exponential_viscosity(lower=1.0, upper=2.0):
    """1 + exp(-x1^2)."""
    return Viscosity(lambda x: 1.0 + np.exp(-x[..., 0] ** 2), lower, upper, name="exponential")


def thermal_viscosity(base=1.0, spread=1.0):
    """base * (1 + spread * exp(-|phi|^2)); depends on the transported fields."""
    return Viscosity(
        lambda phi: base * (1.0 + spread * np.exp(-np.sum(phi ** 2, axis=-1))),
        base, base * (1.0 + spread), spatial=False, name="thermal",
    )


VISCOSITY_REGISTRY = {
    "constant": constant_viscosity,
    "rational": rational_viscosity,
    "exponential": exponential_viscosity,
    "thermal": thermal_viscosity,
}


def default_stabilization(nu1, nu2, gamma):
    """Mid-range stabilization weights (kappa1, kappa2, kappa3)."""
    if not (nu1 > 0 and nu2 > 0 and gamma > 0):
        raise ConfigurationError("viscosity bounds and gamma must be positive")
    if nu1 > nu2:
        raise ConfigurationError("lower viscosity bound exceeds upper bound")
    return nu1 / 2.0, 1.0 / gamma, nu1 / (2.0 * nu2 ** 2)


def stabilization_violations(kappas, nu1, nu2, gamma):
    """Names of the weights outside the ellipticity ranges (empty when admissible).

    The ranges are the unions over the admissible auxiliary weights:
    kappa3 < 2 nu1 / nu2^2, kappa2 < 4 / gamma and
    kappa1 < 2 (2 nu1 - kappa3 nu2^2).
    """
    k1, k2, k3 = kappas
    bad = []
    if not 0 < k3 < 2 * nu1 / nu2 ** 2:
        bad.append("kappa3")
    if not 0 < k2 < 4 / gamma:
        bad.append("kappa2")
    if not 0 < k1 < 2 * (2 * nu1 - k3 * nu2 ** 2):
        bad.append("kappa1")
    return bad


Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ProblemConfig:
    """Coefficients and data of the coupled problem.

    Source fields take points ``x[..., 2]`` and return ``[..., 2]``.
    ``phi_N(x, n)`` is the Neumann flux K grad(phi).n on the Neumann part
    (zero when omitted) and ``u_D`` the wall velocity (zero when omitted).
    ``dt`` together with ``u_old``/``phi_old`` (coefficient vectors on the
    same FE system) switches on the backward Euler terms.  When
    ``kappas`` is None the defaults are derived from ``gamma_eff``.
    """

    gamma: float
    nu: Viscosity
    alpha: tuple
    K: tuple
    g: tuple = (0.0, -1.0)
    kappas: Optional[tuple] = None
    f_u: Optional[Field] = None
    f_phi: Optional[Field] = None
    phi_D: Optional[Field] = None
    phi_N: Optional[Callable] = None
    u_D: Optional[Field] = None
    dt: Optional[float] = None
    u_old: Optional[np.ndarray] = field(default=None, repr=False)
    phi_old: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if len(self.alpha) != 2 or len(self.g) != 2:
            raise ConfigurationError("alpha and g must be 2-vectors")
        K = np.asarray(self.K, dtype=float)
        if K.shape != (2,) or np.any(K <= 0):
            raise ConfigurationError("K must be two positive diagonal entries")
        if self.nu.lower <= 0 or self.nu.lower > self.nu.upper:
            raise ConfigurationError("viscosity bounds must satisfy 0 < nu1 <= nu2")
        if self.kappas is not None and len(self.kappas) != 3:
            raise ConfigurationError("kappas must be a triple")
        if self.dt is not None and not self.dt > 0:
            raise ConfigurationError("time step must be positive")
        bad = stabilization_violations(
            self.stabilization, self.nu.lower, self.nu.upper, self.gamma_eff
        )
        if bad:
            warnings.warn(
                f"stabilization outside the ellipticity range: {', '.join(bad)}", stacklevel=3
            )

    @property
    def gamma_eff(self):
        """Reaction coefficient including the 1/dt of backward Euler."""
        return self.gamma + (1.0 / self.dt if self.dt is not None else 0.0)

    @property
    def stabilization(self):
        """The (kappa1, kappa2, kappa3) actually used."""
        if self.kappas is not None:
            return tuple(float(c) for c in self.kappas)
        return default_stabilization(self.nu.lower, self.nu.upper, self.gamma_eff)

    @property
    def k0(self):
        return float(min(self.K))

    def with_(self, **kw):
        return replace(self, **kw)

    def check_viscosity_bounds(self, points, phi=None, rtol=1e-12):
        """True when nu stays inside [nu1, nu2] at the given samples."""
        v = self.nu(points, phi)
        return bool(
            np.all(v >= self.nu.lower * (1 - rtol)) and np.all(v <= self.nu.upper * (1 + rtol))
        )
