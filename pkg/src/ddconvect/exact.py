"""Closed-form manufactured solutions and the data they induce."""

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import quad

from .problem import Viscosity, exponential_viscosity, rational_viscosity

PI = np.pi


@dataclass(frozen=True)
class ExactSolution:
    """Smooth solution of the stationary problem with its derived fields.

    The primary closures map points ``x[..., 2]`` to values; gradients are
    returned with the derivative index last.  ``laplace_u`` and
    ``grad_nu`` feed div(2 nu e(u)) = 2 e(u) grad(nu) + nu lap(u), valid
    because u is solenoidal.  ``u_norm_sq`` is the exact squared L2 norm
    of u over the domain of area ``area``.
    """

    u: Callable
    grad_u: Callable
    laplace_u: Callable
    p: Callable
    grad_p: Callable
    phi: Callable
    grad_phi: Callable
    laplace_phi: Callable
    nu: Viscosity
    grad_nu: Callable
    gamma: float
    alpha: tuple
    g: tuple
    K: tuple
    area: float
    u_norm_sq: float

    @property
    def c_u(self):
        return -self.u_norm_sq / (2.0 * self.area)

    def t(self, x):
        G = self.grad_u(x)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    def sigma(self, x):
        u = self.u(x)
        S = 2.0 * self.nu(x)[..., None, None] * self.t(x) - u[..., :, None] * u[..., None, :]
        shift = self.p(x) + self.c_u
        S[..., 0, 0] -= shift
        S[..., 1, 1] -= shift
        return S

    def div_viscous(self, x):
        """div(2 nu e(u))."""
        return 2.0 * np.einsum("...ij,...j->...i", self.t(x), self.grad_nu(x)) + (
            self.nu(x)[..., None] * self.laplace_u(x)
        )

    def div_sigma(self, x):
        u = self.u(x)
        convective = np.einsum("...ij,...j->...i", self.grad_u(x), u)
        return self.div_viscous(x) - convective - self.grad_p(x)

    def buoyancy(self, x):
        a = self.phi(x) @ np.asarray(self.alpha, dtype=float)
        return a[..., None] * np.asarray(self.g, dtype=float)

    def f_u(self, x):
        """Momentum source making the pair solve gamma u - div sigma = (alpha.phi) g + f_u."""
        return self.gamma * self.u(x) - self.div_sigma(x) - self.buoyancy(x)

    def f_phi(self, x):
        """Transport source: -div(K grad phi) + (grad phi) u."""
        K = np.asarray(self.K, dtype=float)
        adv = np.einsum("...ij,...j->...i", self.grad_phi(x), self.u(x))
        return -K * self.laplace_phi(x) + adv

    def neumann_flux(self, x, n):
        """K grad(phi_i) . n for outward normals ``n[..., 2]``."""
        K = np.asarray(self.K, dtype=float)
        return K * np.einsum("...id,...d->...i", self.grad_phi(x), n)


def _stack(*comps):
    return np.stack(comps, axis=-1)


def _mat(a, b, c, d):
    return np.stack([np.stack([a, b], axis=-1), np.stack([c, d], axis=-1)], axis=-2)


# ---------------------------------------------------------------- example 1

def _u1(x):
    X, Y = x[..., 0], x[..., 1]
    return _stack(-np.sin(2 * PI * X) ** 2 * np.sin(4 * PI * Y),
                  np.sin(4 * PI * X) * np.sin(2 * PI * Y) ** 2)


def _grad_u1(x):
    X, Y = x[..., 0], x[..., 1]
    s = np.sin(4 * PI * X) * np.sin(4 * PI * Y)
    return _mat(-2 * PI * s, -4 * PI * np.sin(2 * PI * X) ** 2 * np.cos(4 * PI * Y),
                4 * PI * np.cos(4 * PI * X) * np.sin(2 * PI * Y) ** 2, 2 * PI * s)


def _lap_u1(x):
    X, Y = x[..., 0], x[..., 1]
    c = 8 * PI ** 2
    return _stack(-c * np.sin(4 * PI * Y) * (2 * np.cos(4 * PI * X) - 1),
                  c * np.sin(4 * PI * X) * (2 * np.cos(4 * PI * Y) - 1))


def _p1(x):
    return np.cos(x[..., 0]) * np.cos(x[..., 1]) - np.sin(1.0) ** 2


def _grad_p1(x):
    X, Y = x[..., 0], x[..., 1]
    return _stack(-np.sin(X) * np.cos(Y), -np.cos(X) * np.sin(Y))


def _phi1(x):
    X, Y = x[..., 0], x[..., 1]
    return _stack(X * Y, np.exp(X + Y))


def _grad_phi1(x):
    X, Y = x[..., 0], x[..., 1]
    e = np.exp(X + Y)
    return _mat(Y, X, e, e)


def _lap_phi1(x):
    X, Y = x[..., 0], x[..., 1]
    return _stack(np.zeros_like(X), 2 * np.exp(X + Y))


def _grad_nu1(x):
    X, Y = x[..., 0], x[..., 1]
    d = (X ** 2 + Y ** 2 + 1) ** 2
    return _stack(-2 * X / d, -2 * Y / d)


def example1_solution():
    return ExactSolution(
        u=_u1, grad_u=_grad_u1, laplace_u=_lap_u1, p=_p1, grad_p=_grad_p1,
        phi=_phi1, grad_phi=_grad_phi1, laplace_phi=_lap_phi1,
        nu=rational_viscosity(), grad_nu=_grad_nu1,
        gamma=0.1, alpha=(0.5, 1.5), g=(0.0, -1.0), K=(2.0, 2.0),
        area=1.0, u_norm_sq=3.0 / 8.0,
    )


# ---------------------------------------------------------------- example 2

@lru_cache(maxsize=None)
def l_shape_pressure_shift():
    """Mean of (x1^2 + x2^2)^(1/3) over (-1,1)^2 minus [0,1]^2.

    Each of the three unit quadrants contributes the same integral,
    evaluated in polar coordinates around the reentrant corner.
    """
    val, _ = quad(lambda th: np.cos(th) ** (-8.0 / 3.0), 0.0, PI / 4, epsabs=1e-14, epsrel=1e-13)
    return 0.75 * val


def _u2(x):
    return _stack(x[..., 1] ** 2, -x[..., 0] ** 2)


def _grad_u2(x):
    z = np.zeros(x.shape[:-1])
    return _mat(z, 2 * x[..., 1], -2 * x[..., 0], z)


def _lap_u2(x):
    one = np.ones(x.shape[:-1])
    return _stack(2 * one, -2 * one)


def _p2(x):
    return (x[..., 0] ** 2 + x[..., 1] ** 2) ** (1.0 / 3.0) - l_shape_pressure_shift()


def _grad_p2(x):
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    f = (2.0 / 3.0) * r2 ** (-2.0 / 3.0)
    return _stack(f * x[..., 0], f * x[..., 1])


def _phi2(x):
    X, Y = x[..., 0], x[..., 1]
    return _stack(np.exp(-X ** 2 - Y ** 2), np.exp(-X * Y))


def _grad_phi2(x):
    X, Y = x[..., 0], x[..., 1]
    a, b = np.exp(-X ** 2 - Y ** 2), np.exp(-X * Y)
    return _mat(-2 * X * a, -2 * Y * a, -Y * b, -X * b)


def _lap_phi2(x):
    X, Y = x[..., 0], x[..., 1]
    r2 = X ** 2 + Y ** 2
    return _stack(4 * (r2 - 1) * np.exp(-r2), r2 * np.exp(-X * Y))


def _grad_nu2(x):
    X = x[..., 0]
    return _stack(-2 * X * np.exp(-X ** 2), np.zeros_like(X))


def example2_solution():
    return ExactSolution(
        u=_u2, grad_u=_grad_u2, laplace_u=_lap_u2, p=_p2, grad_p=_grad_p2,
        phi=_phi2, grad_phi=_grad_phi2, laplace_phi=_lap_phi2,
        nu=exponential_viscosity(), grad_nu=_grad_nu2,
        gamma=1e-3, alpha=(1.0, 0.5), g=(0.0, -1.0), K=(1.0, 2.0),
        area=3.0, u_norm_sq=6.0 / 5.0,
    )


def zero_solution(gamma=1.0, K=(1.0, 1.0), area=1.0):
    """Trivial fixture: every field vanishes."""
    z2 = lambda x: np.zeros(x.shape[:-1] + (2,))
    z22 = lambda x: np.zeros(x.shape[:-1] + (2, 2))
    z = lambda x: np.zeros(x.shape[:-1])
    from .problem import constant_viscosity

    return ExactSolution(
        u=z2, grad_u=z22, laplace_u=z2, p=z, grad_p=z2, phi=z2, grad_phi=z22,
        laplace_phi=z2, nu=constant_viscosity(1.0), grad_nu=z2, gamma=gamma,
        alpha=(0.0, 0.0), g=(0.0, -1.0), K=K, area=area, u_norm_sq=0.0,
    )
