"""Gauss quadrature on the reference triangle and on intervals.

Rules on the triangle are collapsed (conical) products of a Gauss-Jacobi
rule in the collapsed direction and a Gauss-Legendre rule along the
fibres.  They have strictly positive weights, interior points and are
exact up to the requested total degree.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .errors import GeometryError, UnsupportedDegreeError

MAX_DEGREE = 12


@dataclass(frozen=True)
class QuadratureRule:
    """Points on the reference triangle (0,0),(1,0),(0,1) with weights.

    Weights sum to the reference area 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def rule_for_degree(d: int) -> QuadratureRule:
    """Return a rule integrating every polynomial of total degree <= d exactly."""
    if d < 0 or d > MAX_DEGREE:
        raise UnsupportedDegreeError(f"no triangle rule for degree {d} (0..{MAX_DEGREE})")
    n = d // 2 + 1
    # collapsed direction carries the Jacobian factor (1 - a)
    s, ws = roots_jacobi(n, 1.0, 0.0)
    a = 0.5 * (1.0 + s)
    wa = 0.25 * ws
    t, wt = np.polynomial.legendre.leggauss(n)
    b = 0.5 * (1.0 + t)
    wb = 0.5 * wt
    A, B = np.meshgrid(a, b, indexing="ij")
    W = np.outer(wa, wb)
    pts = np.column_stack([A.ravel(), (B * (1.0 - A)).ravel()])
    rule = QuadratureRule(pts, W.ravel(), 2 * n - 1)
    rule.points.setflags(write=False)
    rule.weights.setflags(write=False)
    return rule


@lru_cache(maxsize=None)
def gauss_legendre_01(n: int):
    """n-point Gauss-Legendre rule on [0, 1]: (points, weights)."""
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (1.0 + t), 0.5 * w


def affine_map(triangle):
    """Return (v0, J, detJ) of x = v0 + J @ xhat for a 3x2 vertex array."""
    tri = np.asarray(triangle, dtype=float)
    J = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    return tri[0], J, float(np.linalg.det(J))


def map_to_physical(rule: QuadratureRule, triangle):
    """Map a reference rule to a physical triangle.

    Returns the physical points and weights scaled by ``|det J|`` so that
    they sum to the triangle area.
    """
    v0, J, det = affine_map(triangle)
    scale = np.abs(J).max()
    if scale == 0.0 or abs(det) <= 1e-14 * scale**2:
        raise GeometryError("degenerate triangle")
    pts = v0 + rule.points @ J.T
    return pts, rule.weights * abs(det)
