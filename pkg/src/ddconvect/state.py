"""Coefficient vectors of one iterate of the coupled problem."""

from dataclasses import dataclass, field

import numpy as np

from .fespace import FESystem


@dataclass
class CoupledState:
    """Flow vector ``[t | sigma | u | lambda]`` plus transport vector ``[phi1 | phi2]``."""

    fes: FESystem = field(repr=False)
    flow: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.flow.shape != (self.fes.n_flow,) or self.phi.shape != (self.fes.n_phi,):
            raise ValueError("state vectors do not match the FE system")

    @classmethod
    def zeros(cls, fes):
        return cls(fes, np.zeros(fes.n_flow), np.zeros(fes.n_phi))

    @property
    def t(self):
        f = self.fes
        return self.flow[f.off_t:f.off_sigma]

    @property
    def sigma(self):
        f = self.fes
        return self.flow[f.off_sigma:f.off_u]

    @property
    def u(self):
        f = self.fes
        return self.flow[f.off_u:f.off_lambda]

    @property
    def lam(self):
        return float(self.flow[self.fes.off_lambda])

    def copy(self):
        return CoupledState(self.fes, self.flow.copy(), self.phi.copy())
