"""Double-diffusive flow in a heated square: a few backward Euler steps.

Marches the n = 20 diagonal mesh for ten steps of dt = 1/50 and saves
velocity magnitude, temperature and concentration to example3.png.
Usage: python demos/example3_snapshots.py [steps]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import matplotlib.tri as mtri
import numpy as np

from ddconvect.benchmarks import example3
from ddconvect.fespace import FESystem
from ddconvect.mesh import build_mesh
from ddconvect.solver import time_march

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 10
bench = example3()
fes = FESystem(build_mesh(bench.domain(20)), 0)


def progress(s):
    print(f"t = {s.time:.3f}  outer iterations {s.history.outer_iterations}")


out = time_march(fes, bench.config, bench.dt, steps * bench.dt, bench.u0, bench.phi0,
                 callback=progress)
state = out[-1].state
nv, nl = fes.mesh.n_vertices, fes.n_lag
tri = mtri.Triangulation(*fes.mesh.vertices.T, fes.mesh.triangles)
speed = np.hypot(state.u[:nv], state.u[nl:nl + nv])
fields = [("|u|", speed), ("temperature", state.phi[:nv]), ("concentration", state.phi[nl:nl + nv])]

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
for ax, (name, vals) in zip(axes, fields):
    im = ax.tripcolor(tri, vals, shading="gouraud")
    ax.set_title(f"{name}, t = {out[-1].time:.2f}")
    ax.set_aspect("equal")
    fig.colorbar(im, ax=ax, shrink=0.8)
fig.tight_layout()
fig.savefig("example3.png", dpi=120)
print("saved example3.png")
