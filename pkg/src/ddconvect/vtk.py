"""Legacy ASCII VTK output of meshes and discrete fields."""

from pathlib import Path

import numpy as np

from .errors import ConfigurationError


def _block(fh, name, values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, values, fmt="%.16e")
    elif values.ndim == 2 and values.shape[1] == 2:
        fh.write(f"VECTORS {name} double\n")
        padded = np.column_stack([values, np.zeros(len(values))])
        np.savetxt(fh, padded, fmt="%.16e")
    else:
        raise ConfigurationError(f"field {name!r} must be scalar or 2-vector per entity")


def write_vtk(path, mesh, point_data=None, cell_data=None, title="ddconvect"):
    """Write an unstructured grid (POINTS / CELLS / CELL_TYPES=5).

    ``point_data`` maps names to arrays of length n_vertices (scalars) or
    shape (n_vertices, 2) (vectors); ``cell_data`` likewise per triangle.
    """
    nv, nt = mesh.n_vertices, mesh.n_triangles
    for data, n, what in ((point_data, nv, "vertex"), (cell_data, nt, "cell")):
        for name, vals in (data or {}).items():
            if len(vals) != n:
                raise ConfigurationError(f"{what} field {name!r} has {len(vals)} entries, expected {n}")
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        np.savetxt(fh, np.column_stack([mesh.vertices, np.zeros(nv)]), fmt="%.16e")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        np.savetxt(fh, np.column_stack([np.full(nt, 3), mesh.triangles]), fmt="%d")
        fh.write(f"CELL_TYPES {nt}\n")
        np.savetxt(fh, np.full(nt, 5), fmt="%d")
        if point_data:
            fh.write(f"POINT_DATA {nv}\n")
            for name, vals in point_data.items():
                _block(fh, name, vals)
        if cell_data:
            fh.write(f"CELL_DATA {nt}\n")
            for name, vals in cell_data.items():
                _block(fh, name, vals)
    return path


def write_state(path, fes, state, pressure=None, title="ddconvect"):
    """Velocity, temperature and concentration at vertices; pressure per cell."""
    from .solver import recover_pressure

    nv, nl = fes.mesh.n_vertices, fes.n_lag
    u, phi = state.u, state.phi
    point = {
        "velocity": np.column_stack([u[:nv], u[nl:nl + nv]]),
        "temperature": phi[:nv],
        "concentration": phi[nl:nl + nv],
    }
    pressure = pressure or recover_pressure(fes, state)
    return write_vtk(path, fes.mesh, point, {"pressure": pressure.cell_averages()}, title)
