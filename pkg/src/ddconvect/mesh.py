"""Structured triangulations of the unit square and the L-shaped domain.

By default each grid cell is split into four triangles through its
centroid ("crisscross"); the diagonal pattern cuts each cell into two
along its rising diagonal instead.  Refinement is red (midpoint) refinement, so the mesh size
halves exactly and every refined mesh is nested in its parent.
"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError


class Shape(Enum):
    UNIT_SQUARE = "unit_square"
    L_SHAPE = "l_shape"


class Pattern(Enum):
    CRISSCROSS = "crisscross"
    DIAGONAL = "diagonal"


class BoundaryTag(IntEnum):
    INTERIOR = -1
    DIRICHLET_TEMP = 1
    NEUMANN_TEMP = 2
    # no-slip holds on every boundary edge; WALL is never stored per edge
    WALL = 3


DOMAIN_AREA = {Shape.UNIT_SQUARE: 1.0, Shape.L_SHAPE: 3.0}


@dataclass(frozen=True)
class DomainSpec:
    shape: Shape
    resolution: int
    dirichlet_selector: Optional[Callable[[np.ndarray], np.ndarray]] = None
    pattern: Pattern = Pattern.CRISSCROSS


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with tagged boundary edges.

    ``edges[e]`` holds the two vertex indices in increasing order, which
    is also the global orientation of the edge.  Local edge ``i`` of a
    triangle is the one opposite its vertex ``i``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    edge_tris: np.ndarray
    edge_tags: np.ndarray
    shape: Shape
    parent: Optional[np.ndarray] = None
    coarser: Optional["Mesh"] = field(default=None, repr=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_tris[:, 1] < 0)

    @property
    def area(self):
        return DOMAIN_AREA[self.shape]

    def triangle_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def h(self):
        return float(self.edge_lengths()[self.tri_edges].max())

    def edge_midpoints(self, edges=None):
        e = self.edges if edges is None else self.edges[edges]
        return 0.5 * (self.vertices[e[:, 0]] + self.vertices[e[:, 1]])

    def edges_tagged(self, tag):
        return np.flatnonzero(self.edge_tags == tag)

    def boundary_vertices(self, tag=None):
        edges = self.boundary_edges if tag is None else self.edges_tagged(tag)
        return np.unique(self.edges[edges])

    def locate(self, points):
        """Index of the triangle containing each point, -1 when outside."""
        from matplotlib.tri import Triangulation

        tri = Triangulation(self.vertices[:, 0], self.vertices[:, 1], self.triangles)
        pts = np.asarray(points, dtype=float)
        return np.asarray(tri.get_trifinder()(pts[:, 0], pts[:, 1]), dtype=int)

    def write_vtk(self, path, title="mesh"):
        from .vtk import write_vtk

        write_vtk(path, self, title=title)


def _edge_topology(triangles):
    nt = len(triangles)
    local = np.stack(
        [triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]], axis=1
    ).reshape(-1, 2)
    keys = np.sort(local, axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    tri_edges = inverse.reshape(nt, 3)
    edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
    owner = np.repeat(np.arange(nt), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_edges = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_edges[1:] != sorted_edges[:-1]
    edge_tris[sorted_edges[first], 0] = owner[order[first]]
    edge_tris[sorted_edges[~first], 1] = owner[order[~first]]
    counts = np.bincount(inverse, minlength=len(edges))
    if counts.max() > 2:
        raise ConfigurationError("non-manifold triangulation: edge shared by >2 triangles")
    return edges.astype(np.int64), tri_edges.astype(np.int64), edge_tris


def _make_mesh(vertices, triangles, shape, edge_tags=None, parent=None, coarser=None):
    vertices = np.ascontiguousarray(vertices, dtype=float)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    p = vertices[triangles]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = signed < 0
    if flip.any():
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
    edges, tri_edges, edge_tris = _edge_topology(triangles)
    if edge_tags is None:
        edge_tags = np.where(edge_tris[:, 1] < 0, BoundaryTag.DIRICHLET_TEMP, BoundaryTag.INTERIOR)
    mesh = Mesh(
        vertices, triangles, edges, tri_edges, edge_tris,
        np.asarray(edge_tags, dtype=np.int64), shape, parent, coarser,
    )
    for arr in (mesh.vertices, mesh.triangles, mesh.edges, mesh.tri_edges,
                mesh.edge_tris, mesh.edge_tags):
        arr.setflags(write=False)
    return mesh


def _grid(x0, y0, cells_x, cells_y, size, keep, pattern=Pattern.CRISSCROSS):
    """Triangulated grid of ``cells_x * cells_y`` square cells; ``keep(i, j)``
    filters cells."""
    nx, ny = cells_x + 1, cells_y + 1
    grid = x0 + size * np.arange(nx), y0 + size * np.arange(ny)
    X, Y = np.meshgrid(*grid, indexing="ij")
    vertices = [np.column_stack([X.ravel(), Y.ravel()])]
    triangles = []
    nxt = nx * ny
    for i in range(cells_x):
        for j in range(cells_y):
            if not keep(i, j):
                continue
            a, b = i * ny + j, (i + 1) * ny + j
            c, d = (i + 1) * ny + j + 1, i * ny + j + 1
            if pattern == Pattern.DIAGONAL:
                triangles += [[a, b, c], [a, c, d]]
                continue
            o = nxt
            nxt += 1
            vertices.append([[x0 + size * (i + 0.5), y0 + size * (j + 0.5)]])
            triangles += [[a, b, o], [b, c, o], [c, d, o], [d, a, o]]
    vertices = np.vstack(vertices)
    triangles = np.asarray(triangles, dtype=np.int64)
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles]


def build_mesh(spec: DomainSpec) -> Mesh:
    """Structured mesh; ``resolution`` counts cells per unit length."""
    n = spec.resolution
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigurationError(f"resolution must be a positive integer, got {n!r}")
    if spec.shape == Shape.UNIT_SQUARE:
        verts, tris = _grid(0.0, 0.0, n, n, 1.0 / n, lambda i, j: True, spec.pattern)
    elif spec.shape == Shape.L_SHAPE:
        # drop the cells of the upper-right quadrant [0,1]^2
        verts, tris = _grid(
            -1.0, -1.0, 2 * n, 2 * n, 1.0 / n, lambda i, j: not (i >= n and j >= n), spec.pattern
        )
    else:
        raise ConfigurationError(f"unknown domain shape {spec.shape!r}")
    mesh = _make_mesh(verts, tris, spec.shape)
    if spec.dirichlet_selector is not None:
        mesh = tag_boundaries(mesh, spec.dirichlet_selector)
    return mesh


def mesh_from_arrays(vertices, triangles, shape=Shape.UNIT_SQUARE, dirichlet_selector=None):
    """Mesh from explicit vertex and triangle arrays (orientation is normalized)."""
    mesh = _make_mesh(np.array(vertices, dtype=float), np.array(triangles, dtype=np.int64), shape)
    if dirichlet_selector is not None:
        mesh = tag_boundaries(mesh, dirichlet_selector)
    return mesh


def tag_boundaries(mesh: Mesh, dirichlet_selector) -> Mesh:
    """Return a copy of ``mesh`` whose boundary edges are split into
    Dirichlet and Neumann parts for the temperature/concentration."""
    bnd = mesh.boundary_edges
    sel = np.asarray(dirichlet_selector(mesh.edge_midpoints(bnd)))
    if sel.shape != bnd.shape:
        raise ConfigurationError("dirichlet selector must return one flag per boundary edge")
    if sel.dtype != bool:
        if not np.all(np.isin(sel, (0, 1))):
            raise ConfigurationError("dirichlet selector left boundary edges untagged")
        sel = sel.astype(bool)
    tags = np.full(mesh.n_edges, BoundaryTag.INTERIOR, dtype=np.int64)
    tags[bnd] = np.where(sel, BoundaryTag.DIRICHLET_TEMP, BoundaryTag.NEUMANN_TEMP)
    return _make_mesh(mesh.vertices, mesh.triangles, mesh.shape, tags, mesh.parent, mesh.coarser)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children through edge midpoints."""
    nv = mesh.n_vertices
    verts = np.vstack([mesh.vertices, mesh.edge_midpoints()])
    t = mesh.triangles
    m = nv + mesh.tri_edges  # m[:, i] is the midpoint opposite vertex i
    children = np.stack(
        [
            np.column_stack([t[:, 0], m[:, 2], m[:, 1]]),
            np.column_stack([m[:, 2], t[:, 1], m[:, 0]]),
            np.column_stack([m[:, 1], m[:, 0], t[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)
    child = _make_mesh(verts, children, mesh.shape, parent=parent, coarser=mesh)
    tags = np.full(child.n_edges, BoundaryTag.INTERIOR, dtype=np.int64)
    bnd = child.boundary_edges
    # each child boundary edge joins an old vertex to the midpoint of its parent edge
    mids = child.edges[bnd].max(axis=1) - nv
    tags[bnd] = mesh.edge_tags[mids]
    return _make_mesh(verts, children, mesh.shape, tags, parent, mesh)


def selector_horizontal_sides(mid):
    """y = 0 or y = 1 (temperature Dirichlet part of the first benchmark)."""
    y = mid[:, 1]
    return np.isclose(y, 0.0) | np.isclose(y, 1.0)


def selector_vertical_sides(mid):
    """x = 0 or x = 1."""
    x = mid[:, 0]
    return np.isclose(x, 0.0) | np.isclose(x, 1.0)


def selector_l_shape_outer(mid):
    """All of the L-shape boundary except the two reentrant sides."""
    x, y = mid[:, 0], mid[:, 1]
    inner = (np.isclose(y, 0.0) & (x > 0)) | (np.isclose(x, 0.0) & (y > 0))
    return ~inner


def selector_all(mid):
    return np.ones(len(mid), dtype=bool)
