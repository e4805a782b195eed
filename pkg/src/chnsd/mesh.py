"""Structured triangulations of a two-layer rectangle.

The domain is split by a horizontal line ``y = y_interface`` into a free-flow
layer (the conduit) and a porous layer (the matrix).  Every triangle belongs to
exactly one layer and the interface is always a chain of mesh edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONDUIT = 0
POROUS = 1

TAG_CONDUIT = "conduit"  # outer boundary of the free-flow region
TAG_POROUS = "porous"  # outer boundary of the porous region


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class DomainLayout:
    x_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (0.0, 2.0)
    y_interface: float = 1.0
    conduit_position: str = "top"

    def __post_init__(self):
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"degenerate domain {self.x_range} x {self.y_range}")
        if not (y0 < self.y_interface < y1):
            raise MeshError(
                f"y_interface={self.y_interface} must lie strictly inside {self.y_range}"
            )
        if self.conduit_position not in ("top", "bottom"):
            raise MeshError(f"conduit_position must be 'top' or 'bottom', got {self.conduit_position!r}")

    @property
    def area(self) -> float:
        return (self.x_range[1] - self.x_range[0]) * (self.y_range[1] - self.y_range[0])

    @property
    def conduit_normal(self) -> np.ndarray:
        """Unit normal on the interface pointing from the conduit into the matrix."""
        return np.array([0.0, -1.0]) if self.conduit_position == "top" else np.array([0.0, 1.0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangle mesh with region, boundary and interface tags.

    Attributes
    ----------
    nodes : (N, 2) float array
    triangles : (T, 3) int array, counterclockwise
    region : (T,) int array with values ``CONDUIT`` or ``POROUS``
    edges : (E, 2) int array of sorted vertex pairs
    tri_edges : (T, 3) edge ids of local edges (v0 v1), (v1 v2), (v2 v0)
    boundary_edges : (B, 2) vertex pairs on the outer boundary
    boundary_tags : (B,) ``TAG_CONDUIT`` or ``TAG_POROUS``
    interface_edges : (I, 2) vertex pairs on the interface, ordered by x
    interface_normal : (I, 2) unit normals n_c (conduit -> matrix)
    interface_tris : (I, 2) adjacent (conduit, porous) triangle ids
    """

    nodes: np.ndarray
    triangles: np.ndarray
    region: np.ndarray
    layout: DomainLayout
    edges: np.ndarray = field(repr=False)
    tri_edges: np.ndarray = field(repr=False)
    boundary_edges: np.ndarray = field(repr=False)
    boundary_tags: np.ndarray = field(repr=False)
    interface_edges: np.ndarray = field(repr=False)
    interface_normal: np.ndarray = field(repr=False)
    interface_tris: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def h(self) -> float:
        """Largest edge length."""
        d = self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]]
        return float(np.sqrt((d**2).sum(axis=1)).max())

    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_ids(self, pairs: np.ndarray) -> np.ndarray:
        """Global edge ids of the given vertex pairs (any orientation)."""
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = _edge_keys(self.edges, self.n_nodes)
        wanted = pairs[:, 0] * self.n_nodes + pairs[:, 1]
        pos = np.searchsorted(keys, wanted)
        if np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != wanted):
            raise MeshError("vertex pair is not a mesh edge")
        return pos

    def boundary_edges_tagged(self, tag: str) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == tag]

    def write_vtk(self, path: str | Path) -> None:
        """Dump the bare mesh (with region ids as cell data) in legacy VTK."""
        from .io import write_vtk_grid

        write_vtk_grid(path, self, cell_scalars={"region": self.region.astype(float)})


def _edge_keys(edges: np.ndarray, n_nodes: int) -> np.ndarray:
    return edges[:, 0].astype(np.int64) * n_nodes + edges[:, 1]


def _assemble(nodes: np.ndarray, triangles: np.ndarray, region: np.ndarray, layout: DomainLayout) -> Mesh:
    """Derive edges, boundary and interface information from a triangle list."""
    n = len(nodes)
    local = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
    sorted_local = np.sort(local, axis=2)
    keys = sorted_local[..., 0].astype(np.int64) * n + sorted_local[..., 1]
    uniq, inverse, counts = np.unique(keys.ravel(), return_inverse=True, return_counts=True)
    edges = np.stack([uniq // n, uniq % n], axis=1)
    tri_edges = inverse.reshape(-1, 3)

    # owners of each edge: first and (if any) second triangle
    order = np.argsort(inverse, kind="stable")
    owner_tri = order // 3
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    first = owner_tri[starts]
    second = np.where(counts == 2, owner_tri[np.minimum(starts + 1, len(order) - 1)], -1)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge")

    bnd = counts == 1
    boundary_edges = edges[bnd]
    boundary_tags = np.where(region[first[bnd]] == CONDUIT, TAG_CONDUIT, TAG_POROUS)

    iface = (counts == 2) & (region[first] != region[np.maximum(second, 0)])
    t1, t2 = first[iface], second[iface]
    conduit_tri = np.where(region[t1] == CONDUIT, t1, t2)
    porous_tri = np.where(region[t1] == CONDUIT, t2, t1)
    iedges = edges[iface]
    # orient each interface edge left to right and sort the chain by x
    xa, xb = nodes[iedges[:, 0], 0], nodes[iedges[:, 1], 0]
    iedges = np.where((xa <= xb)[:, None], iedges, iedges[:, ::-1])
    srt = np.argsort(nodes[iedges[:, 0], 0], kind="stable")
    iedges, conduit_tri, porous_tri = iedges[srt], conduit_tri[srt], porous_tri[srt]

    tvec = nodes[iedges[:, 1]] - nodes[iedges[:, 0]]
    normal = np.stack([tvec[:, 1], -tvec[:, 0]], axis=1)
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    centroid_c = nodes[triangles[conduit_tri]].mean(axis=1)
    mid = 0.5 * (nodes[iedges[:, 0]] + nodes[iedges[:, 1]])
    flip = ((centroid_c - mid) * normal).sum(axis=1) > 0
    normal[flip] *= -1.0

    return Mesh(
        nodes=nodes,
        triangles=triangles,
        region=region,
        layout=layout,
        edges=edges,
        tri_edges=tri_edges,
        boundary_edges=boundary_edges,
        boundary_tags=boundary_tags,
        interface_edges=iedges,
        interface_normal=normal,
        interface_tris=np.stack([conduit_tri, porous_tri], axis=1),
    )


def build_layered_mesh(nx: int, ny: int, layout: DomainLayout | None = None) -> Mesh:
    """Uniform ``nx`` x ``ny`` grid, each cell cut along its lower-left to
    upper-right diagonal.

    Raises ``MeshError`` when ``y_interface`` does not fall on a grid line.
    """
    layout = layout or DomainLayout()
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be positive")
    (x0, x1), (y0, y1) = layout.x_range, layout.y_range
    dy = (y1 - y0) / ny
    k = (layout.y_interface - y0) / dy
    k_int = int(round(k))
    if abs(k - k_int) > 1e-9 or not (0 < k_int < ny):
        raise MeshError(
            f"y_interface={layout.y_interface} is not a grid line for ny={ny} on {layout.y_range}"
        )

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    ys[k_int] = layout.y_interface
    X, Y = np.meshgrid(xs, ys)
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    ll = j * (nx + 1) + i
    lr, ul = ll + 1, ll + nx + 1
    ur = ul + 1
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tris[0::2] = np.stack([ll, lr, ur], axis=1)
    tris[1::2] = np.stack([ll, ur, ul], axis=1)

    below = np.repeat(j < k_int, 2)
    conduit_below = layout.conduit_position == "bottom"
    region = np.where(below == conduit_below, CONDUIT, POROUS).astype(np.int64)
    return _assemble(nodes, tris, region, layout)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints."""
    n = mesh.n_nodes
    mid = 0.5 * (mesh.nodes[mesh.edges[:, 0]] + mesh.nodes[mesh.edges[:, 1]])
    nodes = np.vstack([mesh.nodes, mid])
    a, b, c = mesh.triangles.T
    m_ab, m_bc, m_ca = (mesh.tri_edges + n).T
    tris = np.empty((4 * mesh.n_triangles, 3), dtype=np.int64)
    tris[0::4] = np.stack([a, m_ab, m_ca], axis=1)
    tris[1::4] = np.stack([m_ab, b, m_bc], axis=1)
    tris[2::4] = np.stack([m_ca, m_bc, c], axis=1)
    tris[3::4] = np.stack([m_ab, m_bc, m_ca], axis=1)
    region = np.repeat(mesh.region, 4)
    return _assemble(nodes, tris, region, mesh.layout)
