"""Lagrange P1/P2 finite elements on triangles.

Everything is vectorized over cells: element matrices are built with
``einsum`` as ``(n_cells, n_test, n_trial)`` arrays and scattered into CSR
through a cached sparsity pattern, so assembling the same operator twice
yields bit-identical values.
"""
from __future__ import annotations

import time
import weakref
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CONDUIT, POROUS, Mesh


class ElementKind(Enum):
    P1_SCALAR = "P1"
    P2_SCALAR = "P2"
    P2_VECTOR2 = "P2v"
    P1_VECTOR2 = "P1v"  # recovered Darcy velocity only

    @property
    def degree(self) -> int:
        return 1 if self in (ElementKind.P1_SCALAR, ElementKind.P1_VECTOR2) else 2

    @property
    def ncomp(self) -> int:
        return 2 if self in (ElementKind.P2_VECTOR2, ElementKind.P1_VECTOR2) else 1

    @property
    def n_local(self) -> int:
        return {"P1": 3, "P2": 6, "P2v": 12, "P1v": 6}[self.value]


REGIONS = {"all": None, "conduit": CONDUIT, "porous": POROUS}


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    pass


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadRule:
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sums to the reference area 1/2
    edge_points: np.ndarray  # (ne,) on [0, 1]
    edge_weights: np.ndarray  # (ne,), sums to 1

    @property
    def nq(self) -> int:
        return len(self.weights)


def _tri7() -> tuple[np.ndarray, np.ndarray]:
    s15 = np.sqrt(15.0)
    a1, a2 = (6.0 - s15) / 21.0, (6.0 + s15) / 21.0
    b1, b2 = 1.0 - 2.0 * a1, 1.0 - 2.0 * a2
    w1, w2 = (155.0 - s15) / 1200.0, (155.0 + s15) / 1200.0
    pts = [
        (1 / 3, 1 / 3, 1 / 3),
        (a1, a1, b1), (a1, b1, a1), (b1, a1, a1),
        (a2, a2, b2), (a2, b2, a2), (b2, a2, a2),
    ]
    w = [9.0 / 40.0, w1, w1, w1, w2, w2, w2]
    return np.array(pts), 0.5 * np.array(w)


def _gauss3() -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(3)
    return 0.5 * (x + 1.0), 0.5 * w


DEFAULT_RULE = QuadRule(*_tri7(), *_gauss3())


# --------------------------------------------------------------------------
# reference basis


def eval_basis(element: ElementKind, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange basis values and gradients w.r.t. the reference coordinates.

    ``bary`` has shape ``(..., 3)``; reference coordinates are
    ``(xi, eta) = (bary[1], bary[2])``.  Scalar elements return values
    ``(..., n)`` and gradients ``(..., n, 2)``; ``P2_VECTOR2`` returns values
    ``(..., 12, 2)`` and gradients ``(..., 12, 2, 2)`` indexed
    ``[dof, component, derivative]`` with the x-component dofs first
    (``P1_VECTOR2`` likewise with 6 dofs).
    """
    bary = np.asarray(bary, dtype=float)
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    # d(lambda_k)/d(xi, eta)
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if element.degree == 1:
        vals = np.stack([l0, l1, l2], axis=-1)
        grads = np.broadcast_to(dl, vals.shape + (2,)).copy()
        if element is ElementKind.P1_SCALAR:
            return vals, grads
        return _vectorize(vals, grads)

    lam = [l0, l1, l2]
    vals = [lam[k] * (2.0 * lam[k] - 1.0) for k in range(3)]
    grads = [(4.0 * lam[k] - 1.0)[..., None] * dl[k] for k in range(3)]
    for i, j in ((0, 1), (1, 2), (2, 0)):
        vals.append(4.0 * lam[i] * lam[j])
        grads.append(4.0 * (lam[j][..., None] * dl[i] + lam[i][..., None] * dl[j]))
    vals = np.stack(vals, axis=-1)
    grads = np.stack(grads, axis=-2)
    if element is ElementKind.P2_SCALAR:
        return vals, grads
    return _vectorize(vals, grads)


def _vectorize(vals, grads):
    z = np.zeros_like(vals)
    vvals = np.concatenate([np.stack([vals, z], axis=-1), np.stack([z, vals], axis=-1)], axis=-2)
    zg = np.zeros_like(grads)
    vgrads = np.concatenate(
        [np.stack([grads, zg], axis=-2), np.stack([zg, grads], axis=-2)], axis=-3
    )
    return vvals, vgrads


# --------------------------------------------------------------------------
# geometry


class _Geometry:
    def __init__(self, mesh: Mesh, rule: QuadRule):
        p = mesh.nodes[mesh.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        self.origin = p[:, 0]
        self.J = J
        self.det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        self.invJ = np.linalg.inv(J)
        self.rule = rule
        # physical quadrature points and weights, (T, nq, 2) and (T, nq)
        ref = rule.points[:, 1:]
        self.qp = self.origin[:, None, :] + np.einsum("tij,qj->tqi", J, ref)
        self.qw = np.abs(self.det)[:, None] * rule.weights[None, :]
        self._iface = None
        self.mesh = mesh

    def bary_of(self, cells: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of points ``x[c, k]`` in triangles ``cells[c]``."""
        xi = np.einsum("cij,ckj->cki", self.invJ[cells], x - self.origin[cells][:, None, :])
        return np.concatenate([1.0 - xi.sum(axis=-1, keepdims=True), xi], axis=-1)

    def interface(self) -> dict:
        if self._iface is None:
            m, r = self.mesh, self.rule
            a = m.nodes[m.interface_edges[:, 0]]
            b = m.nodes[m.interface_edges[:, 1]]
            s = r.edge_points
            x = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
            length = np.linalg.norm(b - a, axis=1)
            tc, tp = m.interface_tris[:, 0], m.interface_tris[:, 1]
            self._iface = dict(
                x=x,
                w=length[:, None] * r.edge_weights[None, :],
                tri_c=tc,
                tri_p=tp,
                bary_c=self.bary_of(tc, x),
                bary_p=self.bary_of(tp, x),
                normal=m.interface_normal,
            )
        return self._iface


_GEOMETRY: "weakref.WeakKeyDictionary[Mesh, _Geometry]" = weakref.WeakKeyDictionary()


def geometry(mesh: Mesh, rule: QuadRule = DEFAULT_RULE) -> _Geometry:
    g = _GEOMETRY.get(mesh)
    if g is None or g.rule is not rule:
        g = _Geometry(mesh, rule)
        _GEOMETRY[mesh] = g
    return g


def region_cells(mesh: Mesh, region: str) -> np.ndarray:
    if region not in REGIONS:
        raise AssemblyError(f"unknown region {region!r}")
    tag = REGIONS[region]
    if tag is None:
        return np.arange(mesh.n_triangles)
    return np.flatnonzero(mesh.region == tag)


# --------------------------------------------------------------------------
# spaces and fields


class FunctionSpace:
    """Lagrange space restricted to one region of the mesh.

    Degrees of freedom are numbered compactly: vertices of the region first
    (in mesh order), then edge midpoints for P2.  Vector spaces stack the
    x-component block before the y-component block.
    """

    def __init__(
        self,
        mesh: Mesh,
        element: ElementKind,
        region: str = "all",
        constraint: str | None = None,
        rule: QuadRule = DEFAULT_RULE,
    ):
        if constraint not in (None, "zero_mean"):
            raise AssemblyError(f"unknown constraint {constraint!r}")
        if constraint == "zero_mean" and element is not ElementKind.P1_SCALAR:
            raise AssemblyError("zero_mean is only supported on P1 pressure spaces")
        self.mesh = mesh
        self.element = element
        self.region = region
        self.constraint = constraint
        self.rule = rule
        self.geom = geometry(mesh, rule)
        self.cells = region_cells(mesh, region)
        self.cell_pos = np.full(mesh.n_triangles, -1, dtype=np.int64)
        self.cell_pos[self.cells] = np.arange(len(self.cells))

        tris = mesh.triangles[self.cells]
        verts = np.unique(tris)
        vmap = np.full(mesh.n_nodes, -1, dtype=np.int64)
        vmap[verts] = np.arange(len(verts))
        self._vmap = vmap
        scalar_map = [vmap[tris]]
        coords = [mesh.nodes[verts]]
        self._emap = None
        if element.degree == 2:
            tedges = mesh.tri_edges[self.cells]
            edges = np.unique(tedges)
            emap = np.full(len(mesh.edges), -1, dtype=np.int64)
            emap[edges] = len(verts) + np.arange(len(edges))
            self._emap = emap
            scalar_map.append(emap[tedges])
            e = mesh.edges[edges]
            coords.append(0.5 * (mesh.nodes[e[:, 0]] + mesh.nodes[e[:, 1]]))
        self.scalar_dof_map = np.concatenate(scalar_map, axis=1)
        self.scalar_coords = np.vstack(coords)
        self.n_scalar = len(self.scalar_coords)
        if element.ncomp == 2:
            self.dof_map = np.concatenate(
                [self.scalar_dof_map, self.scalar_dof_map + self.n_scalar], axis=1
            )
        else:
            self.dof_map = self.scalar_dof_map
        self.n_dofs = self.n_scalar * element.ncomp

        self._ref_vals, self._ref_grads = eval_basis(element, rule.points)
        self._cache: dict = {}

    def __repr__(self) -> str:
        return f"FunctionSpace({self.element.value}, {self.region}, n_dofs={self.n_dofs})"

    @property
    def ncomp(self) -> int:
        return self.element.ncomp

    # -- basis at volume quadrature points -----------------------------
    def phys_grads(self, cells: np.ndarray) -> np.ndarray:
        """Physical basis gradients at volume quadrature points of ``cells``."""
        if "grads" not in self._cache:
            invJ = self.geom.invJ[self.cells]
            g = np.einsum("q...l,clk->cq...k", self._ref_grads, invJ, optimize=True)
            g.flags.writeable = False
            self._cache["grads"] = g
        full = self._cache["grads"]
        if cells is self.cells:
            return full
        pos = self.cell_pos[cells]
        if np.any(pos < 0):
            raise AssemblyError(f"cells outside the region {self.region!r} of {self!r}")
        return full[pos]

    @property
    def ref_values(self) -> np.ndarray:
        return self._ref_vals

    def local_dofs(self, cells: np.ndarray) -> np.ndarray:
        pos = self.cell_pos[cells]
        if np.any(pos < 0):
            raise AssemblyError(f"cells outside the region {self.region!r} of {self!r}")
        return self.dof_map[pos]

    # -- basis at arbitrary points -------------------------------------
    def basis_at(self, cells: np.ndarray, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and physical gradients at points given per cell, ``bary`` (c, k, 3)."""
        vals, g = eval_basis(self.element, bary)
        grads = np.einsum("ck...l,clm->ck...m", g, self.geom.invJ[cells])
        return vals, grads

    # -- dof helpers ---------------------------------------------------
    def dofs_on_edges(self, pairs: np.ndarray) -> np.ndarray:
        """All dofs (every component) attached to the given vertex pairs."""
        pairs = np.asarray(pairs).reshape(-1, 2)
        if len(pairs) == 0:
            return np.zeros(0, dtype=np.int64)
        d = [self._vmap[np.unique(pairs)]]
        if self._emap is not None:
            d.append(self._emap[self.mesh.edge_ids(pairs)])
        d = np.concatenate(d)
        if np.any(d < 0):
            raise AssemblyError("edges are not part of this space's region")
        d = np.unique(d)
        if self.ncomp == 2:
            d = np.concatenate([d, d + self.n_scalar])
        return d

    def vertex_dofs(self) -> tuple[np.ndarray, np.ndarray]:
        """Mesh vertex ids of the region and the matching (scalar) dofs."""
        nodes = np.flatnonzero(self._vmap >= 0)
        return nodes, self._vmap[nodes]

    def outer_boundary_dofs(self, tag: str | None = None) -> np.ndarray:
        m = self.mesh
        pairs = m.boundary_edges if tag is None else m.boundary_edges_tagged(tag)
        return self.dofs_on_edges(pairs)

    def interpolate(self, func: Callable) -> np.ndarray:
        """Nodal interpolant coefficients of ``func(x, y)``.

        Vector spaces expect ``func`` to return a pair ``(fx, fy)``.
        """
        x, y = self.scalar_coords[:, 0], self.scalar_coords[:, 1]
        v = func(x, y)
        if self.ncomp == 2:
            return np.concatenate([np.broadcast_to(v[0], x.shape), np.broadcast_to(v[1], x.shape)]).astype(float)
        return np.broadcast_to(np.asarray(v, dtype=float), x.shape).copy()

    def integral_vector(self) -> np.ndarray:
        """Entries int(phi_i) dx, used for the zero-mean constraint."""
        key = "integral"
        if key not in self._cache:
            w = self.geom.qw[self.cells]
            loc = np.einsum("cq,qi->ci", w, self._ref_vals)
            self._cache[key] = np.bincount(
                self.scalar_dof_map.ravel(), weights=loc.ravel(), minlength=self.n_scalar
            )
        return self._cache[key]


@dataclass
class DiscreteField:
    space: FunctionSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise ValueError(
                f"expected {self.space.n_dofs} coefficients, got {self.coefficients.shape}"
            )

    @classmethod
    def zeros(cls, space: FunctionSpace) -> "DiscreteField":
        return cls(space, np.zeros(space.n_dofs))

    @classmethod
    def interpolate(cls, space: FunctionSpace, func: Callable) -> "DiscreteField":
        return cls(space, space.interpolate(func))

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.space, self.coefficients.copy())

    def values(self, cells: np.ndarray) -> np.ndarray:
        """Values at volume quadrature points: (c, q) or (c, q, 2)."""
        loc = self.coefficients[self.space.local_dofs(cells)]
        return np.einsum("ci,qi...->cq...", loc, self.space.ref_values)

    def gradients(self, cells: np.ndarray) -> np.ndarray:
        """Gradients at volume quadrature points: (c, q, 2) or (c, q, 2, 2)."""
        loc = self.coefficients[self.space.local_dofs(cells)]
        return np.einsum("ci,cqi...->cq...", loc, self.space.phys_grads(cells))

    def at(self, cells: np.ndarray, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients at per-cell points ``bary`` (c, k, 3)."""
        loc = self.coefficients[self.space.local_dofs(cells)]
        vals, grads = self.space.basis_at(cells, bary)
        return np.einsum("ci,cki...->ck...", loc, vals), np.einsum("ci,cki...->ck...", loc, grads)

    def on_interface(self) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients at interface quadrature points, taken from the
        conduit side unless the space lives on the porous region."""
        iq = self.space.geom.interface()
        side = "p" if self.space.region == "porous" else "c"
        return self.at(iq[f"tri_{side}"], iq[f"bary_{side}"])


# --------------------------------------------------------------------------
# sparse scatter


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.rhs = np.asarray(self.rhs, dtype=float)
        n, m = self.matrix.shape
        if n != len(self.rhs):
            raise ValueError(f"matrix has {n} rows but rhs has {len(self.rhs)} entries")


class _Pattern:
    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        r = np.broadcast_to(rows[:, :, None], rows.shape + (cols.shape[1],))
        c = np.broadcast_to(cols[:, None, :], (cols.shape[0], rows.shape[1], cols.shape[1]))
        keys = r.astype(np.int64).ravel() * shape[1] + c.ravel()
        uniq, self.inverse = np.unique(keys, return_inverse=True)
        self.indices = (uniq % shape[1]).astype(np.int32)
        urow = uniq // shape[1]
        self.indptr = np.searchsorted(urow, np.arange(shape[0] + 1)).astype(np.int32)
        self.shape = shape
        self.nnz = len(uniq)

    def build(self, Ke: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inverse, weights=Ke.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


_PATTERNS: dict = {}


def _scatter(test: FunctionSpace, trial: FunctionSpace, key, rows, cols, Ke) -> sp.csr_matrix:
    full_key = (id(test), id(trial), key)
    entry = _PATTERNS.get(full_key)
    if entry is None or entry[0]() is not test or entry[1]() is not trial:
        pat = _Pattern(rows, cols, (test.n_dofs, trial.n_dofs))
        _PATTERNS[full_key] = (weakref.ref(test), weakref.ref(trial), pat)
        if len(_PATTERNS) > 512:
            for k in [k for k, v in _PATTERNS.items() if v[0]() is None or v[1]() is None]:
                del _PATTERNS[k]
    else:
        pat = entry[2]
    return pat.build(Ke)


# --------------------------------------------------------------------------
# coefficient handling

Coefficient = Union[float, np.ndarray, Callable, DiscreteField, None]


def _coef_at_qp(coef: Coefficient, mesh: Mesh, cells: np.ndarray, geom: _Geometry):
    if coef is None:
        return 1.0
    if isinstance(coef, DiscreteField):
        return coef.values(cells)
    if callable(coef):
        x = geom.qp[cells]
        return np.asarray(coef(x[..., 0], x[..., 1]), dtype=float)
    return coef


def _volume_cells(test: FunctionSpace, trial: FunctionSpace, region: str | None):
    if test.mesh is not trial.mesh:
        raise AssemblyError("test and trial spaces live on different meshes")
    if region is not None:
        cells = region_cells(test.mesh, region)
        key = region
    else:
        cells = np.intersect1d(test.cells, trial.cells)
        key = (test.region, trial.region)
    if len(cells) == 0:
        raise AssemblyError(f"{test!r} and {trial!r} have no common cells")
    return cells, key


def _apply_tensor(coef, g):
    """C g for scalar, constant (2, 2) or per-point (c, q, 2, 2) coefficients;
    ``g`` has shape (c, q, n, 2)."""
    c = np.asarray(coef, dtype=float)
    if c.ndim == 2 and c.shape == (2, 2):
        return g @ c.T
    if c.ndim == 4:
        return np.einsum("cqkl,cqjl->cqjk", c, g)
    return g * (c[..., None, None] if c.ndim else c)


def _contract(wc, a, b):
    """Ke[c, i, j] = sum_q wc[c, q] <a[c, q, i, ...], b[c, q, j, ...]>."""
    nc, nq, ni = a.shape[:3]
    nj = b.shape[2]
    wc = np.broadcast_to(wc, (nc, nq))
    aa = (a.reshape(nc, nq, ni, -1) * wc[:, :, None, None]).transpose(0, 2, 1, 3).reshape(nc, ni, -1)
    bb = b.reshape(nc, nq, nj, -1).transpose(0, 2, 1, 3).reshape(nc, nj, -1)
    return aa @ bb.transpose(0, 2, 1)


def _weighted_fixed(wc, a, b):
    """Like ``_contract`` for reference values a (q, i, ...) and b (q, j, ...)
    that do not depend on the cell."""
    nq, ni = a.shape[:2]
    nj = b.shape[1]
    P = np.einsum("qik,qjk->qij", a.reshape(nq, ni, -1), b.reshape(nq, nj, -1)).reshape(nq, -1)
    return (wc @ P).reshape(-1, ni, nj)


# --------------------------------------------------------------------------
# operators

VOLUME_KINDS = (
    "mass",
    "stiffness",
    "symmetric_gradient",
    "divergence",
    "convection",
    "div_advect",
    "grad_div",
    "weighted_gradient",
)
INTERFACE_KINDS = ("interface_normal", "interface_bjs", "interface_scalar")


def assemble_operator(
    kind: str,
    trial: FunctionSpace,
    test: FunctionSpace,
    coefficient: Coefficient = None,
    region: str | None = None,
) -> sp.csr_matrix:
    """Assemble the matrix ``A[i, j] = a(trial_j, test_i)`` of a bilinear form.

    Volume kinds integrate over the common cells of both spaces (or over
    ``region`` when given):

    - ``mass``: (c u, v), scalar or vector
    - ``stiffness``: (C grad u, grad v), C scalar or 2x2 tensor
    - ``symmetric_gradient``: (2 c D(u), D(v))
    - ``divergence``: (div u, q) with vector trial and scalar test
    - ``convection``: (rho (a . grad) u, v); coefficient is ``(rho, a)``
    - ``div_advect``: (1/2 c u, v) with c = div(rho a) at quadrature points
    - ``grad_div``: (c div u, div v)
    - ``weighted_gradient``: (c grad u, v) with scalar trial, vector test

    Interface kinds integrate over the interface edges:

    - ``interface_normal``: <q, v . n_c>, scalar trial q, conduit vector test v
    - ``interface_bjs``: <c P_tau u, P_tau v> with tau = (1, 0)
    - ``interface_scalar``: <1/2 rho a . u, v . n_c>; coefficient ``(rho, a)``

    Coefficients may be numbers, callables ``f(x, y)``, ``DiscreteField``
    objects, or arrays already evaluated at the quadrature points of the
    assembly cells (interface edges for interface kinds).
    """
    if kind in INTERFACE_KINDS:
        return _assemble_interface(kind, trial, test, coefficient)
    if kind not in VOLUME_KINDS:
        raise AssemblyError(f"unknown operator kind {kind!r}")

    cells, key = _volume_cells(test, trial, region)
    geom = test.geom
    w = geom.qw[cells]
    rows, cols = test.local_dofs(cells), trial.local_dofs(cells)
    vt, vu = test.ref_values, trial.ref_values

    if kind == "mass":
        if test.ncomp != trial.ncomp:
            raise AssemblyError("mass needs spaces with equal component counts")
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        Ke = _weighted_fixed(w * c, vt, vu)
    elif kind == "stiffness":
        if test.ncomp != 1 or trial.ncomp != 1:
            raise AssemblyError("stiffness is defined for scalar spaces")
        c = coefficient
        if not (isinstance(c, np.ndarray) and c.shape == (2, 2)):
            c = _coef_at_qp(c, test.mesh, cells, geom)
        gu = _apply_tensor(c, trial.phys_grads(cells))
        Ke = _contract(w, test.phys_grads(cells), gu)
    elif kind == "symmetric_gradient":
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        gt, gu = test.phys_grads(cells), trial.phys_grads(cells)
        St = 0.5 * (gt + np.swapaxes(gt, -1, -2))
        Su = 0.5 * (gu + np.swapaxes(gu, -1, -2))
        Ke = _contract(2.0 * w * c, St, Su)
    elif kind == "divergence":
        if trial.ncomp != 2 or test.ncomp != 1:
            raise AssemblyError("divergence needs a vector trial and a scalar test space")
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        div = np.einsum("cqjkk->cqj", trial.phys_grads(cells))
        Ke = _contract(w * c, np.broadcast_to(vt, (len(cells),) + vt.shape), div)
    elif kind == "grad_div":
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        dt_ = np.einsum("cqikk->cqi", test.phys_grads(cells))
        du = np.einsum("cqjkk->cqj", trial.phys_grads(cells))
        Ke = _contract(w * c, dt_, du)
    elif kind == "convection":
        rho, a = coefficient
        rho = _coef_at_qp(rho, test.mesh, cells, geom)
        a = _coef_at_qp(a, test.mesh, cells, geom)
        adv = np.einsum("cqjkl,cql->cqjk", trial.phys_grads(cells), a)
        Ke = _contract(w * rho, np.broadcast_to(vt, (len(cells),) + vt.shape), adv)
    elif kind == "div_advect":
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        Ke = _weighted_fixed(0.5 * w * c, vt, vu)
    elif kind == "weighted_gradient":
        if trial.ncomp != 1 or test.ncomp != 2:
            raise AssemblyError("weighted_gradient needs a scalar trial and a vector test space")
        c = _coef_at_qp(coefficient, test.mesh, cells, geom)
        Ke = _contract(w * c, np.broadcast_to(vt, (len(cells),) + vt.shape), trial.phys_grads(cells))
    return _scatter(test, trial, ("vol", key), rows, cols, Ke)


def _side(space: FunctionSpace) -> str:
    return "p" if space.region == "porous" else "c"


def _assemble_interface(kind, trial, test, coefficient) -> sp.csr_matrix:
    mesh = test.mesh
    if len(mesh.interface_edges) == 0:
        raise AssemblyError("mesh has no interface")
    iq = test.geom.interface()
    w, n = iq["w"], iq["normal"]

    def basis(space):
        s = _side(space)
        cells = iq[f"tri_{s}"]
        vals, _ = space.basis_at(cells, iq[f"bary_{s}"])
        return space.local_dofs(cells), vals

    def coef(c):
        if c is None:
            return 1.0
        if isinstance(c, DiscreteField):
            return c.on_interface()[0]
        if callable(c):
            return np.asarray(c(iq["x"][..., 0], iq["x"][..., 1]), dtype=float)
        return c

    if test.ncomp != 2 or test.region != "conduit":
        raise AssemblyError(f"{kind} needs a conduit vector test space")
    rows, vt = basis(test)
    vtn = np.einsum("ckid,cd->cki", vt, n)

    if kind == "interface_normal":
        if trial.ncomp != 1 or trial.region not in ("porous", "all"):
            raise AssemblyError("interface_normal needs a scalar porous/global trial space")
        cols, vq = basis(trial)
        Ke = np.einsum("ck,cki,ckj->cij", w, vtn, vq)
    elif kind == "interface_bjs":
        if trial.region != "conduit" or trial.ncomp != 2:
            raise AssemblyError("interface_bjs needs conduit vector spaces")
        cols, vu = basis(trial)
        c = coef(coefficient)
        # tangential component along tau = (1, 0)
        Ke = np.einsum("ck,cki,ckj->cij", w * c, vt[..., 0], vu[..., 0])
    else:  # interface_scalar
        if trial.region != "conduit" or trial.ncomp != 2:
            raise AssemblyError("interface_scalar needs conduit vector spaces")
        cols, vu = basis(trial)
        rho, a = coefficient
        rho = coef(rho)
        a = coef(a)
        au = np.einsum("ckl,ckjl->ckj", a, vu)
        Ke = np.einsum("ck,cki,ckj->cij", 0.5 * w * rho, vtn, au)
    return _scatter(test, trial, ("iface", kind), rows, cols, Ke)


def assemble_load(
    test: FunctionSpace,
    values: np.ndarray,
    gradient_values: np.ndarray | None = None,
    cells: np.ndarray | None = None,
) -> np.ndarray:
    """Load vector ``(f, v) + (G, grad v)`` from quadrature-point data.

    ``values`` is (c, q) for scalar spaces or (c, q, 2) for vector spaces;
    ``gradient_values`` is (c, q, 2) or (c, q, 2, 2) respectively.  Either may
    be ``None``.  ``cells`` defaults to the space's cells.
    """
    if cells is None:
        cells = test.cells
    w = test.geom.qw[cells]
    vec = test.ncomp == 2
    loc = 0.0
    if values is not None:
        sub = "cq,cqk,qik->ci" if vec else "cq,cq,qi->ci"
        loc = np.einsum(sub, w, values, test.ref_values)
    if gradient_values is not None:
        sub = "cq,cqkl,cqikl->ci" if vec else "cq,cqk,cqik->ci"
        loc = loc + np.einsum(sub, w, gradient_values, test.phys_grads(cells))
    return np.bincount(test.local_dofs(cells).ravel(), weights=np.ravel(loc), minlength=test.n_dofs)


def assemble_interface_load(test: FunctionSpace, values: np.ndarray) -> np.ndarray:
    """Load vector ``<g, v>`` on the interface, ``values`` at edge quadrature
    points: (I, ne) for scalar spaces or (I, ne, 2) for vector spaces."""
    iq = test.geom.interface()
    s = _side(test)
    cells = iq[f"tri_{s}"]
    vals, _ = test.basis_at(cells, iq[f"bary_{s}"])
    sub = "ck,ckd,ckid->ci" if test.ncomp == 2 else "ck,ck,cki->ci"
    loc = np.einsum(sub, iq["w"], values, vals)
    return np.bincount(test.local_dofs(cells).ravel(), weights=loc.ravel(), minlength=test.n_dofs)


# --------------------------------------------------------------------------
# constraints and solves


def apply_dirichlet(system: SparseSystem, dofs, values) -> SparseSystem:
    """Symmetric elimination of prescribed dofs.

    Constrained rows and columns are replaced by the identity and the known
    values are moved to the right-hand side of the remaining rows.
    """
    dofs = np.asarray(dofs, dtype=np.int64).ravel()
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    if len(dofs) == 0:
        return SparseSystem(system.matrix.copy(), system.rhs.copy())
    order = np.argsort(dofs, kind="stable")
    d, v = dofs[order], values[order]
    same = d[1:] == d[:-1]
    if np.any(same & (v[1:] != v[:-1])):
        raise AssemblyError("conflicting Dirichlet values for the same dof")
    keep = np.concatenate([[True], ~same])
    d, v = d[keep], v[keep]
    A = system.matrix
    n = A.shape[0]
    if d.min() < 0 or d.max() >= n:
        raise AssemblyError("Dirichlet dof index out of range")

    x = np.zeros(n)
    x[d] = v
    b = system.rhs - A @ x
    free = np.ones(n)
    free[d] = 0.0
    F = sp.diags(free)
    A = (F @ A @ F + sp.diags(1.0 - free)).tocsr()
    A.eliminate_zeros()
    b[d] = v
    return SparseSystem(A, b)


def impose_zero_mean(system: SparseSystem, space: FunctionSpace) -> SparseSystem:
    """Border the system with a Lagrange multiplier enforcing int p dx = 0.

    The returned system has one extra unknown (the multiplier, last entry).
    """
    if space.constraint != "zero_mean":
        raise AssemblyError(f"{space!r} carries no zero_mean constraint")
    m = space.integral_vector()[:, None]
    A = sp.bmat([[system.matrix, sp.csr_matrix(m)], [sp.csr_matrix(m.T), None]], format="csr")
    return SparseSystem(A, np.concatenate([system.rhs, [0.0]]))


@dataclass
class SolveInfo:
    method: str
    residual: float
    iterations: int
    seconds: float


class FactorCache:
    """Last LU factorization per key, reused as a GMRES preconditioner.

    Matrices of consecutive time steps differ only through slowly varying
    coefficients, so an old factorization is an excellent preconditioner.
    A fresh factorization is computed whenever GMRES needs more than
    ``max_iterations`` iterations or misses the tolerance.
    """

    def __init__(self, max_iterations: int = 20):
        self.max_iterations = max_iterations
        self._lu: dict = {}
        self.factorizations = 0

    def get(self, key, shape):
        entry = self._lu.get(key)
        if entry is not None and entry[0] == shape:
            return entry[1]
        return None

    def put(self, key, shape, lu) -> None:
        self._lu[key] = (shape, lu)
        self.factorizations += 1

    def clear(self) -> None:
        self._lu.clear()


def _factorize(A):
    # Minimum degree on A^T + A with threshold pivoting keeps the fill low for
    # the diagonally strong blocks; saddle-point patterns (zero diagonal) need
    # COLAMD with full partial pivoting.
    if np.any(A.diagonal() == 0.0):
        opts = dict(permc_spec="COLAMD")
    else:
        opts = dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01)
    try:
        return spla.splu(A, **opts)
    except RuntimeError as exc:
        raise SingularSystemError(f"singular matrix: {exc}") from exc


def _preconditioned_gmres(A, b, apply_M, rel_tol, restart, maxiter):
    count = [0]

    def cb(_):
        count[0] += 1

    M = spla.LinearOperator(A.shape, apply_M)
    x, _ = spla.gmres(A, b, M=M, rtol=rel_tol, atol=0.0, restart=restart, maxiter=maxiter,
                      callback=cb, callback_type="pr_norm")
    return x, count[0]


def solve_sparse(
    system: SparseSystem,
    method: str = "direct",
    rel_tol: float = 1e-10,
    return_info: bool = False,
    cache: FactorCache | None = None,
    key=None,
):
    """Solve ``A x = b``; raises ``SolverError`` if the relative residual
    exceeds ``rel_tol`` and ``SingularSystemError`` on singular matrices.

    With ``method="direct"`` and a ``cache``, the factorization stored under
    ``key`` is tried first as a GMRES preconditioner.
    """
    t0 = time.perf_counter()
    A = sp.csc_matrix(system.matrix)
    b = system.rhs
    if A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix is not square: {A.shape}")
    bnorm = np.linalg.norm(b)
    iters = 1
    used = method
    if bnorm == 0.0:
        x = np.zeros_like(b)
        res = 0.0
    else:
        if method == "direct":
            old = cache.get(key, A.shape) if cache is not None else None
            reused = False
            if old is not None:
                x, iters = _preconditioned_gmres(A, b, old.solve, 0.01 * rel_tol, cache.max_iterations, 1)
                res = np.linalg.norm(A @ x - b) / bnorm
                reused = res <= rel_tol
                used = "direct (reused factorization)"
            if not reused:
                lu = _factorize(A)
                if cache is not None:
                    cache.put(key, A.shape, lu)
                x = lu.solve(b)
                if not np.all(np.isfinite(x)):
                    raise SingularSystemError("direct solve produced non-finite values")
                res = np.linalg.norm(A @ x - b) / bnorm
                iters = 1
                used = method
                if res > rel_tol:
                    # one step of iterative refinement
                    x = x + lu.solve(b - A @ x)
                    res = np.linalg.norm(A @ x - b) / bnorm
                    iters = 2
        elif method == "iterative":
            try:
                ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
            except RuntimeError as exc:
                raise SingularSystemError(f"singular matrix: {exc}") from exc
            x, iters = _preconditioned_gmres(A, b, ilu.solve, rel_tol, 200, 50)
            res = np.linalg.norm(A @ x - b) / bnorm
        else:
            raise ValueError(f"unknown solver method {method!r}")
        if not np.isfinite(res) or res > rel_tol:
            raise SolverError(f"{method} solve reached relative residual {res:.3e} > {rel_tol:.1e}")
    if return_info:
        return x, SolveInfo(used, float(res), iters, time.perf_counter() - t0)
    return x
