"""Manufactured solution on the unit-width, two-high channel.

The exact fields are polynomial in space and ``cos(pi t)`` in time.  The
chemical potential is derived as ``w = gamma f(phi) - gamma eps lap(phi)``
with the truncated double well, so that the phase equations only need a
transport source.  Every source term is the residual of the continuous weak
form evaluated on the exact fields, so no integration by parts (and no extra
boundary forcing) is involved.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import sympy

from .fem import assemble_interface_load, assemble_load
from .mesh import TAG_CONDUIT, TAG_POROUS, DomainLayout
from .physics import ModelParams, density, double_well_f, mixture_slope, viscosity
from .scheme import Discretization


def example1_layout() -> DomainLayout:
    return DomainLayout(x_range=(0.0, 1.0), y_range=(0.0, 2.0), y_interface=1.0, conduit_position="top")


def example1_model(alpha_bjs: float = 1.0) -> ModelParams:
    """nu = 1, rho = (1, 3), M = 1, gamma = eps = 1, K = I."""
    return ModelParams(rho1=1.0, rho2=3.0, nu=1.0, M=1.0, gamma=1.0, epsilon=1.0, K=np.eye(2), alpha_bjs=alpha_bjs)


X, Y, T = sympy.symbols("x y t", real=True)


def _exact_expressions(gamma: float, epsilon: float) -> dict:
    g = lambda s: 16 * s**2 * (s - 1) ** 2  # noqa: E731
    gy = 16 * Y**2 * (Y - 2) ** 2
    gm = 16 * Y**2 * (Y - 1) ** 2
    gc = 16 * (Y - 1) ** 2 * (Y - 2) ** 2
    c = sympy.cos(sympy.pi * T)
    phi = g(X) * gy * c
    # phi peaks at 16, so w needs the truncated potential, not the cubic branch
    f = sympy.Piecewise(
        (2 * (phi - 1) / epsilon, phi > 1),
        (2 * (phi + 1) / epsilon, phi < -1),
        ((phi**3 - phi) / epsilon, True),
    )
    lap = sympy.diff(phi, X, 2) + sympy.diff(phi, Y, 2)
    w = gamma * f - gamma * epsilon * lap
    return {
        "phi": phi,
        "w": w,
        "p_m": g(X) * gm * c,
        "u1": X**2 * (Y - 1) ** 2 * c,
        "u2": -sympy.Rational(2, 3) * X * (Y - 1) ** 3 * c,
        "p_c": g(X) * gc * c,
    }


class ExactSolution:
    """Closed-form fields with their first space derivatives and time derivatives.

    Each evaluator takes ``(x, y, t)`` arrays and broadcasts.  Gradients of
    vector fields are indexed ``[component, derivative]``.
    """

    def __init__(self, model: ModelParams | None = None):
        self.model = model or example1_model()
        self.exprs = _exact_expressions(self.model.gamma, self.model.epsilon)
        self._fn: dict[str, Callable] = {}

    def _lam(self, key: str, expr) -> Callable:
        if key not in self._fn:
            f = sympy.lambdify((X, Y, T), expr, "numpy")
            self._fn[key] = lambda x, y, t, f=f: np.broadcast_to(
                np.asarray(f(x, y, t), dtype=float), np.broadcast(x, y).shape
            )
        return self._fn[key]

    def scalar(self, name: str, x, y, t, dx: int = 0, dy: int = 0, dt: int = 0):
        """Mixed derivative d^dx/dx d^dy/dy d^dt/dt of a scalar field (or a
        velocity component ``u1``/``u2``)."""
        key = f"{name}:{dx}{dy}{dt}"
        expr = self.exprs[name]
        if key not in self._fn:
            for s, k in ((X, dx), (Y, dy), (T, dt)):
                if k:
                    expr = sympy.diff(expr, s, k)
        return self._lam(key, expr)(x, y, t)

    def value(self, name: str, x, y, t):
        if name == "u_c":
            return np.stack([self.scalar("u1", x, y, t), self.scalar("u2", x, y, t)], axis=-1)
        return self.scalar(name, x, y, t)

    def gradient(self, name: str, x, y, t):
        if name == "u_c":
            return np.stack([self.gradient("u1", x, y, t), self.gradient("u2", x, y, t)], axis=-2)
        return np.stack([self.scalar(name, x, y, t, dx=1), self.scalar(name, x, y, t, dy=1)], axis=-1)

    def time_derivative(self, name: str, x, y, t):
        if name == "u_c":
            return np.stack([self.scalar("u1", x, y, t, dt=1), self.scalar("u2", x, y, t, dt=1)], axis=-1)
        return self.scalar(name, x, y, t, dt=1)

    def laplacian(self, name: str, x, y, t):
        return self.scalar(name, x, y, t, dx=2) + self.scalar(name, x, y, t, dy=2)

    def at(self, t: float) -> "ExactSnapshot":
        return ExactSnapshot(self, float(t))


def exact_fields(t: float, model: ModelParams | None = None) -> "ExactSnapshot":
    return ExactSolution(model).at(t)


@dataclass(frozen=True)
class ExactSnapshot:
    """Exact fields frozen at one time, as ``f(x, y)`` callables."""

    solution: ExactSolution
    t: float

    def value(self, name: str) -> Callable:
        return lambda x, y: self.solution.value(name, x, y, self.t)

    def gradient(self, name: str) -> Callable:
        return lambda x, y: self.solution.gradient(name, x, y, self.t)

    def interpolant(self, name: str) -> Callable:
        """Nodal-interpolation callable; vector fields return a pair."""
        if name == "u_c":
            return lambda x, y: (
                self.solution.scalar("u1", x, y, self.t),
                self.solution.scalar("u2", x, y, self.t),
            )
        return self.value(name)


# --------------------------------------------------------------------------
# forcing


def mms_forcing(t_next: float, disc: Discretization, exact: ExactSolution | None = None) -> dict:
    """Load vectors equal to the continuous weak-form residuals at ``t_next``.

    Keys: ``ch1`` (phase transport), ``ch2`` (chemical potential), ``darcy``
    and ``momentum``.
    """
    ex = exact or ExactSolution(disc.model)
    m, t = disc.model, float(t_next)
    geom = disc.Y.geom
    loads = {}

    def pts(cells):
        q = geom.qp[cells]
        return q[..., 0], q[..., 1]

    def field(name, x, y):
        return ex.value(name, x, y, t)

    def grad(name, x, y):
        return ex.gradient(name, x, y, t)

    # phase transport: (phi_t, psi) - (u phi, grad psi) + (M grad w, grad psi)
    ch1 = np.zeros(disc.Y.n_dofs)
    for cells, M in ((disc.cc, m.M_c), (disc.cm, m.M_m)):
        x, y = pts(cells)
        phi = field("phi", x, y)
        gw = grad("w", x, y)
        if cells is disc.cc:
            u = field("u_c", x, y)
        else:
            u = disc.darcy_flux(phi, grad("p_m", x, y), gw)
        G = -u * phi[..., None] + M * gw
        ch1 += assemble_load(disc.Y, ex.time_derivative("phi", x, y, t), G, cells=cells)
    loads["ch1"] = ch1

    # chemical potential: (w, omega) - gamma eps (grad phi, grad omega) - gamma (f(phi), omega)
    x, y = pts(disc.call)
    phi = field("phi", x, y)
    loads["ch2"] = assemble_load(
        disc.Y,
        field("w", x, y) - m.gamma * double_well_f(phi, m.epsilon),
        -m.gamma * m.epsilon * grad("phi", x, y),
    )

    # interface data (edge quadrature points)
    iq = geom.interface()
    xi, yi = iq["x"][..., 0], iq["x"][..., 1]
    n = iq["normal"][:, None, :]
    ui = field("u_c", xi, yi)
    un = np.sum(ui * n, axis=-1)

    # Darcy: (K grad p + K phi grad w - K (rho - rho_ref) g, grad q) - <u . n_c, q>
    x, y = pts(disc.cm)
    phi = field("phi", x, y)
    G = -disc.darcy_flux(phi, grad("p_m", x, y), grad("w", x, y))
    loads["darcy"] = assemble_load(disc.Qm, None, G) + assemble_interface_load(disc.Qm, -un)

    # momentum
    x, y = pts(disc.cc)
    phi = field("phi", x, y)
    rho = density(phi, m)
    drho = mixture_slope(phi, m.rho1, m.rho2)
    u = field("u_c", x, y)
    gu = grad("u_c", x, y)
    div_u = gu[..., 0, 0] + gu[..., 1, 1]
    div_rho_u = rho * div_u + drho * np.sum(grad("phi", x, y) * u, axis=-1)
    rho_t = drho * ex.time_derivative("phi", x, y, t)
    vals = (
        rho[..., None] * ex.time_derivative("u_c", x, y, t)
        + 0.5 * rho_t[..., None] * u
        + rho[..., None] * np.einsum("...il,...l->...i", gu, u)
        + 0.5 * div_rho_u[..., None] * u
        + phi[..., None] * grad("w", x, y)
    )
    if m.has_gravity:
        vals = vals - disc.body_force(phi)
    D = 0.5 * (gu + np.swapaxes(gu, -1, -2))
    G = 2.0 * viscosity(phi, m)[..., None, None] * D - field("p_c", x, y)[..., None, None] * np.eye(2)
    mom = assemble_load(disc.X, vals, G)
    phi_i = field("phi", xi, yi)
    rho_i = density(phi_i, m)
    iface = field("p_m", xi, yi)[..., None] * n - 0.5 * (rho_i * np.sum(ui * ui, axis=-1))[..., None] * n
    if m.alpha_bjs > 0:
        slip = np.zeros_like(ui)
        slip[..., 0] = m.alpha_bjs * viscosity(phi_i, m) * ui[..., 0]
        iface = iface + slip
    loads["momentum"] = mom + assemble_interface_load(disc.X, iface)
    return loads


class MMSForcing:
    """Forcing and Dirichlet data for the manufactured solution.

    Dirichlet data: u_c on the conduit walls, p_m on the matrix walls (in
    place of the zero-mean constraint), phi and w on the whole outer boundary.
    """

    def __init__(self, disc: Discretization, exact: ExactSolution | None = None):
        self.disc = disc
        self.exact = exact or ExactSolution(disc.model)
        self._cache: dict = {}

    @cached_property
    def _dofs(self) -> dict:
        d = self.disc
        return {
            "phi": d.Y.outer_boundary_dofs(),
            "w": d.Y.outer_boundary_dofs(),
            "u_c": d.X.outer_boundary_dofs(TAG_CONDUIT),
            "p_m": d.Qm.outer_boundary_dofs(TAG_POROUS),
        }

    def loads(self, t: float) -> dict:
        key = ("loads", float(t))
        if key not in self._cache:
            self._cache = {key: mms_forcing(t, self.disc, self.exact)}
        return self._cache[key]

    def dirichlet(self, t: float) -> dict:
        snap = self.exact.at(t)
        d = self.disc
        out = {}
        for name, space in (("phi", d.Y), ("w", d.Y), ("u_c", d.X), ("p_m", d.Qm)):
            dofs = self._dofs[name]
            values = space.interpolate(snap.interpolant(name))
            out[name] = (dofs, values[dofs])
        return out


def exact_initial_state(disc: Discretization, exact: ExactSolution | None = None, t: float = 0.0):
    """Nodal interpolants of the exact fields at time ``t``."""
    from .scheme import initial_state

    snap = (exact or ExactSolution(disc.model)).at(t)
    return initial_state(
        disc,
        phi=snap.interpolant("phi"),
        w=snap.interpolant("w"),
        u_c=snap.interpolant("u_c"),
        p_c=snap.interpolant("p_c"),
        p_m=snap.interpolant("p_m"),
        t=t,
    )


def mms_errors(disc: Discretization, state, exact: ExactSolution | None = None) -> dict:
    """L2 and H1 errors of phi, p_m, u_c and p_c at the state's time."""
    from .diagnostics import error_norms

    snap = (exact or ExactSolution(disc.model)).at(state.t)
    out = {}
    for name, f in (("phi", state.phi), ("p_m", state.p_m), ("u_c", state.u_c), ("p_c", state.p_c)):
        l2, h1 = error_norms(f, snap.value(name), snap.gradient(name))
        out[name] = l2
        out[name + "_H1"] = h1
    return out
