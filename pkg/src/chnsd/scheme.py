"""Time stepping for the two-phase free-flow / porous-media system.

Two schemes are provided.  ``advance_decoupled`` runs the four linear
substeps (phase field, porous pressure, free-flow velocity, free-flow
pressure update) one after another.  ``advance_coupled`` solves all five
fields in one monolithic system per step; its time term depends on the new
density, which is resolved by Picard iteration.

Conventions
-----------
- Y = P2 on the whole domain (phi, w), X = P2 vector on the conduit,
  Qc = P1 on the conduit, Qm = P1 on the matrix (zero mean), Vm = P1 vector
  on the matrix (recovered Darcy velocity).
- Material coefficients are evaluated at quadrature points from the P2 phase
  field, never interpolated nodally.
- The interface normal points from the conduit into the matrix.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    DEFAULT_RULE,
    DiscreteField,
    ElementKind,
    FactorCache,
    FunctionSpace,
    QuadRule,
    SolverError,
    SparseSystem,
    apply_dirichlet,
    assemble_interface_load,
    assemble_load,
    assemble_operator,
    impose_zero_mean,
    solve_sparse,
)
from .mesh import TAG_CONDUIT, TAG_POROUS, Mesh
from .physics import (
    ModelParams,
    SchemeParams,
    density,
    double_well_f,
    mixture_slope,
    sigma,
    viscosity,
)


class StepFailure(SolverError):
    """A substep failed; carries the step index and the substep name."""

    def __init__(self, step: int, substep: str, cause: Exception):
        super().__init__(f"step {step}, {substep}: {cause}")
        self.step = step
        self.substep = substep
        self.cause = cause


class Forcing(Protocol):
    """Source terms and boundary data added to the substeps.

    ``loads(t)`` returns load vectors keyed by ``ch1`` (phase transport, Y),
    ``ch2`` (chemical potential, Y), ``darcy`` (Qm) and ``momentum`` (X).
    ``dirichlet(t)`` returns ``(dofs, values)`` pairs keyed by ``phi``,
    ``w``, ``p_m`` and ``u_c``.  Prescribing ``p_m`` replaces the zero-mean
    constraint.
    """

    def loads(self, t: float) -> dict: ...

    def dirichlet(self, t: float) -> dict: ...


# --------------------------------------------------------------------------
# discretization


class Discretization:
    """Function spaces and time-independent operators for one mesh and model."""

    def __init__(self, mesh: Mesh, model: ModelParams, rule: QuadRule = DEFAULT_RULE):
        self.mesh = mesh
        self.model = model
        self.rule = rule
        self.Y = FunctionSpace(mesh, ElementKind.P2_SCALAR, "all", rule=rule)
        self.X = FunctionSpace(mesh, ElementKind.P2_VECTOR2, "conduit", rule=rule)
        self.Qc = FunctionSpace(mesh, ElementKind.P1_SCALAR, "conduit", rule=rule)
        self.Qm = FunctionSpace(mesh, ElementKind.P1_SCALAR, "porous", constraint="zero_mean", rule=rule)
        self.Vm = FunctionSpace(mesh, ElementKind.P1_VECTOR2, "porous", rule=rule)
        self.cc = self.X.cells
        self.cm = self.Qm.cells
        self.call = self.Y.cells
        self.factors = FactorCache()
        self._ops: dict = {}

    def __repr__(self) -> str:
        return (
            f"Discretization(Y={self.Y.n_dofs}, X={self.X.n_dofs}, "
            f"Qc={self.Qc.n_dofs}, Qm={self.Qm.n_dofs})"
        )

    def _op(self, name, build):
        if name not in self._ops:
            self._ops[name] = build()
        return self._ops[name]

    # constant matrices --------------------------------------------------
    @property
    def mass_Y(self):
        return self._op("mass_Y", lambda: assemble_operator("mass", self.Y, self.Y))

    @property
    def stiff_Y(self):
        return self._op("stiff_Y", lambda: assemble_operator("stiffness", self.Y, self.Y))

    @property
    def mobility_Y(self):
        """(M grad w, grad psi) with M = M_c on the conduit and M_m on the matrix."""
        m = self.model
        return self._op(
            "mobility_Y",
            lambda: (
                assemble_operator("stiffness", self.Y, self.Y, m.M_c, region="conduit")
                + assemble_operator("stiffness", self.Y, self.Y, m.M_m, region="porous")
            ).tocsr(),
        )

    @property
    def mass_Qc(self):
        return self._op("mass_Qc", lambda: assemble_operator("mass", self.Qc, self.Qc))

    @property
    def mass_Qc_lu(self):
        return self._op("mass_Qc_lu", lambda: spla.splu(sp.csc_matrix(self.mass_Qc)))

    @property
    def div_B(self):
        """B[q, v] = (div v, q)."""
        return self._op("div_B", lambda: assemble_operator("divergence", self.X, self.Qc))

    @property
    def grad_div_X(self):
        return self._op("grad_div_X", lambda: assemble_operator("grad_div", self.X, self.X))

    @property
    def darcy_K(self):
        return self._op("darcy_K", lambda: assemble_operator("stiffness", self.Qm, self.Qm, self.model.K))

    @property
    def stiff_Qm(self):
        return self._op("stiff_Qm", lambda: assemble_operator("stiffness", self.Qm, self.Qm))

    @property
    def iface_G(self):
        """G[v, q] = <q, v . n_c>."""
        return self._op("iface_G", lambda: assemble_operator("interface_normal", self.Qm, self.X))

    @property
    def mass_Vm_lu(self):
        return self._op(
            "mass_Vm_lu",
            lambda: spla.splu(sp.csc_matrix(assemble_operator("mass", self.Vm, self.Vm))),
        )

    @property
    def wall_dofs(self):
        """Velocity dofs on the outer boundary of the conduit."""
        return self._op("wall_dofs", lambda: self.X.outer_boundary_dofs(TAG_CONDUIT))

    # quadrature-point helpers -------------------------------------------
    def body_force(self, phi_vals):
        """(rho(phi) - rho_ref) g at the given points, shape (..., 2)."""
        m = self.model
        return (density(phi_vals, m) - m.rho_ref)[..., None] * np.asarray(m.gravity)

    def darcy_flux(self, phi_vals, grad_p, grad_w, gravity=True):
        """-K grad p - K phi grad w (+ K (rho - rho_ref) g) at points."""
        m = self.model
        v = grad_p + phi_vals[..., None] * grad_w
        if gravity and m.has_gravity:
            v = v - self.body_force(phi_vals)
        return -np.einsum("ij,...j->...i", m.K, v)


# --------------------------------------------------------------------------
# state


@dataclass
class SubstepInfo:
    residual: float
    iterations: int
    seconds: float


@dataclass
class StepReport:
    substeps: dict = field(default_factory=dict)

    def add(self, name: str, residual: float, iterations: int, seconds: float) -> None:
        self.substeps[name] = SubstepInfo(float(residual), int(iterations), float(seconds))

    @property
    def max_residual(self) -> float:
        return max((s.residual for s in self.substeps.values()), default=0.0)

    @property
    def seconds(self) -> float:
        return sum(s.seconds for s in self.substeps.values())


@dataclass
class SimState:
    t: float
    phi: DiscreteField
    w: DiscreteField
    u_c: DiscreteField
    p_c: DiscreteField
    p_c_prev: DiscreteField
    p_m: DiscreteField
    u_m: DiscreteField | None = None
    step: int = 0
    report: StepReport | None = None

    def __post_init__(self):
        meshes = {id(f.space.mesh) for f in (self.phi, self.w, self.u_c, self.p_c, self.p_c_prev, self.p_m)}
        if len(meshes) != 1:
            raise ValueError("all state fields must live on the same mesh")

    def copy(self) -> "SimState":
        return SimState(
            t=self.t,
            phi=self.phi.copy(),
            w=self.w.copy(),
            u_c=self.u_c.copy(),
            p_c=self.p_c.copy(),
            p_c_prev=self.p_c_prev.copy(),
            p_m=self.p_m.copy(),
            u_m=None if self.u_m is None else self.u_m.copy(),
            step=self.step,
        )


def _field(space, value):
    if value is None:
        return DiscreteField.zeros(space)
    if isinstance(value, DiscreteField):
        return value.copy()
    if callable(value):
        return DiscreteField.interpolate(space, value)
    if np.ndim(value) == 0:
        return DiscreteField(space, np.full(space.n_dofs, float(value)))
    return DiscreteField(space, np.array(value, dtype=float))


def initial_state(disc: Discretization, phi, w=None, u_c=None, p_c=None, p_m=None, t: float = 0.0) -> SimState:
    """Build a state from constants, coefficients, callables or fields; missing
    fields are zero.

    The lagged pressure starts equal to ``p_c``.
    """
    pc = _field(disc.Qc, p_c)
    state = SimState(
        t=float(t),
        phi=_field(disc.Y, phi),
        w=_field(disc.Y, w),
        u_c=_field(disc.X, u_c),
        p_c=pc,
        p_c_prev=pc.copy(),
        p_m=_field(disc.Qm, p_m),
    )
    state.u_m = recover_darcy_velocity(disc, state)
    return state


# --------------------------------------------------------------------------
# helpers


def _solve(disc, system: SparseSystem, scheme: SchemeParams, report: StepReport | None, name: str):
    x, info = solve_sparse(system, method=scheme.solver, rel_tol=scheme.rel_tol, return_info=True,
                           cache=disc.factors, key=name)
    if report is not None:
        report.add(name, info.residual, info.iterations, info.seconds)
    return x


def _loads(forcing, t):
    return {} if forcing is None else forcing.loads(t)


def _dirichlet(forcing, t):
    return {} if forcing is None else forcing.dirichlet(t)


def _constrain(system, bcs, blocks):
    """Apply Dirichlet data keyed like ``blocks`` = {name: offset}."""
    dofs, vals = [], []
    for name, offset in blocks.items():
        if name in bcs:
            d, v = bcs[name]
            dofs.append(np.asarray(d) + offset)
            vals.append(np.broadcast_to(np.asarray(v, dtype=float), np.shape(d)))
    if not dofs:
        return system
    return apply_dirichlet(system, np.concatenate(dofs), np.concatenate(vals))


# --------------------------------------------------------------------------
# decoupled substeps


def cahn_hilliard_system(disc: Discretization, state: SimState, scheme: SchemeParams, forcing=None) -> SparseSystem:
    """Block system in (phi^{n+1}, w^{n+1}), transport row multiplied by dt."""
    m, dt = disc.model, scheme.dt
    Y, cc, cm = disc.Y, disc.cc, disc.cm
    MY = disc.mass_Y

    phi_c = state.phi.values(cc)
    phi_m = state.phi.values(cm)
    rho_c = density(phi_c, m)
    # implicit part of the transport velocity acts like extra mobility
    A_cw = assemble_operator("stiffness", Y, Y, phi_c**2 / rho_c, region="conduit")
    A_mw = assemble_operator("stiffness", Y, Y, (phi_m**2)[..., None, None] * m.K, region="porous")
    A12 = dt * disc.mobility_Y + dt**2 * A_cw + dt * A_mw
    A21 = -m.gamma * m.epsilon * disc.stiff_Y - (m.gamma / m.epsilon) * MY
    A = sp.bmat([[MY, A12], [A21, MY]], format="csr")

    # explicit transport by u_c^n in the conduit, by -K grad p_m^n (+ gravity) in the matrix
    flux_c = state.u_c.values(cc) * phi_c[..., None]
    flux_m = phi_m[..., None] * disc.darcy_flux(phi_m, state.p_m.gradients(cm), 0.0)
    b1 = MY @ state.phi.coefficients
    b1 = b1 + dt * (assemble_load(Y, None, flux_c, cells=cc) + assemble_load(Y, None, flux_m, cells=cm))
    f_vals = double_well_f(state.phi.values(disc.call), m.epsilon)
    b2 = m.gamma * assemble_load(Y, f_vals) - (m.gamma / m.epsilon) * (MY @ state.phi.coefficients)

    t_next = state.t + dt
    loads = _loads(forcing, t_next)
    if "ch1" in loads:
        b1 = b1 + dt * loads["ch1"]
    if "ch2" in loads:
        b2 = b2 + loads["ch2"]
    system = SparseSystem(A, np.concatenate([b1, b2]))
    return _constrain(system, _dirichlet(forcing, t_next), {"phi": 0, "w": Y.n_dofs})


def step_cahn_hilliard(disc, state, scheme, forcing=None, report=None):
    x = _solve(disc, cahn_hilliard_system(disc, state, scheme, forcing), scheme, report, "cahn_hilliard")
    n = disc.Y.n_dofs
    return DiscreteField(disc.Y, x[:n]), DiscreteField(disc.Y, x[n:])


def darcy_system(disc: Discretization, state: SimState, w_next: DiscreteField, scheme: SchemeParams,
                 forcing=None, beta: float | None = None) -> SparseSystem:
    """Stabilized porous pressure problem; the interface flux uses u_c^n."""
    m, dt = disc.model, scheme.dt
    beta = scheme.beta if beta is None else beta
    Qm, cm = disc.Qm, disc.cm
    A = disc.darcy_K + (beta * dt) * disc.stiff_Qm

    phi_m = state.phi.values(cm)
    G = -np.einsum("ij,cqj->cqi", m.K, phi_m[..., None] * w_next.gradients(cm))
    if m.has_gravity:
        G = G + np.einsum("ij,cqj->cqi", m.K, disc.body_force(phi_m))
    b = assemble_load(Qm, None, G) + disc.iface_G.T @ state.u_c.coefficients

    t_next = state.t + dt
    loads = _loads(forcing, t_next)
    if "darcy" in loads:
        b = b + loads["darcy"]
    system = SparseSystem(A, b)
    bcs = _dirichlet(forcing, t_next)
    if "p_m" in bcs:
        return _constrain(system, bcs, {"p_m": 0})
    return impose_zero_mean(system, Qm)


def step_darcy_pressure(disc, state, w_next, scheme, forcing=None, report=None, beta=None):
    x = _solve(disc, darcy_system(disc, state, w_next, scheme, forcing, beta), scheme, report, "darcy")
    return DiscreteField(disc.Qm, x[: disc.Qm.n_dofs])


def _momentum_coefficients(disc, state):
    """Conduit quadrature data of the lagged fields used in the momentum rows."""
    m, cc = disc.model, disc.cc
    phi = state.phi.values(cc)
    gphi = state.phi.gradients(cc)
    u = state.u_c.values(cc)
    gu = state.u_c.gradients(cc)
    rho = density(phi, m)
    div_rho_u = rho * np.einsum("cqkk->cq", gu) + mixture_slope(phi, m.rho1, m.rho2) * np.einsum(
        "cqk,cqk->cq", gphi, u
    )
    phi_i, _ = state.phi.on_interface()
    u_i, _ = state.u_c.on_interface()
    return dict(
        phi=phi,
        rho=rho,
        nu=viscosity(phi, m),
        u=u,
        div_rho_u=div_rho_u,
        rho_i=density(phi_i, m),
        nu_i=viscosity(phi_i, m),
        u_i=u_i,
    )


def _momentum_operator(disc, co, scheme, mass_coef, advection=True):
    """Velocity operator shared by both schemes (time term supplied by caller)."""
    m, dt, X = disc.model, scheme.dt, disc.X
    A = assemble_operator("mass", X, X, mass_coef / dt)
    A = A + assemble_operator("symmetric_gradient", X, X, co["nu"])
    if m.alpha_bjs > 0:
        A = A + m.alpha_bjs * assemble_operator("interface_bjs", X, X, co["nu_i"])
    if advection:
        A = A + assemble_operator("convection", X, X, (co["rho"], co["u"]))
        A = A + assemble_operator("div_advect", X, X, co["div_rho_u"])
        A = A - assemble_operator("interface_scalar", X, X, (co["rho_i"], co["u_i"]))
    return A


def momentum_system(disc: Discretization, state: SimState, phi_next: DiscreteField, w_next: DiscreteField,
                    p_m_next: DiscreteField, scheme: SchemeParams, forcing=None,
                    advection: bool = True) -> SparseSystem:
    """Free-flow velocity system with explicit pressure extrapolation.

    ``advection=False`` drops the convection, div_advect and interface
    inertia terms (they vanish identically when u_c^n = 0).
    """
    m, dt, X, cc = disc.model, scheme.dt, disc.X, disc.cc
    co = _momentum_coefficients(disc, state)
    rho_bar = 0.5 * (density(phi_next.values(cc), m) + co["rho"])
    A = _momentum_operator(disc, co, scheme, rho_bar, advection)
    A = A + (scheme.xi / dt) * disc.grad_div_X

    vals = co["rho"][..., None] * co["u"] / dt - co["phi"][..., None] * w_next.gradients(cc)
    if m.has_gravity:
        vals = vals + disc.body_force(co["phi"])
    b = assemble_load(X, vals)
    b = b + disc.div_B.T @ (2.0 * state.p_c.coefficients - state.p_c_prev.coefficients)
    b = b + (scheme.xi / dt) * (disc.grad_div_X @ state.u_c.coefficients)
    b = b - disc.iface_G @ p_m_next.coefficients

    t_next = state.t + dt
    loads = _loads(forcing, t_next)
    if "momentum" in loads:
        b = b + loads["momentum"]
    system = SparseSystem(A, b)
    bcs = _dirichlet(forcing, t_next)
    if "u_c" not in bcs:
        bcs = dict(bcs, u_c=(disc.wall_dofs, 0.0))
    return _constrain(system, bcs, {"u_c": 0})


def step_momentum(disc, state, phi_next, w_next, p_m_next, scheme, forcing=None, report=None):
    system = momentum_system(disc, state, phi_next, w_next, p_m_next, scheme, forcing)
    return DiscreteField(disc.X, _solve(disc, system, scheme, report, "momentum"))


def step_pressure_update(disc: Discretization, u_c_next: DiscreteField, p_c: DiscreteField,
                         scheme: SchemeParams, report=None) -> DiscreteField:
    """p^{n+1} = p^n - (zeta/dt) M^{-1} B u^{n+1}; no boundary data enters."""
    t0 = time.perf_counter()
    rhs = disc.div_B @ u_c_next.coefficients
    p = p_c.coefficients - (scheme.zeta / scheme.dt) * disc.mass_Qc_lu.solve(rhs)
    if report is not None:
        res = np.linalg.norm(disc.mass_Qc @ (p - p_c.coefficients) + (scheme.zeta / scheme.dt) * rhs)
        scale = max(np.linalg.norm((scheme.zeta / scheme.dt) * rhs), np.finfo(float).tiny)
        report.add("pressure_update", res / scale, 1, time.perf_counter() - t0)
    return DiscreteField(disc.Qc, p)


def darcy_velocity_qp(disc: Discretization, phi, w, p_m, gravity: bool = True):
    """-K grad p_m - K phi grad w at the matrix quadrature points."""
    cm = disc.cm
    return disc.darcy_flux(phi.values(cm), p_m.gradients(cm), w.gradients(cm), gravity)


def recover_darcy_velocity(disc: Discretization, state: SimState, p_m: DiscreteField | None = None) -> DiscreteField:
    """L2 projection of the Darcy velocity onto P1 vectors on the matrix.

    By default the state's own (current) pressure is used; pass the lagged
    pressure as ``p_m`` to get the variant that enters the decoupled scheme.
    """
    p_m = state.p_m if p_m is None else p_m
    vals = darcy_velocity_qp(disc, state.phi, state.w, p_m)
    b = assemble_load(disc.Vm, vals)
    return DiscreteField(disc.Vm, disc.mass_Vm_lu.solve(b))


def advance_decoupled(disc: Discretization, state: SimState, scheme: SchemeParams, forcing=None) -> SimState:
    """One step of the four-step decoupled scheme."""
    scheme = scheme if scheme.zeta is not None else scheme.resolved(disc.model)
    report = StepReport()
    n = state.step + 1  # the step being attempted
    try:
        phi, w = step_cahn_hilliard(disc, state, scheme, forcing, report)
    except Exception as exc:
        raise StepFailure(n, "cahn_hilliard", exc) from exc
    try:
        p_m = step_darcy_pressure(disc, state, w, scheme, forcing, report)
    except Exception as exc:
        raise StepFailure(n, "darcy", exc) from exc
    try:
        u = step_momentum(disc, state, phi, w, p_m, scheme, forcing, report)
    except Exception as exc:
        raise StepFailure(n, "momentum", exc) from exc
    p_c = step_pressure_update(disc, u, state.p_c, scheme, report)
    new = SimState(
        t=state.t + scheme.dt,
        phi=phi,
        w=w,
        u_c=u,
        p_c=p_c,
        p_c_prev=state.p_c.copy(),
        p_m=p_m,
        step=n,
        report=report,
    )
    new.u_m = recover_darcy_velocity(disc, new)
    return new


# --------------------------------------------------------------------------
# coupled scheme


@dataclass
class CoupledLayout:
    """Offsets of the blocks in the monolithic unknown vector."""

    n_pm: int
    n_u: int
    n_pc: int
    n_y: int

    @property
    def offsets(self) -> dict:
        o = {"p_m": 0}
        o["u_c"] = o["p_m"] + self.n_pm
        o["p_c"] = o["u_c"] + self.n_u
        o["phi"] = o["p_c"] + self.n_pc
        o["w"] = o["phi"] + self.n_y
        return o

    @property
    def size(self) -> int:
        return self.n_pm + self.n_u + self.n_pc + 2 * self.n_y

    def split(self, x):
        o = self.offsets
        return {
            "p_m": x[o["p_m"] : o["u_c"]],
            "u_c": x[o["u_c"] : o["p_c"]],
            "p_c": x[o["p_c"] : o["phi"]],
            "phi": x[o["phi"] : o["w"]],
            "w": x[o["w"] : self.size],
        }


def coupled_layout(disc: Discretization) -> CoupledLayout:
    return CoupledLayout(disc.Qm.n_dofs, disc.X.n_dofs, disc.Qc.n_dofs, disc.Y.n_dofs)


def coupled_system(disc: Discretization, state: SimState, phi_next: DiscreteField, scheme: SchemeParams,
                   forcing=None) -> SparseSystem:
    """Monolithic linear system for (p_m, u_c, p_c, phi, w) at the next level.

    ``phi_next`` is the current guess for phi^{n+1}; it only enters through
    sigma^{n+1} in the time derivative (rho^{n+1} u - sigma^{n+1} sigma^n u^n)/dt.
    The zero-mean multiplier (if any) is the last unknown.
    """
    m, dt = disc.model, scheme.dt
    Y, X, Qc, Qm, cc, cm = disc.Y, disc.X, disc.Qc, disc.Qm, disc.cc, disc.cm
    co = _momentum_coefficients(disc, state)
    phi_c_next = phi_next.values(cc)
    rho_next = density(phi_c_next, m)
    phi_m = state.phi.values(cm)
    Kphi = phi_m[..., None, None] * m.K

    # Darcy rows: (K grad p_m, grad q) + (K phi^n grad w, grad q) - <u . n_c, q>
    D_p = disc.darcy_K
    D_w = assemble_operator("stiffness", Y, Qm, Kphi, region="porous")
    D_u = -disc.iface_G.T
    # momentum rows
    M_u = _momentum_operator(disc, co, scheme, rho_next)
    M_p = -disc.div_B.T
    M_w = assemble_operator("weighted_gradient", Y, X, co["phi"])
    M_pm = disc.iface_G
    # continuity rows: -(div u, q) = 0
    C_u = -disc.div_B
    # phase transport rows (times dt)
    T_u = -dt * M_w.T
    T_pm = dt * assemble_operator("stiffness", Qm, Y, Kphi, region="porous")
    T_w = dt * disc.mobility_Y + dt * assemble_operator(
        "stiffness", Y, Y, (phi_m**2)[..., None, None] * m.K, region="porous"
    )
    MY = disc.mass_Y
    W_phi = -m.gamma * m.epsilon * disc.stiff_Y - (m.gamma / m.epsilon) * MY

    A = sp.bmat(
        [
            [D_p, D_u, None, None, D_w],
            [M_pm, M_u, M_p, None, M_w],
            [None, C_u, None, None, None],
            [T_pm, T_u, None, MY, T_w],
            [None, None, None, W_phi, MY],
        ],
        format="csr",
    )

    b_d = np.zeros(Qm.n_dofs)
    vals = (np.sqrt(rho_next) * sigma(co["phi"], m))[..., None] * co["u"] / dt
    b_t = MY @ state.phi.coefficients
    if m.has_gravity:
        g_m = disc.body_force(phi_m)
        b_d = b_d + assemble_load(Qm, None, np.einsum("ij,cqj->cqi", m.K, g_m))
        vals = vals + disc.body_force(co["phi"])
        b_t = b_t + dt * assemble_load(Y, None, phi_m[..., None] * np.einsum("ij,cqj->cqi", m.K, g_m), cells=cm)
    b_u = assemble_load(X, vals)
    b_c = np.zeros(Qc.n_dofs)
    f_vals = double_well_f(state.phi.values(disc.call), m.epsilon)
    b_w = m.gamma * assemble_load(Y, f_vals) - (m.gamma / m.epsilon) * (MY @ state.phi.coefficients)

    t_next = state.t + dt
    loads = _loads(forcing, t_next)
    b_d = b_d + loads.get("darcy", 0.0)
    b_u = b_u + loads.get("momentum", 0.0)
    b_t = b_t + dt * loads.get("ch1", 0.0)
    b_w = b_w + loads.get("ch2", 0.0)
    system = SparseSystem(A, np.concatenate([b_d, b_u, b_c, b_t, b_w]))

    bcs = _dirichlet(forcing, t_next)
    if "u_c" not in bcs:
        bcs = dict(bcs, u_c=(disc.wall_dofs, 0.0))
    system = _constrain(system, bcs, coupled_layout(disc).offsets)
    if "p_m" not in bcs:
        mvec = np.zeros(system.matrix.shape[0])
        mvec[: Qm.n_dofs] = Qm.integral_vector()
        col = sp.csr_matrix(mvec[:, None])
        system = SparseSystem(
            sp.bmat([[system.matrix, col], [col.T, None]], format="csr"),
            np.concatenate([system.rhs, [0.0]]),
        )
    return system


def advance_coupled(disc: Discretization, state: SimState, scheme: SchemeParams, forcing=None) -> SimState:
    """One step of the coupled scheme with Picard iteration on sigma^{n+1}."""
    layout = coupled_layout(disc)
    report = StepReport()
    phi_guess = state.phi
    n = state.step + 1
    t0 = time.perf_counter()
    iterations = 0
    residual = 0.0
    # with equal densities sigma is constant and one solve is exact
    max_iter = 1 if disc.model.rho1 == disc.model.rho2 else scheme.picard_maxiter
    parts = None
    for k in range(max_iter):
        try:
            x, info = solve_sparse(
                coupled_system(disc, state, phi_guess, scheme, forcing),
                method=scheme.solver,
                rel_tol=scheme.rel_tol,
                return_info=True,
                cache=disc.factors,
                key="coupled",
            )
        except Exception as exc:
            raise StepFailure(n, "coupled", exc) from exc
        iterations = k + 1
        residual = max(residual, info.residual)
        parts = layout.split(x)
        change = np.max(np.abs(parts["phi"] - phi_guess.coefficients))
        phi_guess = DiscreteField(disc.Y, parts["phi"])
        if change <= scheme.picard_tol * max(1.0, np.max(np.abs(parts["phi"]))):
            break
    else:
        if max_iter > 1:
            raise StepFailure(n, "coupled", SolverError(
                f"Picard iteration did not converge in {max_iter} iterations (last change {change:.3e})"
            ))
    report.add("coupled", residual, iterations, time.perf_counter() - t0)
    new = SimState(
        t=state.t + scheme.dt,
        phi=DiscreteField(disc.Y, parts["phi"]),
        w=DiscreteField(disc.Y, parts["w"]),
        u_c=DiscreteField(disc.X, parts["u_c"]),
        p_c=DiscreteField(disc.Qc, parts["p_c"]),
        p_c_prev=state.p_c.copy(),
        p_m=DiscreteField(disc.Qm, parts["p_m"]),
        step=n,
        report=report,
    )
    new.u_m = recover_darcy_velocity(disc, new)
    return new


def advance(disc: Discretization, state: SimState, scheme: SchemeParams, forcing=None) -> SimState:
    if scheme.scheme == "coupled":
        return advance_coupled(disc, state, scheme, forcing)
    return advance_decoupled(disc, state, scheme, forcing)


def simulate(disc: Discretization, state: SimState, scheme: SchemeParams, n_steps: int | None = None,
             forcing=None, callback=None) -> SimState:
    """Run ``n_steps`` steps (default ``scheme.n_steps``); ``callback(prev, new)``
    is called after every step."""
    scheme = scheme.resolved(disc.model)
    n_steps = scheme.n_steps if n_steps is None else n_steps
    for _ in range(n_steps):
        new = advance(disc, state, scheme, forcing)
        if callback is not None:
            callback(state, new)
        state = new
    return state
