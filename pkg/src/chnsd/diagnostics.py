"""Discrete energies, dissipation and convergence bookkeeping.

Every integral uses the same quadrature rule as the assembly so that the
discrete energy identities of the schemes hold up to round-off.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import DiscreteField
from .physics import ModelParams, SchemeParams, density, double_well_F, viscosity
from .scheme import Discretization, SimState, darcy_velocity_qp


def _integrate(disc: Discretization, cells: np.ndarray, values: np.ndarray) -> float:
    return float(np.sum(disc.Y.geom.qw[cells] * values))


def _iface_integrate(disc: Discretization, values: np.ndarray) -> float:
    return float(np.sum(disc.Y.geom.interface()["w"] * values))


def kinetic_energy(disc: Discretization, state: SimState) -> float:
    cc = disc.cc
    rho = density(state.phi.values(cc), disc.model)
    u = state.u_c.values(cc)
    return 0.5 * _integrate(disc, cc, rho * np.sum(u * u, axis=-1))


def free_energy(disc: Discretization, state: SimState) -> float:
    m, c = disc.model, disc.call
    g = state.phi.gradients(c)
    F = double_well_F(state.phi.values(c), m.epsilon)
    return m.gamma * _integrate(disc, c, 0.5 * m.epsilon * np.sum(g * g, axis=-1) + F)


def energy(disc: Discretization, state: SimState) -> float:
    """E = 1/2 ||sigma u||^2 on the conduit + gamma (eps/2 ||grad phi||^2 + int F)."""
    return kinetic_energy(disc, state) + free_energy(disc, state)


def div_u_norm(disc: Discretization, u_c: DiscreteField) -> float:
    div = np.einsum("cqkk->cq", u_c.gradients(disc.cc))
    return math.sqrt(_integrate(disc, disc.cc, div**2))


def l2_norm_sq(disc: Discretization, f: DiscreteField, cells=None) -> float:
    cells = f.space.cells if cells is None else cells
    v = f.values(cells)
    return _integrate(disc, cells, v * v if v.ndim == 2 else np.sum(v * v, axis=-1))


def darcy_gradient_energy(disc: Discretization, p_m: DiscreteField) -> float:
    """(K grad p_m, grad p_m) on the matrix."""
    g = p_m.gradients(disc.cm)
    return _integrate(disc, disc.cm, np.einsum("cqi,ij,cqj->cq", g, disc.model.K, g))


def modified_energy_terms(disc: Discretization, state: SimState, scheme: SchemeParams) -> dict:
    scheme = scheme if scheme.zeta is not None else scheme.resolved(disc.model)
    dt = scheme.dt
    return {
        "E": energy(disc, state),
        "grad_div": 0.5 * scheme.xi * div_u_norm(disc, state.u_c) ** 2,
        "pressure": dt**2 / (2.0 * scheme.zeta) * l2_norm_sq(disc, state.p_c),
        "darcy": 0.5 * dt * darcy_gradient_energy(disc, state.p_m),
    }


def modified_energy(disc: Discretization, state: SimState, scheme: SchemeParams) -> float:
    """E + xi/2 ||div u||^2 + dt^2/(2 zeta) ||p_c||^2 + dt/2 ||sqrt(K) grad p_m||^2."""
    return sum(modified_energy_terms(disc, state, scheme).values())


def _viscous(disc, nu, u_c):
    g = u_c.gradients(disc.cc)
    D = 0.5 * (g + np.swapaxes(g, -1, -2))
    return _integrate(disc, disc.cc, 2.0 * nu * np.sum(D * D, axis=(-1, -2)))


def _mobility(disc, w):
    m = disc.model
    out = 0.0
    for cells, M in ((disc.cc, m.M_c), (disc.cm, m.M_m)):
        g = w.gradients(cells)
        out += M * _integrate(disc, cells, np.sum(g * g, axis=-1))
    return out


def _bjs(disc, phi, u_c):
    m = disc.model
    if m.alpha_bjs == 0:
        return 0.0
    phi_i, _ = phi.on_interface()
    u_i, _ = u_c.on_interface()
    return m.alpha_bjs * _iface_integrate(disc, viscosity(phi_i, m) * u_i[..., 0] ** 2)


def _interface_gradient(disc, prev, new):
    m = disc.model
    g = new.phi.gradients(disc.call) - prev.phi.gradients(disc.call)
    return 0.5 * m.gamma * m.epsilon * _integrate(disc, disc.call, np.sum(g * g, axis=-1))


def dissipation_terms(disc: Discretization, prev: SimState, new: SimState, scheme: SchemeParams) -> dict:
    """The six nonnegative terms dissipated by one decoupled step.

    The velocity entering the viscous and slip terms is u_c^{n+1}; the lagged
    pressure difference p_c^n - p_c^{n-1} is taken from ``prev``.
    """
    scheme = scheme if scheme.zeta is not None else scheme.resolved(disc.model)
    m, dt = disc.model, scheme.dt
    nu = viscosity(prev.phi.values(disc.cc), m)
    dp = DiscreteField(prev.p_c.space, prev.p_c.coefficients - prev.p_c_prev.coefficients)
    dpm = DiscreteField(prev.p_m.space, new.p_m.coefficients - prev.p_m.coefficients)
    return {
        "viscous": dt * _viscous(disc, nu, new.u_c),
        "mobility": dt * _mobility(disc, new.w),
        "interface": _interface_gradient(disc, prev, new),
        "pressure": dt**2 / (2.0 * scheme.zeta) * l2_norm_sq(disc, dp),
        "darcy": 0.25 * dt * darcy_gradient_energy(disc, dpm),
        "slip": dt * _bjs(disc, prev.phi, new.u_c),
    }


def dissipation(disc: Discretization, prev: SimState, new: SimState, scheme: SchemeParams) -> float:
    return sum(dissipation_terms(disc, prev, new, scheme).values())


def coupled_dissipation_terms(disc: Discretization, prev: SimState, new: SimState, scheme: SchemeParams) -> dict:
    """Terms dissipated by one coupled step, with u_m = -K grad p_m^{n+1} - K phi^n grad w^{n+1}."""
    m, dt, cc, cm = disc.model, scheme.dt, disc.cc, disc.cm
    nu = viscosity(prev.phi.values(cc), m)
    s_new = np.sqrt(density(new.phi.values(cc), m))[..., None]
    s_old = np.sqrt(density(prev.phi.values(cc), m))[..., None]
    jump = s_new * new.u_c.values(cc) - s_old * prev.u_c.values(cc)
    um = darcy_velocity_qp(disc, prev.phi, new.w, new.p_m, gravity=False)
    Kinv = np.linalg.inv(m.K)
    return {
        "inertia": 0.5 * _integrate(disc, cc, np.sum(jump * jump, axis=-1)),
        "viscous": dt * _viscous(disc, nu, new.u_c),
        "darcy": dt * _integrate(disc, cm, np.einsum("cqi,ij,cqj->cq", um, Kinv, um)),
        "interface": _interface_gradient(disc, prev, new),
        "mobility": dt * _mobility(disc, new.w),
        "slip": dt * _bjs(disc, prev.phi, new.u_c),
    }


def coupled_dissipation(disc: Discretization, prev: SimState, new: SimState, scheme: SchemeParams) -> float:
    return sum(coupled_dissipation_terms(disc, prev, new, scheme).values())


def phase_mass(disc: Discretization, state: SimState) -> float:
    return _integrate(disc, disc.call, state.phi.values(disc.call))


def phase_centroid(disc: Discretization, state: SimState, phase: int = 1) -> np.ndarray:
    """Centroid of the region occupied by phase 1 (phi > 0) or phase 2,
    weighted by the smooth indicator (1 +/- phi)/2."""
    c = disc.call
    phi = np.clip(state.phi.values(c), -1.0, 1.0)
    chi = 0.5 * (1.0 + phi) if phase == 1 else 0.5 * (1.0 - phi)
    x = disc.Y.geom.qp[c]
    mass = _integrate(disc, c, chi)
    return np.array([_integrate(disc, c, chi * x[..., 0]), _integrate(disc, c, chi * x[..., 1])]) / mass


# --------------------------------------------------------------------------
# energy records


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    E: float
    E_mod: float
    D: float
    phase_mass: float
    div_u: float

    FIELDS = ("t", "E", "E_mod", "D", "phase_mass", "div_u")


def energy_record(disc: Discretization, state: SimState, scheme: SchemeParams, prev: SimState | None = None) -> EnergyRecord:
    """Record for ``state``; D is the dissipation of the step prev -> state
    (zero for the initial snapshot).  The coupled scheme reports its own
    dissipation and E_mod equals E."""
    coupled = scheme.scheme == "coupled"
    E = energy(disc, state)
    E_mod = E if coupled else modified_energy(disc, state, scheme)
    if prev is None:
        D = 0.0
    elif coupled:
        D = coupled_dissipation(disc, prev, state, scheme)
    else:
        D = dissipation(disc, prev, state, scheme)
    return EnergyRecord(state.t, E, E_mod, D, phase_mass(disc, state), div_u_norm(disc, state.u_c))


# --------------------------------------------------------------------------
# error norms and convergence


def error_norms(field: DiscreteField, exact, exact_grad, cells=None) -> tuple[float, float]:
    """(L2, H1) norms of ``field - exact`` over ``cells`` (default: the field's region).

    ``exact(x, y)`` returns values shaped like the field at quadrature points
    ((c, q) or (c, q, 2)); ``exact_grad`` the matching gradients.
    """
    space = field.space
    cells = space.cells if cells is None else cells
    geom = space.geom
    x = geom.qp[cells]
    w = geom.qw[cells]
    e = field.values(cells) - np.asarray(exact(x[..., 0], x[..., 1]))
    ge = field.gradients(cells) - np.asarray(exact_grad(x[..., 0], x[..., 1]))
    l2 = np.sum(w * (e * e if e.ndim == 2 else np.sum(e * e, axis=-1)))
    semi = np.sum(w * np.sum((ge * ge).reshape(ge.shape[0], ge.shape[1], -1), axis=-1))
    return math.sqrt(l2), math.sqrt(l2 + semi)


def difference_norms(a: DiscreteField, b: DiscreteField) -> tuple[float, float]:
    """(L2, H1) norms of a - b on the same space."""
    if a.space is not b.space:
        raise ValueError("fields live on different spaces")
    d = DiscreteField(a.space, a.coefficients - b.coefficients)
    cells = a.space.cells
    geom = a.space.geom
    w = geom.qw[cells]
    v, g = d.values(cells), d.gradients(cells)
    l2 = np.sum(w * (v * v if v.ndim == 2 else np.sum(v * v, axis=-1)))
    semi = np.sum(w * np.sum((g * g).reshape(g.shape[0], g.shape[1], -1), axis=-1))
    return math.sqrt(l2), math.sqrt(l2 + semi)


def convergence_order(errors, steps) -> list[float]:
    """log(e_j / e_{j+1}) / log(s_j / s_{j+1}) for consecutive entries.

    A pair containing a zero error has no defined order; it is reported as
    ``inf`` (exact).
    """
    errors = [float(e) for e in errors]
    steps = [float(s) for s in steps]
    if len(errors) != len(steps):
        raise ValueError("errors and steps differ in length")
    if len(errors) < 2:
        raise ValueError("need at least two entries")
    if any(e < 0 for e in errors) or any(s <= 0 for s in steps):
        raise ValueError("errors must be nonnegative and steps positive")
    out = []
    for (e0, e1), (s0, s1) in zip(zip(errors, errors[1:]), zip(steps, steps[1:])):
        if e0 == 0.0 or e1 == 0.0:
            out.append(math.inf)
        else:
            out.append(math.log(e0 / e1) / math.log(s0 / s1))
    return out


@dataclass
class ConvergenceTable:
    """Error norms per field on a sequence of mesh sizes or time steps."""

    steps: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    label: str = "h"

    def add(self, step: float, **errs: float) -> None:
        self.steps.append(float(step))
        for k, v in errs.items():
            self.errors.setdefault(k, []).append(float(v))

    def orders(self, name: str) -> list[float]:
        return convergence_order(self.errors[name], self.steps)

    def final_order(self, name: str) -> float:
        return self.orders(name)[-1]

    def rows(self) -> list[list]:
        names = list(self.errors)
        table = []
        orders = {k: [math.nan] + self.orders(k) if len(self.steps) > 1 else [math.nan] for k in names}
        for i, s in enumerate(self.steps):
            row = [s]
            for k in names:
                row += [self.errors[k][i], orders[k][i]]
            table.append(row)
        return table

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        header = ["h_or_dt"]
        for k in self.errors:
            header += [f"err_{k}", f"order_{k}"]
        wr.writerow(header)
        for row in self.rows():
            out = []
            for v in row:
                if isinstance(v, float) and math.isnan(v):
                    out.append("")
                elif isinstance(v, float) and math.isinf(v):
                    out.append("exact")
                else:
                    out.append(format(v, ".10g"))
            wr.writerow(out)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def format(self) -> str:
        names = list(self.errors)
        lines = [f"{self.label:>10s} " + " ".join(f"{'e_' + k:>12s} {'order':>6s}" for k in names)]
        for row in self.rows():
            cells = [f"{row[0]:10.4g}"]
            for j in range(len(names)):
                e, o = row[1 + 2 * j], row[2 + 2 * j]
                cells.append(f"{e:12.4e} {'' if math.isnan(o) else format(o, '6.2f'):>6s}")
            lines.append(" ".join(cells))
        return "\n".join(lines)
