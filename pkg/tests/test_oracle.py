"""Every substep against the dense loop-based reference on a 2x2-cell mesh."""
import numpy as np
import pytest

from chnsd.mesh import DomainLayout, build_layered_mesh
from chnsd.physics import ModelParams, SchemeParams
from chnsd.scheme import (
    Discretization,
    advance_coupled,
    initial_state,
    step_cahn_hilliard,
    step_darcy_pressure,
    step_momentum,
    step_pressure_update,
)
from chnsd.fem import DiscreteField

from oracle import Oracle, to_package_order

TOL = 1e-9


def random_state(disc, seed):
    rng = np.random.default_rng(seed)
    st = initial_state(
        disc,
        phi=rng.uniform(-0.9, 0.9, disc.Y.n_dofs),
        w=rng.normal(size=disc.Y.n_dofs),
        u_c=rng.normal(size=disc.X.n_dofs),
        p_c=rng.normal(size=disc.Qc.n_dofs),
        p_m=rng.normal(size=disc.Qm.n_dofs),
    )
    st.p_c_prev = DiscreteField(disc.Qc, rng.normal(size=disc.Qc.n_dofs))
    return st


def setup(position, gravity, rho=(1.0, 3.0)):
    layout = DomainLayout((0.0, 1.0), (0.0, 2.0), 1.0, position)
    mesh = build_layered_mesh(2, 2, layout)
    model = ModelParams(
        rho1=rho[0], rho2=rho[1], nu=(1.0, 2.0), M=(0.5, 1.5), gamma=0.3, epsilon=0.4,
        K=[[1.0, 0.2], [0.2, 0.5]], alpha_bjs=0.7, gravity=gravity, rho_ref=0.5,
    )
    scheme = SchemeParams(dt=0.05, T=1.0, picard_tol=1e-14).resolved(model)
    return Discretization(mesh, model), Oracle(mesh, model, scheme), scheme


def as_package(oracle_field, pkg_space):
    return to_package_order(oracle_field.space, oracle_field.coef, pkg_space)


def as_package_vec(pair, pkg_space):
    return np.concatenate([as_package(pair[0], pkg_space), as_package(pair[1], pkg_space)])


CASES = [("top", (0.0, 0.0)), ("top", (0.0, -10.0)), ("bottom", (1.0, -10.0))]


@pytest.mark.parametrize("position,gravity", CASES)
def test_decoupled_substeps_match_dense_oracle(position, gravity):
    disc, orc, scheme = setup(position, gravity)
    state = random_state(disc, 7)
    ost = orc.state_from_package(state)

    phi, w = step_cahn_hilliard(disc, state, scheme)
    ophi, ow = orc.cahn_hilliard(ost)
    assert np.max(np.abs(phi.coefficients - as_package(ophi, disc.Y))) < TOL
    assert np.max(np.abs(w.coefficients - as_package(ow, disc.Y))) < TOL

    # later substeps get identical inputs so each is checked in isolation
    p_m = step_darcy_pressure(disc, state, w, scheme)
    op_m = orc.darcy(ost, ow)
    assert np.max(np.abs(p_m.coefficients - as_package(op_m, disc.Qm))) < TOL

    u = step_momentum(disc, state, phi, w, p_m, scheme)
    ou = orc.momentum(ost, ophi, ow, op_m)
    assert np.max(np.abs(u.coefficients - as_package_vec(ou, disc.X))) < TOL

    p_c = step_pressure_update(disc, u, state.p_c, scheme)
    op_c = orc.pressure_update(ou, ost["p_c"])
    assert np.max(np.abs(p_c.coefficients - as_package(op_c, disc.Qc))) < TOL


@pytest.mark.parametrize("position,gravity", CASES)
def test_coupled_step_matches_dense_oracle(position, gravity):
    disc, orc, scheme = setup(position, gravity)
    state = random_state(disc, 11)
    new = advance_coupled(disc, state, scheme)
    ref = orc.coupled_step(orc.state_from_package(state))
    for name, space in (("phi", disc.Y), ("w", disc.Y), ("p_m", disc.Qm), ("p_c", disc.Qc)):
        got = getattr(new, name).coefficients
        assert np.max(np.abs(got - as_package(ref[name], space))) < TOL, name
    assert np.max(np.abs(new.u_c.coefficients - as_package_vec(ref["u"], disc.X))) < TOL


def test_oracle_detects_a_perturbed_coefficient():
    # sanity check that the comparison has teeth
    disc, orc, scheme = setup("top", (0.0, -10.0))
    state = random_state(disc, 3)
    phi, w = step_cahn_hilliard(disc, state, scheme)
    orc.m = ModelParams(rho1=1.0, rho2=3.0, nu=(1.0, 2.0), M=(0.5, 1.5), gamma=0.3, epsilon=0.41,
                        K=[[1.0, 0.2], [0.2, 0.5]], alpha_bjs=0.7, gravity=(0.0, -10.0), rho_ref=0.5)
    ophi, _ = orc.cahn_hilliard(orc.state_from_package(state))
    assert np.max(np.abs(phi.coefficients - as_package(ophi, disc.Y))) > 1e-6
