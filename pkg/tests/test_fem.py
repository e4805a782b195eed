import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from chnsd.fem import (
    DEFAULT_RULE,
    AssemblyError,
    DiscreteField,
    ElementKind,
    FactorCache,
    FunctionSpace,
    SingularSystemError,
    SparseSystem,
    apply_dirichlet,
    assemble_load,
    assemble_operator,
    eval_basis,
    impose_zero_mean,
    solve_sparse,
)
from chnsd.mesh import DomainLayout, _assemble, build_layered_mesh, refine_uniform

P1, P2, P2V = ElementKind.P1_SCALAR, ElementKind.P2_SCALAR, ElementKind.P2_VECTOR2
UNIT_SQUARE = DomainLayout((0, 1), (0, 2), 1.0, "bottom")


def one_triangle():
    return _assemble(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), np.array([0]),
                     UNIT_SQUARE)


def two_triangles():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return _assemble(nodes, np.array([[0, 1, 2], [0, 2, 3]]), np.array([0, 0]), UNIT_SQUARE)


barycentric = st.tuples(st.floats(0, 1), st.floats(0, 1)).filter(lambda p: p[0] + p[1] <= 1).map(
    lambda p: np.array([1 - p[0] - p[1], p[0], p[1]])
)


# -- reference elements and quadrature ------------------------------------

def test_p1_lagrange_property():
    vals, _ = eval_basis(P1, np.eye(3))
    assert np.array_equal(vals, np.eye(3))


def test_p2_lagrange_property():
    verts = np.eye(3)
    mids = np.array([[0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]])
    vals, _ = eval_basis(P2, np.vstack([verts, mids]))
    assert np.allclose(vals, np.eye(6), atol=1e-15)


@given(barycentric)
def test_p2_partition_of_unity(b):
    vals, grads = eval_basis(P2, b)
    assert vals.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(grads.sum(axis=0), 0.0, atol=1e-13)


def test_local_dof_counts():
    b = np.array([1 / 3, 1 / 3, 1 / 3])
    assert eval_basis(P1, b)[0].shape == (3,)
    assert eval_basis(P2, b)[0].shape == (6,)
    assert eval_basis(P2V, b)[0].shape == (12, 2)
    assert [k.n_local for k in (P1, P2, P2V)] == [3, 6, 12]


def test_p2_gradients_match_finite_differences():
    b = np.array([0.2, 0.3, 0.5])
    _, g = eval_basis(P2, b)
    h = 1e-6
    for k, d in enumerate([np.array([-1.0, 1.0, 0.0]), np.array([-1.0, 0.0, 1.0])]):
        fd = (eval_basis(P2, b + h * d)[0] - eval_basis(P2, b - h * d)[0]) / (2 * h)
        assert np.allclose(g[:, k], fd, atol=1e-8)


def test_triangle_rule_is_exact_to_degree_five():
    r = DEFAULT_RULE
    xi, eta = r.points[:, 1], r.points[:, 2]
    assert r.weights.sum() == pytest.approx(0.5, abs=1e-15)
    for a in range(6):
        for b in range(6 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert np.dot(r.weights, xi**a * eta**b) == pytest.approx(exact, abs=1e-15)


def test_edge_rule_is_exact_to_degree_five():
    r = DEFAULT_RULE
    for k in range(6):
        assert np.dot(r.edge_weights, r.edge_points**k) == pytest.approx(1 / (k + 1), abs=1e-15)


# -- assembly -------------------------------------------------------------

def test_p1_mass_on_the_unit_right_triangle():
    V = FunctionSpace(one_triangle(), P1)
    M = assemble_operator("mass", V, V).toarray()
    assert np.allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24, atol=1e-16)


@pytest.mark.parametrize("element", [P1, P2])
def test_stiffness_annihilates_constants(element):
    V = FunctionSpace(build_layered_mesh(3, 4), element)
    A = assemble_operator("stiffness", V, V, 2.5)
    assert np.max(np.abs(A @ np.ones(V.n_dofs))) < 1e-12
    K = np.array([[2.0, 0.3], [0.3, 1.0]])
    A = assemble_operator("stiffness", V, V, K)
    assert np.max(np.abs(A @ np.ones(V.n_dofs))) < 1e-12


def test_stiffness_energy_of_a_linear_function():
    # (grad u, grad u) for u = 2x - y over [0,1]x[0,2] is 5 * area
    V = FunctionSpace(build_layered_mesh(2, 4), P2)
    u = V.interpolate(lambda x, y: 2 * x - y)
    A = assemble_operator("stiffness", V, V)
    assert u @ A @ u == pytest.approx(10.0, rel=1e-13)


@pytest.mark.parametrize("element", [P1, P2, P2V])
def test_mass_matrices_are_spd(element):
    V = FunctionSpace(build_layered_mesh(4, 8), element, "conduit" if element is P2V else "all")
    M = assemble_operator("mass", V, V).toarray()
    assert np.allclose(M, M.T, atol=1e-16)
    assert np.linalg.eigvalsh(M).min() > 0


def grad_div_residual(n):
    mesh = build_layered_mesh(n, 2 * n, DomainLayout(conduit_position="top"))
    X = FunctionSpace(mesh, P2V, "conduit")
    u = X.interpolate(lambda x, y: (x**2 * (y - 1) ** 2, -2 / 3 * x * (y - 1) ** 3))
    return np.linalg.norm(assemble_operator("grad_div", X, X) @ u)


def test_grad_div_of_divergence_free_interpolant_vanishes_at_rate_two():
    r = [grad_div_residual(n) for n in (4, 8, 16)]
    rates = [math.log2(a / b) for a, b in zip(r, r[1:])]
    assert min(rates) >= 2.0 - 0.05, (r, rates)


def test_convection_plus_div_advect_is_an_interface_integral():
    # (rho (a.grad) v, v) + 1/2 (div(rho a) v, v) = 1/2 <rho a.n_c, |v|^2> when v = 0 on the walls
    mesh = build_layered_mesh(3, 4, DomainLayout(conduit_position="bottom"))
    X = FunctionSpace(mesh, P2V, "conduit")
    rho = 2.0
    a = lambda x, y: np.stack([y, x + y], axis=-1)  # noqa: E731
    C = assemble_operator("convection", X, X, (rho, a))
    D = assemble_operator("div_advect", X, X, rho * 1.0)  # div(rho a) = rho
    v = np.random.default_rng(0).normal(size=X.n_dofs)
    walls = X.outer_boundary_dofs("conduit")
    v[walls] = 0.0
    lhs = v @ (C + D) @ v
    iq = X.geom.interface()
    vi, _ = DiscreteField(X, v).on_interface()
    an = np.einsum("ckd,cd->ck", a(iq["x"][..., 0], iq["x"][..., 1]), iq["normal"])
    rhs = 0.5 * np.sum(iq["w"] * rho * an * np.sum(vi**2, axis=-1))
    assert lhs == pytest.approx(rhs, rel=1e-11, abs=1e-12)


def test_bjs_matrix_is_psd_with_normal_fields_in_its_kernel():
    mesh = build_layered_mesh(3, 4)
    X = FunctionSpace(mesh, P2V, "conduit")
    B = assemble_operator("interface_bjs", X, X, 1.5).toarray()
    assert np.allclose(B, B.T, atol=1e-15)
    assert np.linalg.eigvalsh(B).min() > -1e-13
    # any field with zero x-component has zero tangential trace
    v = np.random.default_rng(1).normal(size=X.n_dofs)
    v[: X.n_scalar] = 0.0
    assert np.max(np.abs(B @ v)) < 1e-14


def test_interface_normal_pairs_pressure_with_normal_velocity():
    # <q, v.n_c> with q = 1 and v = (0, 1) on the top conduit: n_c = (0, -1), length 1
    mesh = build_layered_mesh(2, 4)
    X = FunctionSpace(mesh, P2V, "conduit")
    Q = FunctionSpace(mesh, P1, "porous")
    G = assemble_operator("interface_normal", Q, X)
    v = X.interpolate(lambda x, y: (0.0 * x, 1.0 + 0 * y))
    assert v @ G @ np.ones(Q.n_dofs) == pytest.approx(-1.0, rel=1e-13)


def test_region_mismatch_is_rejected():
    mesh = build_layered_mesh(2, 4)
    Xc = FunctionSpace(mesh, P2V, "conduit")
    Qc = FunctionSpace(mesh, P1, "conduit")
    with pytest.raises(AssemblyError):
        assemble_operator("interface_normal", Qc, Xc)
    with pytest.raises(AssemblyError):
        assemble_operator("interface_bjs", Xc, FunctionSpace(mesh, P2, "all"))
    with pytest.raises(AssemblyError):
        assemble_operator("bogus", Qc, Qc)


def test_assembly_is_bitwise_deterministic():
    mesh = build_layered_mesh(4, 8)
    X = FunctionSpace(mesh, P2V, "conduit")
    c = lambda x, y: 1 + x * y  # noqa: E731
    A = assemble_operator("symmetric_gradient", X, X, c)
    B = assemble_operator("symmetric_gradient", FunctionSpace(mesh, P2V, "conduit"), X, c)
    assert np.array_equal(A.indptr, B.indptr) and np.array_equal(A.indices, B.indices)
    assert np.array_equal(A.data, B.data)


def test_csr_has_no_duplicate_columns():
    V = FunctionSpace(build_layered_mesh(3, 4), P2)
    A = assemble_operator("mass", V, V)
    for i in range(V.n_dofs):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        assert len(cols) == len(set(cols))


# -- constraints and solves ----------------------------------------------

def poisson(mesh, element, u_exact):
    V = FunctionSpace(mesh, element)
    A = assemble_operator("stiffness", V, V)
    bd = V.outer_boundary_dofs()
    sys_ = apply_dirichlet(SparseSystem(A, np.zeros(V.n_dofs)), bd, V.interpolate(u_exact)[bd])
    return solve_sparse(sys_), V.interpolate(u_exact)


def test_empty_dirichlet_list_is_a_no_op():
    A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    s = apply_dirichlet(SparseSystem(A, np.array([3.0, 3.0])), [], [])
    assert np.array_equal(s.matrix.toarray(), A.toarray()) and np.array_equal(s.rhs, [3.0, 3.0])


def test_fully_constrained_system_returns_the_data():
    A = sp.random(6, 6, density=0.5, random_state=0, format="csr") + sp.eye(6)
    vals = np.arange(6.0) - 2.5
    s = apply_dirichlet(SparseSystem(A.tocsr(), np.ones(6)), np.arange(6), vals)
    assert np.array_equal(solve_sparse(s), vals)


def test_conflicting_dirichlet_values_are_rejected():
    A = sp.eye(3, format="csr")
    with pytest.raises(AssemblyError, match="conflicting"):
        apply_dirichlet(SparseSystem(A, np.zeros(3)), [1, 1], [0.0, 1.0])
    # duplicates with equal values are fine
    apply_dirichlet(SparseSystem(A, np.zeros(3)), [1, 1], [2.0, 2.0])


def test_two_triangle_poisson_reproduces_linear_data():
    u, ref = poisson(two_triangles(), P1, lambda x, y: 1 + 2 * x - 3 * y)
    assert np.max(np.abs(u - ref)) < 1e-12


@pytest.mark.parametrize("element", [P1, P2])
def test_poisson_reproduces_linear_data_with_interior_nodes(element):
    u, ref = poisson(build_layered_mesh(4, 6), element, lambda x, y: 0.5 - x + 4 * y)
    assert np.max(np.abs(u - ref)) < 1e-12


def test_p2_poisson_reproduces_quadratics():
    # -lap(x^2 + y^2) = -4
    mesh = build_layered_mesh(3, 4)
    V = FunctionSpace(mesh, P2)
    exact = lambda x, y: x**2 + y**2  # noqa: E731
    A = assemble_operator("stiffness", V, V)
    b = assemble_load(V, np.full((len(V.cells), DEFAULT_RULE.nq), -4.0))
    bd = V.outer_boundary_dofs()
    u = solve_sparse(apply_dirichlet(SparseSystem(A, b), bd, V.interpolate(exact)[bd]))
    assert np.max(np.abs(u - V.interpolate(exact))) < 1e-12


def test_solve_examples():
    b = np.array([0.3, -2.0, 7.0])
    assert np.array_equal(solve_sparse(SparseSystem(sp.eye(3, format="csr"), b)), b)
    x = solve_sparse(SparseSystem(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0])))
    assert np.allclose(x, [1.0, 1.0], atol=1e-15)


@pytest.mark.parametrize("method", ["direct", "iterative"])
def test_random_spd_against_dense_solve(method):
    rng = np.random.default_rng(5)
    B = rng.normal(size=(50, 50))
    A = B @ B.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    x, info = solve_sparse(SparseSystem(sp.csr_matrix(A), b), method=method, return_info=True)
    assert np.max(np.abs(x - np.linalg.solve(A, b))) <= 1e-9
    assert info.residual <= 1e-10


def test_singular_matrix_fails_loudly():
    A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularSystemError):
        solve_sparse(SparseSystem(A, np.array([1.0, 2.0])))


def test_pure_neumann_without_constraint_is_singular():
    V = FunctionSpace(build_layered_mesh(2, 2), P1, "porous", constraint="zero_mean")
    A = assemble_operator("stiffness", V, V)
    with pytest.raises(SingularSystemError):
        solve_sparse(SparseSystem(A, np.arange(V.n_dofs, dtype=float) - 1.0))


def test_factor_cache_reuses_the_old_factorization():
    rng = np.random.default_rng(9)
    B = rng.normal(size=(40, 40))
    A = B @ B.T + 40 * np.eye(40)
    cache = FactorCache()
    b = rng.normal(size=40)
    solve_sparse(SparseSystem(sp.csr_matrix(A), b), cache=cache, key="k")
    A2 = A + 1e-3 * np.diag(rng.uniform(size=40))
    x, info = solve_sparse(SparseSystem(sp.csr_matrix(A2), b), cache=cache, key="k", return_info=True)
    assert cache.factorizations == 1 and "reused" in info.method
    assert np.max(np.abs(x - np.linalg.solve(A2, b))) < 1e-9
    # a system of another shape under the same key is factorized afresh
    solve_sparse(SparseSystem(sp.eye(41, format="csr"), np.ones(41)), cache=cache, key="k")
    assert cache.factorizations == 2


def neumann_problem():
    # 8 triangles in the porous region of a 2x4 mesh
    mesh = build_layered_mesh(2, 4)
    Q = FunctionSpace(mesh, P1, "porous", constraint="zero_mean")
    assert len(Q.cells) == 8
    A = assemble_operator("stiffness", Q, Q) + 0.0 * assemble_operator("mass", Q, Q)
    xy = Q.scalar_coords
    b = assemble_operator("mass", Q, Q) @ np.cos(np.pi * xy[:, 0])
    return Q, A, b


def test_zero_mean_solution_has_zero_mean():
    Q, A, b = neumann_problem()
    x = solve_sparse(impose_zero_mean(SparseSystem(A, b), Q))
    assert abs(Q.integral_vector() @ x[:-1]) < 1e-12


def test_constant_shift_of_the_rhs_lands_in_the_multiplier():
    Q, A, b = neumann_problem()
    x0 = solve_sparse(impose_zero_mean(SparseSystem(A, b), Q))
    x1 = solve_sparse(impose_zero_mean(SparseSystem(A, b + 3.7 * Q.integral_vector()), Q))
    assert np.max(np.abs(x0[:-1] - x1[:-1])) < 1e-12
    assert x1[-1] - x0[-1] == pytest.approx(3.7, rel=1e-10)


def test_zero_mean_matches_pin_and_subtract_oracle():
    Q, A, b = neumann_problem()
    x = solve_sparse(impose_zero_mean(SparseSystem(A, b), Q))[:-1]
    # oracle: pin dof 0, dense solve, subtract the mean
    Ad = A.toarray()
    keep = np.arange(1, Q.n_dofs)
    y = np.zeros(Q.n_dofs)
    y[keep] = np.linalg.solve(Ad[np.ix_(keep, keep)], b[keep])
    m = Q.integral_vector()
    y -= (m @ y) / m.sum()
    assert np.max(np.abs(x - y)) < 1e-9


def test_zero_mean_requires_the_constraint_flag():
    mesh = build_layered_mesh(2, 4)
    with pytest.raises(AssemblyError):
        impose_zero_mean(SparseSystem(sp.eye(3, format="csr"), np.zeros(3)), FunctionSpace(mesh, P1))
    with pytest.raises(AssemblyError):
        FunctionSpace(mesh, P2, constraint="zero_mean")


# -- fields ---------------------------------------------------------------

def test_interpolated_quadratic_is_exact_at_quadrature_points():
    mesh = refine_uniform(build_layered_mesh(2, 4))
    V = FunctionSpace(mesh, P2)
    f = DiscreteField.interpolate(V, lambda x, y: 3 * x**2 - x * y + 2)
    qp = V.geom.qp[V.cells]
    assert np.allclose(f.values(V.cells), 3 * qp[..., 0] ** 2 - qp[..., 0] * qp[..., 1] + 2, atol=1e-13)
    g = f.gradients(V.cells)
    assert np.allclose(g[..., 0], 6 * qp[..., 0] - qp[..., 1], atol=1e-12)
    assert np.allclose(g[..., 1], -qp[..., 0], atol=1e-12)


def test_field_length_is_checked():
    V = FunctionSpace(build_layered_mesh(1, 2), P1)
    with pytest.raises(ValueError):
        DiscreteField(V, np.zeros(V.n_dofs + 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3))
def test_dof_counts(nx, half):
    ny = 2 * half
    mesh = build_layered_mesh(nx, ny)
    assert FunctionSpace(mesh, P1).n_dofs == (nx + 1) * (ny + 1)
    assert FunctionSpace(mesh, P2).n_dofs == (2 * nx + 1) * (2 * ny + 1)
    # the interface line is shared by the global space only
    c = FunctionSpace(mesh, P1, "conduit").n_dofs
    m = FunctionSpace(mesh, P1, "porous").n_dofs
    assert c + m == (nx + 1) * (ny + 1) + (nx + 1)
