import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chnsd.mesh import CONDUIT, POROUS, DomainLayout, MeshError, build_layered_mesh, refine_uniform


def check_invariants(mesh):
    lay = mesh.layout
    yi = lay.y_interface
    areas = mesh.areas()
    assert np.all(areas > 0), "triangles must be counterclockwise"
    assert abs(areas.sum() - lay.area) <= 1e-12 * lay.area

    # no triangle straddles the interface, and region matches the side
    ys = mesh.nodes[mesh.triangles][:, :, 1]
    above = np.all(ys >= yi - 1e-12, axis=1)
    below = np.all(ys <= yi + 1e-12, axis=1)
    assert np.all(above | below)
    conduit_side = below if lay.conduit_position == "bottom" else above
    assert np.all((mesh.region == CONDUIT) == conduit_side)

    # interface edges: on the line, unit normal, one triangle per side
    ie = mesh.interface_edges
    assert np.all(mesh.nodes[ie][:, :, 1] == yi)
    n = mesh.interface_normal
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
    expected = [0.0, 1.0] if lay.conduit_position == "bottom" else [0.0, -1.0]
    assert np.all(n == expected)
    c, p = mesh.interface_tris.T
    assert np.all(mesh.region[c] == CONDUIT) and np.all(mesh.region[p] == POROUS)
    for k, (a, b) in enumerate(ie):
        assert {a, b} <= set(mesh.triangles[c[k]]) and {a, b} <= set(mesh.triangles[p[k]])

    # conforming: every edge has one or two triangles, boundary edges exactly one
    counts = np.bincount(mesh.tri_edges.ravel(), minlength=len(mesh.edges))
    assert set(np.unique(counts)) <= {1, 2}
    assert np.sum(counts == 1) == len(mesh.boundary_edges)

    # every node on the interface line touches both regions
    on_line = np.flatnonzero(mesh.nodes[:, 1] == yi)
    for v in on_line:
        regs = set(mesh.region[np.any(mesh.triangles == v, axis=1)])
        assert regs == {CONDUIT, POROUS}


def test_smallest_conforming_case():
    mesh = build_layered_mesh(1, 2, DomainLayout((0, 1), (0, 2), 1.0))
    assert mesh.n_triangles == 4
    assert np.sum(mesh.region == CONDUIT) == 2 and np.sum(mesh.region == POROUS) == 2
    assert len(mesh.interface_edges) == 1
    check_invariants(mesh)


def test_counts_follow_the_formula():
    mesh = build_layered_mesh(4, 8, DomainLayout((0, 1), (0, 2), 1.0))
    assert mesh.n_triangles == 2 * 4 * 8
    assert np.sum(mesh.region == CONDUIT) == 32
    assert len(mesh.interface_edges) == 4
    assert mesh.areas().sum() == pytest.approx(2.0, rel=1e-12)


@pytest.mark.parametrize("position", ["top", "bottom"])
def test_normals_point_from_conduit_into_matrix(position):
    mesh = build_layered_mesh(3, 4, DomainLayout((0, 1), (0, 2), 1.0, position))
    check_invariants(mesh)
    # the conduit triangle's centroid lies on the side opposite to n_c
    c = mesh.interface_tris[:, 0]
    centroid_y = mesh.nodes[mesh.triangles[c]][:, :, 1].mean(axis=1)
    assert np.all((centroid_y - 1.0) * mesh.interface_normal[:, 1] < 0)


@settings(max_examples=25, deadline=None)
@given(
    nx=st.integers(1, 6),
    half=st.integers(1, 4),
    k=st.integers(1, 7),
    position=st.sampled_from(["top", "bottom"]),
    width=st.floats(0.5, 3.0),
)
def test_invariants_hold_for_random_layouts(nx, half, k, position, width):
    ny = 2 * half
    k = 1 + k % (ny - 1)
    layout = DomainLayout((0.0, width), (-1.0, 1.0), -1.0 + 2.0 * k / ny, position)
    check_invariants(build_layered_mesh(nx, ny, layout))


def test_interface_off_grid_is_rejected():
    with pytest.raises(MeshError, match="not a grid line"):
        build_layered_mesh(2, 3, DomainLayout((0, 1), (0, 2), 1.0))


@pytest.mark.parametrize(
    "kwargs",
    [dict(y_interface=2.0), dict(y_interface=0.0), dict(x_range=(1.0, 1.0)), dict(conduit_position="left")],
)
def test_bad_layouts(kwargs):
    with pytest.raises(MeshError):
        DomainLayout(**kwargs)


def test_refinement_counts():
    mesh = build_layered_mesh(1, 2)
    fine = refine_uniform(mesh)
    assert fine.n_triangles == 16
    assert fine.n_nodes == mesh.n_nodes + len(mesh.edges)
    assert len(fine.interface_edges) == 2 * len(mesh.interface_edges)
    assert np.all(fine.interface_normal == mesh.interface_normal[0])
    check_invariants(fine)


def test_refinement_on_2x2_euler_bookkeeping():
    mesh = build_layered_mesh(2, 2)
    N, E, T = mesh.n_nodes, len(mesh.edges), mesh.n_triangles
    assert N - E + T == 1  # Euler characteristic of a disc
    fine = refine_uniform(mesh)
    assert fine.n_nodes == N + E
    assert np.sum(fine.region == CONDUIT) == 4 * np.sum(mesh.region == CONDUIT)
    check_invariants(fine)


def test_refined_mesh_matches_structured_one_in_size():
    coarse = refine_uniform(build_layered_mesh(2, 4))
    direct = build_layered_mesh(4, 8)
    assert coarse.n_nodes == direct.n_nodes
    assert coarse.h == pytest.approx(direct.h)


def test_construction_is_deterministic():
    a = build_layered_mesh(5, 6, DomainLayout((0, 1), (0, 3), 1.0, "bottom"))
    b = build_layered_mesh(5, 6, DomainLayout((0, 1), (0, 3), 1.0, "bottom"))
    for name in ("nodes", "triangles", "region", "interface_edges", "boundary_edges"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_boundary_tags_split_by_region():
    mesh = build_layered_mesh(2, 4, DomainLayout(conduit_position="bottom"))
    mid = mesh.nodes[mesh.boundary_edges].mean(axis=1)
    conduit = mesh.boundary_tags == "conduit"
    assert np.all(mid[conduit, 1] < 1.0) and np.all(mid[~conduit, 1] > 1.0)
    assert len(mesh.boundary_edges) == 2 * (2 + 4)
