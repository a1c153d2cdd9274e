import numpy as np
import pytest
from numpy.testing import assert_allclose

from homlab.errors import GeometryError, NodeBudgetError, ResolutionError
from homlab.geometry import (
    GAMMA,
    SIGMA_FREE,
    SIGMA_PATCH,
    DomainSpec,
    PatchLayout,
    build_layout,
    build_mesh,
    in_T_eps,
)


def test_domain_defaults_to_unit_box():
    spec = DomainSpec()
    assert spec.extents == (1.0, 1.0, 1.0)
    assert spec.sigma_area == 1.0


def test_domain_rejects_low_dimension():
    with pytest.raises(GeometryError):
        DomainSpec(dim=2)


def test_layout_quarter_lattice():
    # eps = 1/4 on the unit box: 2x2 centers, r = eps^2 for n = 3
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)
    assert layout.num_patches == 4
    assert_allclose(layout.radii, 0.0625)
    expected = {(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)}
    got = {tuple(c[:2]) for c in layout.centers}
    assert got == expected
    assert np.all(layout.centers[:, 2] == 0.0)


def test_layout_halving_eps_quadruples_count():
    spec = DomainSpec()
    l4 = build_layout(spec, 0.25, 1.0)
    l8 = build_layout(spec, 0.125, 1.0)
    assert l8.num_patches == 4 * l4.num_patches == 16
    assert_allclose(l8.radii, 0.125**2)


def test_layout_count_times_cell_area_tiles_sigma():
    spec = DomainSpec()
    for eps in (0.25, 0.125, 0.0625):
        layout = build_layout(spec, eps, 1.0)
        assert_allclose(layout.num_patches * (2 * eps) ** 2,
                        spec.sigma_area, rtol=1e-12)


def test_layout_scaling_exponent_n4():
    # n = 4: exponent 3/2, tilde_r = 2 pushes the radius to eps -> reject
    spec = DomainSpec(dim=4)
    with pytest.raises(GeometryError, match="r < eps"):
        build_layout(spec, 0.25, 2.0)
    layout = build_layout(spec, 0.25, 1.0)
    assert_allclose(layout.radii, 0.25**1.5)


def test_layout_rejects_bad_tilde_r_and_eps():
    spec = DomainSpec()
    with pytest.raises(GeometryError):
        build_layout(spec, 0.25, 100.0)  # above c2
    with pytest.raises(GeometryError):
        build_layout(spec, 0.3, 1.0)  # 0.6 does not tile the unit face
    with pytest.raises(GeometryError):
        build_layout(spec, 2.0, 1.0)  # no patch fits


def test_nested_layout_centers_nest():
    spec = DomainSpec()
    coarse = build_layout(spec, 0.25, 1.0, nested=True)
    fine = build_layout(spec, 0.125, 1.0, nested=True)
    assert coarse.num_patches == 1
    assert fine.num_patches == 9
    fine_set = {tuple(np.round(c, 12)) for c in fine.centers}
    for c in coarse.centers:
        assert tuple(np.round(c, 12)) in fine_set


def test_in_T_eps_membership():
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)
    center = layout.centers[0]
    r = layout.radii[0]
    assert in_T_eps(layout, center)
    # closed-ball convention at distance exactly r
    assert in_T_eps(layout, center + np.array([r, 0.0, 0.0]))
    assert not in_T_eps(layout, center + np.array([1.5 * r, 0.0, 0.0]))
    # interior point just above the center is inside T_eps as well
    assert in_T_eps(layout, center + np.array([0.0, 0.0, 0.5 * r]))


def test_in_T_eps_metric_membership():
    spec = DomainSpec()
    layout = PatchLayout(domain=spec, epsilon=0.25,
                         centers=np.array([[0.5, 0.5, 0.0]]), tilde_r=1.0)
    a = np.diag([4.0, 1.0, 1.0])
    r = layout.radii[0]
    # metric distance of (2r, 0, 0) under A = diag(4,1,1) is r
    assert in_T_eps(layout, np.array([0.5 + 2 * r, 0.5, 0.0]), a_matrix=a)
    assert not in_T_eps(layout, np.array([0.5 + 2.2 * r, 0.5, 0.0]),
                        a_matrix=a)


def test_build_mesh_tags_and_counts():
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)
    mesh = build_mesh(spec, layout, 1.0 / 32)
    assert mesh.num_nodes == 33**3
    # every patch traps at least one boundary node
    assert all(len(nodes) > 0 for nodes in mesh.patch_nodes)
    tags = mesh.tags
    coords = mesh.node_coords()
    # bottom face nodes are sigma unless they touch a lateral gamma face
    bottom = coords[:, 2] == 0.0
    lateral = ((coords[:, 0] == 0) | (coords[:, 0] == 1)
               | (coords[:, 1] == 0) | (coords[:, 1] == 1))
    assert np.all(tags[bottom & ~lateral] >= SIGMA_FREE)
    assert np.all(tags[bottom & lateral] == GAMMA)
    # each tagged patch node is within r of its own center
    for k, nodes in enumerate(mesh.patch_nodes):
        d = np.linalg.norm(coords[nodes] - layout.centers[k], axis=1)
        assert np.all(d <= layout.radii[k] * (1 + 1e-12))


def test_build_mesh_resolution_guard():
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)  # r = 1/16
    with pytest.raises(ResolutionError):
        build_mesh(spec, layout, 1.0 / 8)
    # override accepted because centers are grid nodes of h = 1/8
    mesh = build_mesh(spec, layout, 1.0 / 8, allow_coarse=True)
    assert all(len(nodes) >= 1 for nodes in mesh.patch_nodes)


def test_build_mesh_node_cap():
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)
    with pytest.raises(NodeBudgetError):
        build_mesh(spec, layout, 1.0 / 64, node_cap=1000)


def test_periodic_mesh_drops_duplicate_lateral_nodes():
    spec = DomainSpec(lateral_periodic=True)
    layout = build_layout(spec, 0.25, 1.0)
    mesh = build_mesh(spec, layout, 1.0 / 32)
    assert mesh.shape == (32, 32, 33)
    coords = mesh.node_coords()
    # the whole bottom face is sigma in periodic mode
    bottom = coords[:, 2] == 0.0
    assert np.all(mesh.tags[bottom] >= SIGMA_FREE)
    top = coords[:, 2] == 1.0
    assert np.all(mesh.tags[top] == GAMMA)


def test_patch_nodes_unique_owner():
    # spacing 2*eps > 2*r guarantees disjoint patches: no node in two lists
    spec = DomainSpec()
    layout = build_layout(spec, 0.125, 1.0)
    mesh = build_mesh(spec, layout, 1.0 / 64, allow_coarse=True)
    all_nodes = np.concatenate(mesh.patch_nodes)
    assert all_nodes.size == np.unique(all_nodes).size
    assert np.all(mesh.tags[all_nodes] == SIGMA_PATCH)
