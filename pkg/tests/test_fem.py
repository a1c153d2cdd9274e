import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from homlab.errors import SolverError
from homlab.fem import (
    BoundaryPenalty,
    DiscreteField,
    ProblemData,
    SolveReport,
    SolverConfig,
    SparseOperator,
    assemble_boundary_penalty,
    assemble_stiffness,
    bottom_face_nodes,
    cg_solve,
    dirichlet_mask_and_values,
    energy,
    mass_matrix,
    prolongation,
    sigma_mass_matrix,
    solve_homogenized,
    solve_obstacle,
)
from homlab.geometry import DomainSpec, build_layout, build_mesh
from homlab.kernel import CoefficientField


def make_mesh(h=1.0 / 8, eps=0.25, periodic=False, tilde_r=1.0,
              nested=False):
    spec = DomainSpec(lateral_periodic=periodic)
    layout = build_layout(spec, eps, tilde_r, nested=nested)
    mesh = build_mesh(spec, layout, h, allow_coarse=True)
    return spec, layout, mesh


def const(v):
    return lambda x: np.full(x.shape[:-1], float(v))


# -- assembly -------------------------------------------------------------------


def test_stiffness_linear_field_energies():
    _, _, mesh = make_mesh(h=1.0 / 8)
    coords = mesh.node_coords()
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    u = coords[:, 2]
    assert_allclose(u @ (K.matrix @ u), 1.0, rtol=1e-12)
    ones = np.ones(mesh.num_nodes)
    assert_allclose(ones @ (K.matrix @ ones), 0.0, atol=1e-12)
    assert_allclose(np.abs(K.matrix @ ones).max(), 0.0, atol=1e-12)


def test_stiffness_anisotropic_diagonal():
    _, _, mesh = make_mesh(h=1.0 / 8)
    coords = mesh.node_coords()
    coeff = CoefficientField(dim=3, gamma=np.diag([2.0, 1.0, 1.0]))
    K = assemble_stiffness(mesh, coeff)
    u = coords[:, 0]
    assert_allclose(u @ (K.matrix @ u), 4.0, rtol=1e-12)


def test_stiffness_cross_terms():
    _, _, mesh = make_mesh(h=1.0 / 8)
    coords = mesh.node_coords()
    a = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
    w, v = np.linalg.eigh(a)
    gamma = v @ np.diag(np.sqrt(w)) @ v.T
    K = assemble_stiffness(mesh, CoefficientField(dim=3, gamma=gamma))
    u = coords[:, 0] + coords[:, 1]
    # grad u = (1, 1, 0): energy = A11 + 2 A12 + A22
    assert_allclose(u @ (K.matrix @ u), 2.0 + 1.0 + 1.0, rtol=1e-12)
    skew = (K.matrix - K.matrix.T).tocoo()
    assert skew.nnz == 0 or np.max(np.abs(skew.data)) < 1e-13


def test_stiffness_periodic_slab():
    _, _, mesh = make_mesh(h=1.0 / 8, periodic=True)
    coords = mesh.node_coords()
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    u = coords[:, 2]
    assert_allclose(u @ (K.matrix @ u), 1.0, rtol=1e-12)


def test_mass_matrices():
    _, _, mesh = make_mesh(h=1.0 / 8)
    coords = mesh.node_coords()
    M = mass_matrix(mesh)
    ones = np.ones(mesh.num_nodes)
    assert_allclose(ones @ (M @ ones), 1.0, rtol=1e-12)
    x1 = coords[:, 0]
    assert_allclose(x1 @ (M @ x1), 1.0 / 3.0, rtol=1e-12)
    # bottom-face Gram matrix integrates the trace exactly
    Ms = sigma_mass_matrix(mesh)
    bottom = bottom_face_nodes(mesh)
    tr = coords[bottom, 0]
    assert_allclose(tr @ (Ms @ tr), 1.0 / 3.0, rtol=1e-12)


def test_prolongation_reproduces_multilinear_fields():
    spec = DomainSpec()
    layout = build_layout(spec, 0.25, 1.0)
    coarse = build_mesh(spec, layout, 1.0 / 8, allow_coarse=True)
    fine = build_mesh(spec, layout, 1.0 / 16, allow_coarse=True)
    P = prolongation(coarse, fine)
    cc, cf = coarse.node_coords(), fine.node_coords()
    for f in (lambda x: x[:, 0], lambda x: x[:, 2],
              lambda x: 2 + x[:, 0] + 3 * x[:, 1] * 0 + x[:, 2]):
        assert_allclose(P @ f(cc), f(cf), atol=1e-12)
    # periodic variant
    spec_p = DomainSpec(lateral_periodic=True)
    layout_p = build_layout(spec_p, 0.25, 1.0)
    coarse_p = build_mesh(spec_p, layout_p, 1.0 / 8, allow_coarse=True)
    fine_p = build_mesh(spec_p, layout_p, 1.0 / 16, allow_coarse=True)
    Pp = prolongation(coarse_p, fine_p)
    ccp, cfp = coarse_p.node_coords(), fine_p.node_coords()
    assert_allclose(Pp @ ccp[:, 2], cfp[:, 2], atol=1e-12)


# -- conjugate gradients ----------------------------------------------------------


def test_cg_consistency_recovers_known_field():
    _, _, mesh = make_mesh(h=1.0 / 8)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    free = mesh.tags != 1  # interior plus sigma
    rng = np.random.default_rng(0)
    w = np.where(free, rng.standard_normal(mesh.num_nodes), 0.0)
    rhs = np.where(free, K.matrix @ w, 0.0)
    x, rep = cg_solve(K, rhs, SolverConfig(), free_mask=free)
    assert rep.converged
    assert np.max(np.abs(x - w)) <= 1e-8


def test_cg_zero_rhs():
    _, _, mesh = make_mesh(h=1.0 / 8)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    x, rep = cg_solve(K, np.zeros(mesh.num_nodes), SolverConfig())
    assert rep.converged
    assert rep.iterations == 0
    assert np.all(x == 0.0)


def test_cg_iteration_regression_bound_33cubed():
    _, _, mesh = make_mesh(h=1.0 / 32, eps=0.25)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    free = mesh.tags != 1
    rng = np.random.default_rng(1)
    w = np.where(free, rng.standard_normal(mesh.num_nodes), 0.0)
    rhs = np.where(free, K.matrix @ w, 0.0)
    x, rep = cg_solve(K, rhs, SolverConfig(cg_tol=1e-10), free_mask=free)
    assert rep.converged
    assert rep.iterations <= 300


def test_cg_detects_indefiniteness():
    m = SparseOperator(matrix=__import__("scipy.sparse", fromlist=["sparse"])
                       .diags([np.array([1.0, -1.0, 2.0])], [0]).tocsr())
    x, rep = cg_solve(m, np.array([1.0, 1.0, 1.0]), SolverConfig())
    assert not rep.converged


# -- obstacle solves ---------------------------------------------------------------


def test_obstacle_trivial_feasible():
    # psi = 1, phi = 0: the unconstrained extension is already feasible
    _, layout, mesh = make_mesh(h=1.0 / 8, eps=0.25)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(1.0), phi=const(0.0))
    u, rep = solve_obstacle(K, data, mesh, layout)
    assert rep.converged
    assert rep.active_set == 0
    assert_allclose(u.values, 1.0, atol=1e-9)
    assert abs(rep.energy) <= 1e-10


def test_obstacle_inactive_negative_obstacle():
    _, layout, mesh = make_mesh(h=1.0 / 8, eps=0.25)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(-1.0))
    u, rep = solve_obstacle(K, data, mesh, layout)
    assert rep.converged
    assert rep.active_set == 0
    assert_allclose(u.values, 0.0, atol=1e-12)


def projected_gradient_oracle(K, mesh, data, max_iter=200000, tol=1e-12):
    """Independent minimizer: projected gradient with a safe fixed step."""
    gamma_mask, gamma_vals = dirichlet_mask_and_values(mesh, data)
    s_nodes = mesh.constrained_nodes
    coords = mesh.node_coords()
    phi_s = np.asarray(data.phi(coords[s_nodes]), dtype=float)
    free = ~gamma_mask
    # power iteration for the top eigenvalue of the masked gradient map
    v = np.where(free, np.sin(np.arange(mesh.num_nodes) + 1.0), 0.0)
    for _ in range(80):
        v = np.where(free, 2.0 * (K.matrix @ v), 0.0)
        v /= np.linalg.norm(v)
    lam_max = float(v @ np.where(free, 2.0 * (K.matrix @ v), 0.0))
    step = 1.0 / lam_max
    u = np.where(gamma_mask, gamma_vals, 0.0)
    u[s_nodes] = np.maximum(u[s_nodes], phi_s)
    for _ in range(max_iter):
        g = np.where(free, 2.0 * (K.matrix @ u), 0.0)
        u_new = u - step * g
        u_new[s_nodes] = np.maximum(u_new[s_nodes], phi_s)
        u_new = np.where(gamma_mask, gamma_vals, u_new)
        delta = float(np.max(np.abs(u_new - u)))
        u = u_new
        if delta <= tol:
            break
    return u


def test_obstacle_single_patch_matches_projected_gradient():
    # 17^3 single-patch instance: psi = 0, phi = 1 forces full contact
    spec = DomainSpec()
    layout = build_layout(spec, 0.5, 1.0)
    mesh = build_mesh(spec, layout, 1.0 / 16)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(1.0))
    u, rep = solve_obstacle(K, data, mesh, layout,
                            SolverConfig(cg_tol=1e-12))
    assert rep.converged
    assert rep.energy > 0
    assert rep.residual <= 1e-8
    oracle = projected_gradient_oracle(K, mesh, data)
    assert np.max(np.abs(u.values - oracle)) <= 1e-6
    # comparison principle for constant data
    assert np.all(u.values >= -1e-12)
    assert np.all(u.values <= 1.0 + 1e-12)


def test_obstacle_minimizer_optimality_perturbation():
    spec = DomainSpec()
    layout = build_layout(spec, 0.5, 1.0)
    mesh = build_mesh(spec, layout, 1.0 / 8)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(1.0))
    u, rep = solve_obstacle(K, data, mesh, layout,
                            SolverConfig(cg_tol=1e-13))
    base = rep.energy
    delta = 1e-4
    gamma_mask, _ = dirichlet_mask_and_values(mesh, data)
    s_mask = np.zeros(mesh.num_nodes, dtype=bool)
    s_mask[mesh.constrained_nodes] = True
    coords = mesh.node_coords()
    phi_all = data.phi(coords)
    for i in range(mesh.num_nodes):
        if gamma_mask[i]:
            continue
        for sgn in (+1.0, -1.0):
            v = u.values.copy()
            v[i] += sgn * delta
            if s_mask[i] and v[i] < phi_all[i]:
                continue  # infeasible direction
            assert float(v @ (K.matrix @ v)) >= base - 1e-11


def test_obstacle_energy_monotone_on_nested_lattices():
    # corner-aligned nested layouts on one fixed mesh: feasible sets nest,
    # so the minimum energy is nondecreasing in the constraint count
    spec = DomainSpec()
    mesh_h = 1.0 / 8
    energies = []
    counts = []
    for eps in (0.25, 0.125):
        layout = build_layout(spec, eps, 1.0, nested=True)
        mesh = build_mesh(spec, layout, mesh_h, allow_coarse=True)
        K = assemble_stiffness(mesh, CoefficientField.identity(3))
        data = ProblemData(psi=const(0.0), phi=const(1.0))
        u, rep = solve_obstacle(K, data, mesh, layout,
                                SolverConfig(cg_tol=1e-12))
        assert rep.converged
        energies.append(rep.energy)
        counts.append(len(mesh.constrained_nodes))
    assert counts[1] > counts[0]
    assert energies[1] >= energies[0] - 1e-12


# -- boundary penalty ---------------------------------------------------------------


def test_penalty_zero_when_feasible():
    _, _, mesh = make_mesh(h=1.0 / 8)
    data = ProblemData(psi=const(0.0), phi=const(0.0), mu=0.5)
    pen = BoundaryPenalty(mesh, data)
    u = np.ones(mesh.num_nodes)
    assert pen.energy(u) == 0.0
    assert_allclose(pen.gradient(u), 0.0)


def test_penalty_constant_violation_energy():
    # u - phi = -1 on the unit free face, c_n = 1, mu = 0.5 -> energy 0.5
    _, _, mesh = make_mesh(h=1.0 / 8)
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=0.5)
    pen = BoundaryPenalty(mesh, data)
    u = np.zeros(mesh.num_nodes)
    assert_allclose(pen.energy(u), 0.5, rtol=1e-12)


def test_penalty_gradient_matches_finite_difference():
    _, _, mesh = make_mesh(h=1.0 / 4)
    data = ProblemData(psi=const(0.0), phi=const(0.3), mu=0.7, c_n=1.3)
    pen = BoundaryPenalty(mesh, data)
    rng = np.random.default_rng(4)
    u = rng.uniform(-1.0, 1.0, mesh.num_nodes)
    g = pen.gradient(u)
    d = rng.standard_normal(mesh.num_nodes)
    step = 1e-6
    fd = (pen.energy(u + step * d) - pen.energy(u - step * d)) / (2 * step)
    assert abs(fd - g @ d) <= 1e-6 * max(1.0, abs(fd))


def test_assemble_boundary_penalty_interface():
    _, _, mesh = make_mesh(h=1.0 / 4)
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=1.0)
    u = DiscreteField(mesh=mesh, values=np.zeros(mesh.num_nodes))
    grad, hess = assemble_boundary_penalty(mesh, data, u)
    assert grad.shape == (mesh.num_nodes,)
    # fully active: generalized second derivative is the boundary mass * 2
    ones_bottom = np.zeros(mesh.num_nodes)
    ones_bottom[bottom_face_nodes(mesh)] = 1.0
    assert_allclose(ones_bottom @ (hess.matrix @ ones_bottom), 2.0,
                    rtol=1e-12)


# -- homogenized solves ---------------------------------------------------------------


def test_homogenized_constant_dirichlet_feasible():
    _, _, mesh = make_mesh(h=1.0 / 8)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(2.0), phi=const(1.0), mu=3.0)
    u, rep = solve_homogenized(K, data, mesh)
    assert rep.converged
    assert_allclose(u.values, 2.0, atol=1e-9)
    assert rep.energy <= 1e-12


def test_homogenized_mu_zero_gives_harmonic_extension():
    _, _, mesh = make_mesh(h=1.0 / 8, periodic=True)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=0.0)
    u, rep = solve_homogenized(K, data, mesh)
    assert rep.converged
    assert_allclose(u.values, 0.0, atol=1e-10)


def test_homogenized_rejects_negative_mu():
    _, _, mesh = make_mesh(h=1.0 / 8)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=-0.5)
    with pytest.raises(SolverError):
        solve_homogenized(K, data, mesh)


def test_homogenized_slab_robin_oracle():
    # lateral periodic slab, psi = 0 on top, phi = 1, c_n = 1, mu = 1/2.
    # 1-D reduction: minimize b^2 + mu (b-1)_-^2 -> b = mu/(1+mu) = 1/3,
    # with the linear profile u = b (1 - x_n); frozen independent oracle.
    _, _, mesh = make_mesh(h=1.0 / 32, periodic=True)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=0.5, c_n=1.0)
    u, rep = solve_homogenized(K, data, mesh)
    assert rep.converged
    coords = mesh.node_coords()
    exact = (1.0 / 3.0) * (1.0 - coords[:, 2])
    assert np.max(np.abs(u.values - exact)) <= 1e-3
    bottom = bottom_face_nodes(mesh)
    assert_allclose(u.values[bottom], 1.0 / 3.0, atol=1e-3)
    # Newton energy sequence is nonincreasing
    hist = rep.energy_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    # self-consistency: reported energy equals the recomputed functional
    assert_allclose(rep.energy,
                    energy(K, u, data, mode="homogenized"), rtol=1e-12)


def test_energy_modes_on_slab_field():
    # evaluating the functional at the linear field u = -1 + x_n:
    # Dirichlet part 1, penalty 1 * 0.5 * (-2)_-^2 = 2, total 3
    _, _, mesh = make_mesh(h=1.0 / 8, periodic=True)
    K = assemble_stiffness(mesh, CoefficientField.identity(3))
    coords = mesh.node_coords()
    u = DiscreteField(mesh=mesh, values=-1.0 + coords[:, 2])
    data = ProblemData(psi=const(0.0), phi=const(1.0), mu=0.5, c_n=1.0)
    assert_allclose(energy(K, u, data, mode="eps"), 1.0, rtol=1e-12)
    assert_allclose(energy(K, u, data, mode="homogenized"), 3.0, rtol=1e-12)
    const_field = DiscreteField(mesh=mesh,
                                values=np.ones(mesh.num_nodes))
    assert_allclose(energy(K, const_field, data, mode="eps"), 0.0,
                    atol=1e-12)


def test_solve_report_json_keys():
    rep = SolveReport(iterations=3, residual=1e-11, energy=2.5,
                      active_set=7, wall_ms=12.5, converged=True)
    d = rep.to_json_dict()
    assert set(d) == {"iterations", "residual", "energy", "active_set",
                      "wall_ms", "converged"}
