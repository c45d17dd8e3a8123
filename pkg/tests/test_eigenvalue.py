import numpy as np
import pytest
import scipy.linalg as dla

from schfem import eigenvalue, fem, scheme
from schfem.errors import InputError
from schfem.mesh import rectangle, refine_uniform, unit_square


def dense_pencil_oracle(u, eps, mesh):
    """Independent dense solve of A v = lam B v on the zero-mean subspace."""
    K = fem.assemble_stiffness(mesh).matrix.toarray()
    M = fem.assemble_mass(mesh).matrix.toarray()
    W = fem.assemble_weighted_mass(
        mesh, u, scheme.potential_second_derivative
    ).matrix.toarray()
    A = eps * K + W / eps
    ones = np.ones(mesh.num_vertices)
    basis = dla.null_space((M @ ones).reshape(1, -1))
    # K^+ via bordered dense solve
    n = mesh.num_vertices
    bordered = np.zeros((n + 1, n + 1))
    bordered[:n, :n] = K
    bordered[:n, n] = M @ ones
    bordered[n, :n] = M @ ones
    Y = M @ basis
    rhs = np.vstack([Y, np.zeros((1, Y.shape[1]))])
    Z = dla.solve(bordered, rhs)[:n]
    B_r = Y.T @ Z
    A_r = basis.T @ A @ basis
    vals = dla.eigh(A_r, 0.5 * (B_r + B_r.T), eigvals_only=True)
    return vals[0]


def test_zero_field_matches_dense_oracle():
    mesh = refine_uniform(unit_square(4), 1)  # <= 200 dofs
    assert mesh.num_vertices <= 200
    u = fem.fe_function(mesh, np.zeros(mesh.num_vertices))
    res = eigenvalue.principal_eigenvalue(u, 0.25, mesh)
    oracle = dense_pencil_oracle(u, 0.25, mesh)
    assert abs(res.lam - oracle) < 1e-8 * abs(oracle)


def test_random_field_matches_dense_oracle():
    mesh = refine_uniform(unit_square(4), 1)
    rng = np.random.default_rng(17)
    u = fem.fe_function(mesh, 0.8 * rng.standard_normal(mesh.num_vertices))
    res = eigenvalue.principal_eigenvalue(u, 0.125, mesh)
    oracle = dense_pencil_oracle(u, 0.125, mesh)
    assert abs(res.lam - oracle) < 1e-8 * abs(oracle)


def test_eigenvector_contract():
    mesh = refine_uniform(unit_square(3), 2)
    rng = np.random.default_rng(18)
    u = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    res = eigenvalue.principal_eigenvalue(u, 0.25, mesh)
    assert abs(fem.mean_value(res.vector, mesh)) < 1e-10
    rq = eigenvalue.rayleigh_quotient(u, 0.25, mesh, res.vector.values)
    assert abs(res.lam - rq) <= 1e-8 * abs(rq)


def test_nonnegative_weight_gives_nonnegative_lambda():
    # f'(u) >= 0 pointwise when |u| >= 1/sqrt(3); u = 1 qualifies
    mesh = refine_uniform(unit_square(3), 1)
    u = fem.fe_function(mesh, np.ones(mesh.num_vertices))
    res = eigenvalue.principal_eigenvalue(u, 0.25, mesh)
    assert res.lam >= 0.0


def test_rayleigh_scale_invariance():
    mesh = refine_uniform(unit_square(3), 1)
    rng = np.random.default_rng(19)
    u = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    v = rng.standard_normal(mesh.num_vertices)
    lumped = fem.lumped_mass_diagonal(mesh)
    v -= (lumped @ v) / mesh.area
    r1 = eigenvalue.rayleigh_quotient(u, 0.25, mesh, v)
    r2 = eigenvalue.rayleigh_quotient(u, 0.25, mesh, -7.3 * v)
    assert abs(r1 - r2) < 1e-12 * abs(r1)


def test_constant_state_mesh_convergence_trend():
    # |Lambda(h) - Lambda(h/2)| decreases across three uniform refinements
    eps = 1.0 / 16.0
    lams = []
    for bis in (0, 2, 4, 6):
        mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 8), bis)
        u = fem.fe_function(mesh, np.ones(mesh.num_vertices))
        lams.append(eigenvalue.principal_eigenvalue(u, eps, mesh).lam)
    diffs = np.abs(np.diff(lams))
    assert diffs[1] < diffs[0]
    assert diffs[2] < diffs[1]


def test_constant_state_continuum_value():
    # lam1 = pi^2/4 on (-1,1)^2; for u = 1: eps lam1^2 + f'(1) lam1 / eps
    eps = 1.0 / 32.0
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 8), 6)  # h = 1/32
    u = fem.fe_function(mesh, np.ones(mesh.num_vertices))
    res = eigenvalue.principal_eigenvalue(u, eps, mesh)
    lam1 = np.pi**2 / 4.0
    continuum = eps * lam1**2 + 2.0 * lam1 / eps
    assert abs(res.lam - continuum) < 0.02 * continuum


def test_peak_time_monotone_and_single():
    assert eigenvalue.peak_time([0.0, 1.0, 2.0], [1.0, 2.0, 3.0]) == 2.0
    assert eigenvalue.peak_time([0.5], [4.0]) == 0.5


def test_peak_time_tie_breaks_earlier():
    assert eigenvalue.peak_time([0.0, 1.0, 2.0, 3.0], [1.0, 5.0, 5.0, 2.0]) == 1.0


def test_peak_time_rejects_empty():
    with pytest.raises(InputError):
        eigenvalue.peak_time([], [])
