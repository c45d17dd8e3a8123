import numpy as np
import pytest
import scipy.linalg as dla
import scipy.optimize

from schfem import fem, noise, scheme
from schfem.errors import InputError
from schfem.mesh import rectangle, refine_uniform, unit_square


def make_params(eps=0.25, T=1e-2, n=10):
    return scheme.ModelParams.uniform(eps, T, n)


def zero_state(mesh):
    return scheme.initial_state(
        mesh, fem.fe_function(mesh, np.zeros(mesh.num_vertices))
    )


def test_params_validation():
    with pytest.raises(InputError):
        scheme.ModelParams(1.5, 1.0, np.linspace(0, 1, 5))
    with pytest.raises(InputError):
        scheme.ModelParams(0.5, 1.0, np.array([0.0, 0.5, 0.5, 1.0]))


def test_potential_values():
    assert scheme.double_well(1.0) == 0.0
    assert scheme.double_well(0.0) == 0.25
    assert scheme.potential_derivative(1.0) == 0.0
    assert scheme.potential_second_derivative(1.0) == 2.0
    assert scheme.potential_second_derivative(0.0) == -1.0


# -- full scheme --------------------------------------------------------------


def test_full_step_zero_fixed_point():
    mesh = unit_square(2)
    params = make_params()
    u, w, diag = scheme.step_full(zero_state(mesh), mesh, 1e-3, None, params)
    assert np.abs(u.values).max() == 0.0
    assert np.abs(w.values).max() == 0.0
    assert diag["iterations"] == 0


def test_full_step_mass_identity():
    nm = rectangle((-1.0, 1.0, -1.0, 1.0), 4)
    mesh = refine_uniform(nm, 2)
    model = noise.build_noise_model(nm, 0.8)
    path = noise.NoisePath(model, 21, 0)
    inc = path.sample_increment(1, 1e-4)
    rng = np.random.default_rng(2)
    u0 = fem.fe_function(mesh, 0.3 * rng.standard_normal(mesh.num_vertices))
    prev = scheme.initial_state(mesh, u0)
    params = make_params(eps=0.25)
    u, w, _ = scheme.step_full(prev, mesh, 1e-4, inc, params, noise_mesh=nm)
    lumped = fem.lumped_mass_diagonal(mesh)
    mass_prev = lumped @ u0.values
    mass_inc = fem.lumped_mass_diagonal(nm) @ inc.values
    assert abs(mass_inc) < 1e-12
    assert abs(lumped @ u.values - mass_prev - mass_inc) < 1e-12


def test_full_step_dense_newton_oracle():
    # 2-triangle mesh (4 dofs): compare against an independently coded
    # dense Newton solve of the 8x8 nonlinear system, sigma = 0
    mesh = unit_square(1)
    n = mesh.num_vertices
    eps = 0.25
    tau = 1e-3
    params = make_params(eps=eps)
    rng = np.random.default_rng(8)
    u0 = 0.2 * rng.standard_normal(n)
    prev = scheme.initial_state(mesh, fem.fe_function(mesh, u0))

    M = fem.assemble_mass(mesh).matrix.toarray()
    K = fem.assemble_stiffness(mesh).matrix.toarray()

    def fvec(u):
        return fem.nonlinear_load(
            mesh, fem.fe_function(mesh, u), scheme.potential_derivative
        )

    def system(x):
        u, w = x[:n], x[n:]
        r1 = M @ (u - u0) / tau + K @ w
        r2 = eps * (K @ u) + fvec(u) / eps - M @ w
        return np.concatenate([r1, r2])

    x0 = np.concatenate([u0, np.zeros(n)])
    sol = scipy.optimize.fsolve(system, x0, xtol=1e-13)
    u_dense, w_dense = sol[:n], sol[n:]

    u, w, _ = scheme.step_full(prev, mesh, tau, None, params)
    assert np.abs(u.values - u_dense).max() < 1e-9
    assert np.abs(w.values - w_dense).max() < 1e-9


# -- linear scheme --------------------------------------------------------------


def test_linear_step_zero():
    mesh = unit_square(2)
    params = make_params()
    ut, wt, res = scheme.step_linear(zero_state(mesh), mesh, 1e-3, None, params)
    assert np.abs(ut.values).max() == 0.0
    assert np.abs(wt.values).max() == 0.0


def test_linear_step_eigenpair_decay():
    # K e = lam M e, m(e) = 0, no noise: u-tilde^n = u-tilde^{n-1}/(1+tau eps lam^2)
    mesh = refine_uniform(unit_square(3), 1)
    assert mesh.num_vertices <= 100
    Kd = fem.assemble_stiffness(mesh).matrix.toarray()
    Md = fem.assemble_mass(mesh).matrix.toarray()
    vals, vecs = dla.eigh(Kd, Md)
    lam, e = vals[2], vecs[:, 2]
    eps, tau = 0.25, 1e-2
    params = make_params(eps=eps)
    prev = zero_state(mesh)
    prev.ut = fem.fe_function(mesh, e)
    ut, wt, _ = scheme.step_linear(prev, mesh, tau, None, params)
    expected = e / (1.0 + tau * eps * lam * lam)
    assert np.abs(ut.values - expected).max() < 1e-10


def test_linear_step_zero_mean_preserved():
    nm = rectangle((-1.0, 1.0, -1.0, 1.0), 4)
    mesh = refine_uniform(nm, 2)
    model = noise.build_noise_model(nm, 1.0)
    path = noise.NoisePath(model, 31, 0)
    params = make_params()
    state = zero_state(mesh)
    for n in range(1, 6):
        inc = path.sample_increment(n, 1e-4)
        ut, wt, _ = scheme.step_linear(state, mesh, 1e-4, inc, params,
                                       noise_mesh=nm)
        assert abs(fem.mean_value(ut, mesh)) < 1e-12
        state.ut = ut
        state.wt = wt


# -- hat fields -------------------------------------------------------------------


def test_hat_initial_level_is_u0():
    # u-tilde^0 = 0, so u-hat^0 = u^0
    mesh = unit_square(2)
    rng = np.random.default_rng(11)
    u0 = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    st = scheme.initial_state(mesh, u0)
    assert np.array_equal(st.uh.values, u0.values)


def test_hat_zero_when_full_equals_linear():
    mesh = unit_square(2)
    v = fem.fe_function(mesh, np.zeros(mesh.num_vertices))
    uh, wh = scheme.derive_hat((v, v), (v, v))
    assert np.abs(uh.values).max() == 0.0


def test_hat_scheme_residual_small():
    nm = rectangle((0.0, 1.0, 0.0, 1.0), 2)
    mesh = refine_uniform(nm, 2)
    model = noise.build_noise_model(nm, 0.5)
    path = noise.NoisePath(model, 77, 0)
    params = make_params(eps=0.25)
    tau = 1e-4
    rng = np.random.default_rng(12)
    u0 = fem.fe_function(mesh, 0.1 * rng.standard_normal(mesh.num_vertices))
    state = scheme.initial_state(mesh, u0)
    for n in range(1, 4):
        inc = path.sample_increment(n, tau)
        u, w, _ = scheme.step_full(state, mesh, tau, inc, params, noise_mesh=nm)
        ut, wt, _ = scheme.step_linear(state, mesh, tau, inc, params,
                                       noise_mesh=nm)
        uh, wh = scheme.derive_hat((u, w), (ut, wt))
        sigma = fem.prolong(path.sigma_at_level(n), nm, mesh)
        new = scheme.StepState(
            n=n, t=state.t + tau, mesh=mesh, u=u, w=w, ut=ut, wt=wt,
            uh=uh, wh=wh, y=scheme.transform_y(ut, sigma), sigma=sigma,
        )
        assert scheme.hat_residual(state, new, tau, params) < 1e-8
        state = new


# -- transformed variable -----------------------------------------------------------


def test_y_initial_is_zero():
    mesh = unit_square(2)
    st = zero_state(mesh)
    assert np.abs(st.y.values).max() == 0.0


def test_y_equals_ut_without_noise():
    mesh = unit_square(2)
    rng = np.random.default_rng(13)
    ut = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    sigma = fem.fe_function(mesh, np.zeros(mesh.num_vertices))
    y = scheme.transform_y(ut, sigma)
    assert np.array_equal(y.values, ut.values)


def test_y_identity_and_residual_over_trajectory():
    nm = rectangle((0.0, 1.0, 0.0, 1.0), 2)
    mesh = refine_uniform(nm, 2)
    model = noise.build_noise_model(nm, 1.0)
    path = noise.NoisePath(model, 99, 1)
    params = make_params(eps=0.25)
    tau = 1e-4
    state = zero_state(mesh)
    for n in range(1, 6):
        inc = path.sample_increment(n, tau)
        ut, wt, _ = scheme.step_linear(state, mesh, tau, inc, params,
                                       noise_mesh=nm)
        sigma = fem.prolong(path.sigma_at_level(n), nm, mesh)
        y = scheme.transform_y(ut, sigma)
        assert np.abs(y.values - (ut.values - sigma.values)).max() <= 1e-12
        zero = fem.fe_function(mesh, np.zeros(mesh.num_vertices))
        new = scheme.StepState(
            n=n, t=state.t + tau, mesh=mesh, u=ut, w=wt, ut=ut, wt=wt,
            uh=zero, wh=zero, y=y, sigma=sigma,
        )
        assert scheme.y_residual(state, new, tau) < 1e-9
        state = new


# -- interpolants ---------------------------------------------------------------------


def _two_level_states(mesh):
    rng = np.random.default_rng(14)

    def state(n, t):
        fields = {
            k: fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
            for k in ("u", "w", "ut", "wt", "uh", "wh", "y", "sigma")
        }
        return scheme.StepState(n=n, t=t, mesh=mesh, **fields)

    return [state(0, 0.0), state(1, 0.1)]


def test_interpolant_hits_levels_exactly():
    mesh = unit_square(2)
    states = _two_level_states(mesh)
    at0, _ = scheme.interpolant(states, 0.0)
    at1, _ = scheme.interpolant(states, 0.1)
    assert np.array_equal(at0["u"].values, states[0].u.values)
    assert np.array_equal(at1["u"].values, states[1].u.values)


def test_interpolant_midpoint_mean():
    mesh = unit_square(2)
    states = _two_level_states(mesh)
    mid, _ = scheme.interpolant(states, 0.05)
    expected = 0.5 * (states[0].u.values + states[1].u.values)
    assert np.abs(mid["u"].values - expected).max() < 1e-15


def test_interpolant_derivative_is_difference_quotient():
    mesh = unit_square(2)
    states = _two_level_states(mesh)
    t1, t2 = 0.03, 0.07
    a, _ = scheme.interpolant(states, t1)
    b, _ = scheme.interpolant(states, t2)
    slope = (b["u"].values - a["u"].values) / (t2 - t1)
    expected = (states[1].u.values - states[0].u.values) / 0.1
    assert np.abs(slope - expected).max() < 1e-10


def test_interpolant_piecewise_constant_variant():
    mesh = unit_square(2)
    states = _two_level_states(mesh)
    mid, _ = scheme.interpolant(states, 0.05, piecewise_constant=True)
    assert np.array_equal(mid["u"].values, states[1].u.values)


def test_interpolant_rejects_outside_range():
    mesh = unit_square(2)
    states = _two_level_states(mesh)
    with pytest.raises(InputError):
        scheme.interpolant(states, 0.2)


# -- discrete stability of the linear scheme -------------------------------------------


def test_linear_scheme_discrete_stability_scaling():
    # eps sum_n ||grad(ut^n - ut^{n-1})||^2 + sum_n tau ||grad wt^n||^2,
    # averaged over 32 paths, grows like sum_l ||grad phi_l||^2 / ((d+1)^-1
    # |(phi_l,1)|) across noise spacings {1/2, 1/4, 1/8}: consecutive
    # ratios within x3 of the right-hand sums' ratios.  tau*eps is kept
    # small so the fourth-order damping does not mask the growth.
    eps = 0.05
    tau = 1e-4
    n_steps = 16
    params = scheme.ModelParams.uniform(eps, tau * n_steps, n_steps)
    stats = []
    rhs = []
    for spacing in (0.5, 0.25, 0.125):
        nm = rectangle((0.0, 1.0, 0.0, 1.0), int(round(1.0 / spacing)))
        model = noise.build_noise_model(nm, 1.0)
        mesh = refine_uniform(nm, 0)
        K = fem.assemble_stiffness(mesh).matrix
        total = 0.0
        for path_idx in range(32):
            state = zero_state(mesh)
            acc = 0.0
            for n in range(1, n_steps + 1):
                coeffs, _ = noise.increment_values(model, 1000, path_idx, n, tau)
                inc = fem.fe_function(nm, coeffs)
                ut, wt, _ = scheme.step_linear(state, mesh, tau, inc, params,
                                               noise_mesh=nm)
                d = ut.values - state.ut.values
                acc += eps * (d @ (K @ d)) + tau * (wt.values @ (K @ wt.values))
                state.ut = ut
                state.wt = wt
            total += acc
        stats.append(total / 32.0)
        Kn = fem.assemble_stiffness(nm).matrix
        rhs.append(
            float(np.sum(Kn.diagonal() / (np.abs(model.hat_integrals) / 3.0)))
        )
    for k in range(2):
        stat_ratio = stats[k + 1] / stats[k]
        rhs_ratio = rhs[k + 1] / rhs[k]
        assert stat_ratio < 3.0 * rhs_ratio
        assert stat_ratio > rhs_ratio / 3.0
