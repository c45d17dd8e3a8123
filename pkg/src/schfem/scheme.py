"""One step of the fully discrete mixed scheme and its companions.

step_full solves the coupled nonlinear (u, w) system with Newton; the
cross-mesh term (u^n - u^{n-1}, phi) is assembled exactly on the overlay of
the two meshes.  step_linear solves the noise-driven linear block system;
the hat pair is the algebraic difference of the two solutions and the
transformed variable y is u-tilde minus the accumulated noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem, noise as noise_mod
from .errors import InputError, SolverFailure, StructuralError
from .fem import FeFunction, fe_function

# -- potential ----------------------------------------------------------------


def double_well(u):
    """F(u) = (u^2 - 1)^2 / 4."""
    s = u * u - 1.0
    return 0.25 * s * s


def potential_derivative(u):
    """f(u) = F'(u) = u^3 - u."""
    return u * u * u - u


def potential_second_derivative(u):
    """f'(u) = 3 u^2 - 1."""
    return 3.0 * u * u - 1.0


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    eps: float
    T: float
    times: np.ndarray  # t_0 = 0 .. t_N = T

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise InputError("interfacial width must satisfy 0 < eps < 1")
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times[0] != 0.0 or abs(times[-1] - self.T) > 1e-12 * max(self.T, 1.0):
            raise InputError("time grid must start at 0 and end at T")
        if np.any(np.diff(times) <= 0):
            raise InputError("time steps must be positive")

    @classmethod
    def uniform(cls, eps, T, n_steps):
        return cls(eps, T, np.linspace(0.0, T, n_steps + 1))

    @property
    def n_steps(self):
        return len(self.times) - 1

    def tau(self, n):
        """Duration of step n (1-based)."""
        return float(self.times[n] - self.times[n - 1])


@dataclass(frozen=True)
class NewtonConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_iter: int = 50
    backtrack_factor: float = 0.5
    max_backtracks: int = 8

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.max_iter < 1:
            raise InputError("Newton tolerances must be positive, max_iter >= 1")


@dataclass
class StepState:
    """All fields of one time level, bound to one mesh."""

    n: int
    t: float
    mesh: object
    u: FeFunction
    w: FeFunction
    ut: FeFunction  # u-tilde, linear scheme
    wt: FeFunction  # w-tilde
    uh: FeFunction  # u-hat = u - u-tilde
    wh: FeFunction  # w-hat
    y: FeFunction  # transformed variable
    sigma: FeFunction  # Sigma^n prolonged to the solver mesh
    newton_iterations: int = 0
    newton_residual: float = 0.0

    def fields(self):
        return {
            "u": self.u,
            "w": self.w,
            "ut": self.ut,
            "wt": self.wt,
            "uh": self.uh,
            "wh": self.wh,
            "y": self.y,
            "sigma": self.sigma,
        }


def initial_state(mesh, u0, sigma0=None):
    """Level-0 state: u^0 given, u-tilde^0 = 0, y^0 = 0."""
    zero = fe_function(mesh, np.zeros(mesh.num_vertices))
    if sigma0 is None:
        sigma0 = zero
    w0 = fe_function(mesh, np.zeros(mesh.num_vertices))
    return StepState(
        n=0, t=0.0, mesh=mesh, u=u0, w=w0, ut=zero, wt=zero,
        uh=u0, wh=w0, y=zero, sigma=sigma0,
    )


# -- linear algebra helpers ------------------------------------------------------


def _increment_on_mesh(increment, noise_mesh, mesh):
    if increment is None:
        return np.zeros(mesh.num_vertices)
    if increment.bound_to(mesh):
        return increment.values
    return fem.prolong(increment, noise_mesh, mesh).values


def _block_system(M, K, tau, eps):
    return sp.bmat([[M / tau, K], [eps * K, -M]], format="csc")


def _linear_factor(mesh, tau, eps):
    def build():
        M = fem.assemble_mass(mesh).matrix
        K = fem.assemble_stiffness(mesh).matrix
        A = _block_system(M, K, tau, eps)
        return A, spla.splu(A)

    return fem._FACTORS.get((mesh.generation, "linear-block", tau, eps), build)


# -- the linear scheme -----------------------------------------------------------


def step_linear(prev, mesh, tau, increment, params, noise_mesh=None):
    """Backward Euler step of the linear SPDE block system.

    Returns (u-tilde^n, w-tilde^n) on ``mesh`` plus the relative residual of
    the solved block system.
    """
    n = mesh.num_vertices
    M = fem.assemble_mass(mesh).matrix
    dw = _increment_on_mesh(increment, noise_mesh, mesh)
    b_prev = fem.cross_mass(prev.mesh, prev.ut, mesh)
    rhs = np.concatenate([(b_prev + M @ dw) / tau, np.zeros(n)])
    A, lu = _linear_factor(mesh, tau, params.eps)
    sol = lu.solve(rhs)
    ut, wt = sol[:n], sol[n:]
    res = np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    return fe_function(mesh, ut), fe_function(mesh, wt), res


# -- the full scheme --------------------------------------------------------------


def _dual_norm(msolve, r_u, r_w):
    return max(
        float(np.max(np.abs(msolve.solve(r_u)))),
        float(np.max(np.abs(msolve.solve(r_w)))),
    )


def step_full(prev, mesh, tau, increment, params, cfg=None, noise_mesh=None,
              initial_guess=None, jac_state=None):
    """Newton solve of the coupled (u^n, w^n) system.

    The residual is measured in the nodal dual norm ||M^-1 r||_inf over both
    equations.  The Jacobian factorization is frozen across iterations (and,
    via ``jac_state``, across steps on an unchanged mesh) and refreshed with
    the exact Jacobian when the contraction stalls.  ``jac_state`` holds the
    linearization point as plain values, so a factorization can always be
    reproduced deterministically (checkpoint/resume stays bit-identical).
    Each accepted iterate solves the linearized first equation exactly,
    which keeps the mass identity (u^n, 1) = (u^{n-1}, 1) + (Delta_n W, 1)
    at roundoff level.
    """
    cfg = cfg or NewtonConfig()
    eps = params.eps
    n = mesh.num_vertices
    M = fem.assemble_mass(mesh).matrix
    K = fem.assemble_stiffness(mesh).matrix
    msolve = fem.mass_solver(mesh)

    dw = _increment_on_mesh(increment, noise_mesh, mesh)
    b_prev = fem.cross_mass(prev.mesh, prev.u, mesh)
    rhs1 = (b_prev + M @ dw) / tau

    if initial_guess is not None and initial_guess.bound_to(mesh):
        u = initial_guess.values.copy()
    elif prev.u.bound_to(mesh):
        u = prev.u.values.copy()
    else:
        u = fem.l2_project(prev.u, prev.mesh, mesh).values

    def residual(u, w):
        fu = fem.nonlinear_load(mesh, fe_function(mesh, u), potential_derivative)
        r1 = (M @ u) / tau + K @ w - rhs1
        r2 = eps * (K @ u) + fu / eps - M @ w
        return r1, r2

    # consistent chemical potential for the initial guess
    fu0 = fem.nonlinear_load(mesh, fe_function(mesh, u), potential_derivative)
    w = msolve.solve(eps * (K @ u) + fu0 / eps)

    r1, r2 = residual(u, w)
    res = _dual_norm(msolve, r1, r2)
    res0 = max(res, cfg.abs_tol)
    target = cfg.rel_tol * res0 + cfg.abs_tol

    def jacobian_factor(u_j):
        W = fem.assemble_weighted_mass(
            mesh, fe_function(mesh, u_j), potential_second_derivative
        ).matrix
        J = sp.bmat([[M / tau, K], [eps * K + W / eps, -M]], format="csc")
        return spla.splu(J)

    def set_factor(u_j):
        lu = jacobian_factor(u_j)
        if jac_state is not None:
            jac_state["generation"] = mesh.generation
            jac_state["tau"] = tau
            jac_state["u"] = u_j.copy()
            jac_state["lu"] = lu
        return lu

    reusable = (
        jac_state is not None
        and jac_state.get("generation") == mesh.generation
        and jac_state.get("tau") == tau
        and jac_state.get("u") is not None
    )
    if reusable:
        if jac_state.get("lu") is None:  # after checkpoint restore
            jac_state["lu"] = jacobian_factor(jac_state["u"])
        lu = jac_state["lu"]
    else:
        lu = set_factor(u)

    iterations = 0
    while res > target:
        if iterations >= cfg.max_iter:
            raise SolverFailure(
                "Newton did not converge",
                {"iterations": iterations, "residual": res, "target": target},
            )
        delta = lu.solve(-np.concatenate([r1, r2]))
        alpha = 1.0
        for _ in range(cfg.max_backtracks + 1):
            u_new = u + alpha * delta[:n]
            w_new = w + alpha * delta[n:]
            r1n, r2n = residual(u_new, w_new)
            res_new = _dual_norm(msolve, r1n, r2n)
            if res_new < res or res_new <= target:
                break
            alpha *= cfg.backtrack_factor
        ratio = res_new / res if res > 0 else 0.0
        u, w, r1, r2, res = u_new, w_new, r1n, r2n, res_new
        iterations += 1
        # refresh the frozen Jacobian when contraction degrades
        if res > target and (ratio > 0.25 or alpha < 1.0):
            lu = set_factor(u)
    return fe_function(mesh, u), fe_function(mesh, w), {
        "iterations": iterations,
        "residual": res,
    }


# -- companions -------------------------------------------------------------------


def derive_hat(full_pair, linear_pair):
    """Hat fields by subtraction: u-hat = u - u-tilde, w-hat = w - w-tilde."""
    u, w = full_pair
    ut, wt = linear_pair
    if u.generation != ut.generation:
        raise StructuralError("hat fields need both pairs on one mesh generation")
    return u - ut, w - wt


def hat_residual(prev, cur, tau, params):
    """Nodal dual-norm residual of the hat-scheme equations at level cur."""
    mesh = cur.mesh
    M = fem.assemble_mass(mesh).matrix
    K = fem.assemble_stiffness(mesh).matrix
    msolve = fem.mass_solver(mesh)
    b_prev = fem.cross_mass(prev.mesh, prev.uh, mesh)
    fu = fem.nonlinear_load(mesh, cur.u, potential_derivative)
    r1 = (M @ cur.uh.values - b_prev) / tau + K @ cur.wh.values
    r2 = params.eps * (K @ cur.uh.values) + fu / params.eps - M @ cur.wh.values
    return _dual_norm(msolve, r1, r2)


def transform_y(ut, sigma_on_mesh):
    """y^n = u-tilde^n - Sigma^n (exact nodal subtraction)."""
    return ut - sigma_on_mesh


def y_residual(prev, cur, tau):
    """Residual of the first transformed equation at level cur."""
    mesh = cur.mesh
    M = fem.assemble_mass(mesh).matrix
    K = fem.assemble_stiffness(mesh).matrix
    msolve = fem.mass_solver(mesh)
    b_prev = fem.cross_mass(prev.mesh, prev.y, mesh)
    r = (M @ cur.y.values - b_prev) / tau + K @ cur.wt.values
    return float(np.max(np.abs(msolve.solve(r))))


# -- time interpolants --------------------------------------------------------------


def interpolant(states, t, piecewise_constant=False):
    """Evaluate the time interpolant of a state sequence at time t.

    Returns a dict of FeFunction fields together with the mesh they live on
    (the overlay of the two bracketing meshes when these differ).  The
    piecewise constant variant returns the right endpoint of the bracket.
    """
    times = np.array([s.t for s in states])
    if t < times[0] - 1e-14 or t > times[-1] + 1e-14:
        raise InputError("interpolation time outside the trajectory")
    idx = int(np.searchsorted(times, t, side="left"))
    if idx == 0:
        s = states[0]
        return dict(s.fields()), s.mesh
    lo, hi = states[idx - 1], states[idx]
    if piecewise_constant:
        return dict(hi.fields()), hi.mesh
    theta = (t - lo.t) / (hi.t - lo.t)
    if lo.mesh.generation == hi.mesh.generation:
        target = hi.mesh
        lo_fields = lo.fields()
        hi_fields = hi.fields()
    else:
        target = fem.overlay(lo.mesh, hi.mesh)
        plo = fem.prolongation_matrix(lo.mesh, target)
        phi = fem.prolongation_matrix(hi.mesh, target)
        lo_fields = {
            k: fe_function(target, plo @ v.values) for k, v in lo.fields().items()
        }
        hi_fields = {
            k: fe_function(target, phi @ v.values) for k, v in hi.fields().items()
        }
    blended = {
        k: fe_function(
            target, (1.0 - theta) * lo_fields[k].values + theta * hi_fields[k].values
        )
        for k in lo_fields
    }
    return blended, target


def discrete_energy(u, mesh, eps):
    """E(u) = eps ||grad u||^2 + eps^-1 ||F(u)||_L1 (F >= 0, exact rule)."""
    grad_sq = fem.grad_norm_sq(u, mesh)
    potential = fem.integrate(mesh, u.values, pointwise=double_well, degree=6)
    return eps * grad_sq + potential / eps
