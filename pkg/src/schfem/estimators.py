"""Residual a posteriori error indicators for the linear and hat schemes.

Level-difference terms are integrated exactly on the overlay of the two
level meshes and grouped back to the current mesh's elements; edge jump
terms are exact because P1 gradients are constant per element, so a jump
is constant along each edge and its squared edge norm is h_e * jump^2.
Boundary edges enter with the one-sided flux (the homogeneous Neumann
residual).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem, scheme
from .errors import InputError, StructuralError
from .fem import quadrature


@dataclass(frozen=True)
class EstimatorConfig:
    """C* is the (mesh-family dependent) interpolation constant multiplier."""

    c_star: float = 1.0

    def __post_init__(self):
        if self.c_star <= 0:
            raise InputError("interpolation constant must be positive")


@dataclass
class IndicatorReport:
    step: int
    t: float
    generation: int
    eta_space: np.ndarray  # eta_SPACE,1..6
    eta_time: np.ndarray  # eta_TIME,1..6
    eta_noise: float
    mu: np.ndarray  # mu_-1, mu_0, mu_1
    mu_hat: np.ndarray  # mu-hat_-1, mu-hat_0, mu-hat_1

    def __post_init__(self):
        for arr in (self.eta_space, self.eta_time, self.mu, self.mu_hat):
            if np.any(np.asarray(arr) < 0):
                raise InputError("indicators must be nonnegative")


# -- geometric kernels -----------------------------------------------------------


def _edge_jump_sq_sum(mesh, values):
    """sum_e h_e ||[grad v . n_e]||^2_{L2(e)} = sum_e h_e^2 * jump_e^2."""
    g = fem._gradients(mesh)  # (ne, 3, 2)
    grads = np.einsum("eid,ei->ed", g, np.asarray(values)[mesh.elements])
    edge_elems = mesh.edge_elements
    normals = mesh.edge_normals
    left = grads[edge_elems[:, 0]]
    right = np.where(
        (edge_elems[:, 1] >= 0)[:, None], grads[edge_elems[:, 1].clip(min=0)], 0.0
    )
    jump = np.einsum("ed,ed->e", left - right, normals)
    return float(np.sum(mesh.h_edge**2 * jump**2))


class _LevelPair:
    """Both time levels represented exactly on the overlay mesh."""

    def __init__(self, prev, cur):
        if prev.mesh.generation == cur.mesh.generation:
            self.overlay = cur.mesh
            self.prev = {k: v.values for k, v in prev.fields().items()}
            self.cur = {k: v.values for k, v in cur.fields().items()}
            self.ancestor_in_cur = np.arange(cur.mesh.num_elements)
        else:
            overlay = fem.overlay(prev.mesh, cur.mesh)
            pp = fem.prolongation_matrix(prev.mesh, overlay)
            pc = fem.prolongation_matrix(cur.mesh, overlay)
            self.overlay = overlay
            self.prev = {k: pp @ v.values for k, v in prev.fields().items()}
            self.cur = {k: pc @ v.values for k, v in cur.fields().items()}
            self.ancestor_in_cur = fem.ancestor_elements(cur.mesh, overlay)
        self.cur_mesh = cur.mesh

    def elementwise_sq_to_cur(self, nodal, degree=2, pointwise=None):
        """Per-current-element integral of g(v)^2, v P1 on the overlay."""
        per_overlay = fem.element_l2_sq(
            self.overlay, nodal, degree=degree, pointwise=pointwise
        )
        out = np.zeros(self.cur_mesh.num_elements)
        np.add.at(out, self.ancestor_in_cur, per_overlay)
        return out

    def l2_sq(self, nodal, degree=2, pointwise=None):
        return float(
            np.sum(
                fem.element_l2_sq(self.overlay, nodal, degree=degree,
                                  pointwise=pointwise)
            )
        )

    def grad_sq(self, nodal):
        K = fem.assemble_stiffness(self.overlay).matrix
        return float(np.asarray(nodal) @ (K @ np.asarray(nodal)))


# -- indicator evaluation -----------------------------------------------------------


def linear_indicators(prev, cur, tau, eps, cfg):
    """eta_SPACE,1-3, eta_TIME,1-3 and the mu aggregates for one step."""
    pair = _LevelPair(prev, cur)
    mesh = cur.mesh
    hk2 = mesh.h_elem**2

    dy = pair.cur["y"] - pair.prev["y"]
    elem_res = pair.elementwise_sq_to_cur(dy / tau)
    eta_s1 = np.sqrt(np.sum(hk2 * elem_res)) + np.sqrt(
        _edge_jump_sq_sum(mesh, cur.wt.values)
    )
    eta_s2 = np.sqrt(np.sum(hk2 * fem.element_l2_sq(mesh, cur.wt.values)))
    eta_s3 = np.sqrt(eps * _edge_jump_sq_sum(mesh, cur.ut.values))

    dwt = pair.prev["wt"] - pair.cur["wt"]
    dut = pair.prev["ut"] - pair.cur["ut"]
    eta_t1 = np.sqrt(pair.grad_sq(dwt))
    eta_t2 = np.sqrt(pair.l2_sq(dwt))
    eta_t3 = eps * np.sqrt(pair.grad_sq(dut))

    mu = np.array(
        [
            cfg.c_star * eta_s1 + eta_t1,
            eta_t2,
            eta_t3 + eta_s2 + cfg.c_star * eta_s3,
        ]
    )
    return np.array([eta_s1, eta_s2, eta_s3]), np.array([eta_t1, eta_t2, eta_t3]), mu


def hat_indicators(prev, cur, tau, eps, cfg):
    """eta_SPACE,4-6, eta_TIME,4-6 and the mu-hat aggregates for one step."""
    pair = _LevelPair(prev, cur)
    mesh = cur.mesh
    hk2 = mesh.h_elem**2
    f = scheme.potential_derivative

    duh = pair.cur["uh"] - pair.prev["uh"]
    elem_res = pair.elementwise_sq_to_cur(duh / tau)
    eta_s4 = np.sqrt(np.sum(hk2 * elem_res)) + np.sqrt(
        _edge_jump_sq_sum(mesh, cur.wh.values)
    )

    # || w-hat + eps^-1 f(u) ||_{L2(K)} needs the degree-6 rule (f(u)^2 is
    # degree 6); evaluate w-hat + f(u)/eps pointwise at the quad nodes
    rule = quadrature(6)
    lam = rule.points
    wh_q = cur.wh.values[mesh.elements] @ lam.T
    u_q = cur.u.values[mesh.elements] @ lam.T
    integrand = (wh_q + f(u_q) / eps) ** 2
    per_elem = mesh.areas * np.sum(rule.weights[None, :] * integrand, axis=1)
    eta_s5 = np.sqrt(np.sum(hk2 * per_elem))

    eta_s6 = np.sqrt(_edge_jump_sq_sum(mesh, cur.uh.values))

    dwh = pair.cur["wh"] - pair.prev["wh"]
    duh_t = pair.cur["uh"] - pair.prev["uh"]
    eta_t4 = np.sqrt(pair.grad_sq(dwh))
    eta_t6 = eps * np.sqrt(pair.grad_sq(duh_t))
    # eps^-1 || f(u^n) - f(u^{n-1}) || on the overlay, degree-6 exact
    u_cur_q = pair.cur["u"][pair.overlay.elements] @ lam.T
    u_prev_q = pair.prev["u"][pair.overlay.elements] @ lam.T
    diff = f(u_cur_q) - f(u_prev_q)
    fu_diff_sq = float(
        np.sum(pair.overlay.areas[:, None] * rule.weights[None, :] * diff * diff)
    )
    eta_t5 = np.sqrt(pair.l2_sq(dwh)) + np.sqrt(fu_diff_sq) / eps

    mu_hat = np.array(
        [
            cfg.c_star * eta_s4 + eta_t4,
            eta_t5,
            eta_t6 + eta_s5 + cfg.c_star * eta_s6,
        ]
    )
    return np.array([eta_s4, eta_s5, eta_s6]), np.array([eta_t4, eta_t5, eta_t6]), mu_hat


def step_report(prev, cur, tau, eps, cfg, eta_noise):
    """Full IndicatorReport for the step prev -> cur."""
    s123, t123, mu = linear_indicators(prev, cur, tau, eps, cfg)
    s456, t456, mu_hat = hat_indicators(prev, cur, tau, eps, cfg)
    return IndicatorReport(
        step=cur.n,
        t=cur.t,
        generation=cur.mesh.generation,
        eta_space=np.concatenate([s123, s456]),
        eta_time=np.concatenate([t123, t456]),
        eta_noise=float(eta_noise),
        mu=mu,
        mu_hat=mu_hat,
    )


# -- run-level aggregates --------------------------------------------------------------


@dataclass
class RunSummary:
    s_lin: float
    s_hat: float
    lambda_integral: float
    noise_sum: float
    c_star: float


def aggregate(reports, taus, eps, T, cfg, lambdas=None):
    """Computable run-level sums (no unknown analytic constants applied).

    s_lin = sum_n tau_n (T mu_-1^2 + (T/eps) mu_0^2 + eps^-1 mu_1^2)
            + eps sum_n eta_noise
    s_hat = sum_n tau_n (mu-hat_-1^2 + eps^-2 mu-hat_0^2 + 2 eps^-4 mu-hat_1^2)
    plus the eigenvalue integral sum_n tau_n Lambda(t_n) when available.
    """
    reports = list(reports)
    taus = np.asarray(taus, dtype=float)
    if len(reports) != len(taus):
        raise InputError("one report per time step required")
    if lambdas is not None and len(lambdas) != len(reports):
        raise InputError("one eigenvalue per time step required")

    s_lin = 0.0
    s_hat = 0.0
    noise_sum = 0.0
    for rep, tau in zip(reports, taus):
        mu_m1, mu_0, mu_1 = rep.mu
        s_lin += tau * (T * mu_m1**2 + (T / eps) * mu_0**2 + mu_1**2 / eps)
        mh_m1, mh_0, mh_1 = rep.mu_hat
        s_hat += tau * (mh_m1**2 + mh_0**2 / eps**2 + 2.0 * mh_1**2 / eps**4)
        noise_sum += rep.eta_noise
    s_lin += eps * noise_sum
    lam_int = 0.0
    if lambdas is not None:
        lam_int = float(np.sum(taus * np.asarray(lambdas, dtype=float)))
    return RunSummary(
        s_lin=float(s_lin),
        s_hat=float(s_hat),
        lambda_integral=lam_int,
        noise_sum=float(noise_sum),
        c_star=cfg.c_star,
    )
