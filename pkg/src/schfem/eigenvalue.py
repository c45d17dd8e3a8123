"""Discrete principal eigenvalue of the linearized operator.

Lambda(t) = inf over zero-mean v of
    (eps ||grad v||^2 + eps^-1 (f'(u) v, v)) / ||grad (-lap_h)^-1 v||^2,

realized as the minimal eigenvalue of the pencil A v = Lambda B v on the
zero-mean subspace with A = eps K + eps^-1 W(f'(u)) and B = M K^+ M
(K^+ the mean-deflated Neumann inverse).  B is dense as a matrix but cheap
as an operator, so large problems use LOBPCG with the constant direction
locked; small problems use a dense generalized solve on the subspace.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as dla
import scipy.sparse.linalg as spla

from . import fem, scheme
from .errors import InputError, SolverFailure
from .fem import FeFunction, fe_function


@dataclass
class EigenResult:
    lam: float
    vector: FeFunction
    residual: float
    iterations: int
    method: str  # dense | iterative


def _pencil(u, eps, mesh):
    K = fem.assemble_stiffness(mesh).matrix
    W = fem.assemble_weighted_mass(
        mesh, u, scheme.potential_second_derivative
    ).matrix
    A = (eps * K + W / eps).tocsr()
    return A, K


def _b_apply(mesh):
    M = fem.assemble_mass(mesh).matrix
    kplus = fem._deflated_stiffness_solver(mesh)

    def apply(x):
        x = np.asarray(x)
        if x.ndim == 1:
            y = M @ x
            z = kplus.solve(np.append(y, 0.0))[:-1]
            return M @ z
        return np.column_stack([apply(col) for col in x.T])

    return apply, M


def rayleigh_quotient(u, eps, mesh, v):
    """Quotient of the pencil at a zero-mean vector v (nodal values)."""
    A, _ = _pencil(u, eps, mesh)
    b_apply, _ = _b_apply(mesh)
    v = np.asarray(v, dtype=float)
    denom = float(v @ b_apply(v))
    if denom <= 0:
        raise InputError("Rayleigh quotient needs a nonzero zero-mean vector")
    return float(v @ (A @ v)) / denom


def _deflate(mesh, v):
    """Remove the (mass-weighted) mean from nodal values."""
    lumped = fem.lumped_mass_diagonal(mesh)
    return v - (lumped @ v) / mesh.area


def _dense_solve(A, mesh):
    M = fem.assemble_mass(mesh).matrix
    n = mesh.num_vertices
    c = (M @ np.ones(n)).reshape(1, -1)
    basis = dla.null_space(c)  # orthonormal basis of the zero-mean subspace
    Y = M @ basis
    kplus = fem._deflated_stiffness_solver(mesh)
    Z = kplus.solve(np.vstack([Y, np.zeros((1, Y.shape[1]))]))[:-1]
    A_r = basis.T @ (A @ basis)
    B_r = Y.T @ Z
    B_r = 0.5 * (B_r + B_r.T)
    vals, vecs = dla.eigh(A_r, B_r)
    v = basis @ vecs[:, 0]
    return float(vals[0]), v


def principal_eigenvalue(u, eps, mesh, dense_threshold=3000, tol=1e-6,
                         maxiter=120):
    """Minimal pencil eigenvalue and its zero-mean eigenvector.

    The reported value is the Rayleigh quotient of the returned vector, so
    the two are consistent by construction.
    """
    if not u.bound_to(mesh):
        raise InputError("field is not bound to the given mesh")
    A, K = _pencil(u, eps, mesh)
    n = mesh.num_vertices

    if n <= dense_threshold:
        lam, v = _dense_solve(A, mesh)
        method = "dense"
        iterations = 0
    else:
        lam, v = _lobpcg_solve(A, mesh, eps, dense_threshold, tol, maxiter)
        method = "iterative"
        iterations = maxiter
    return _finalize(u, eps, mesh, A, lam, v, iterations, method)


def _spd_preconditioner(mesh, eps):
    """Factorization of eps K + eps^-1 M, an SPD proxy for the pencil's A.

    LOBPCG requires a positive definite preconditioner; A itself is
    indefinite through f'(u) and preconditioning with its (shifted) inverse
    makes the iteration lock onto non-minimal branches.  The proxy is also
    independent of u, so it is memoized per mesh generation.
    """

    def build():
        K = fem.assemble_stiffness(mesh).matrix
        M = fem.assemble_mass(mesh).matrix
        return spla.splu((eps * K + M / eps).tocsc())

    return fem._FACTORS.get((mesh.generation, "eig-precond", eps), build)


def _lobpcg_solve(A, mesh, eps, dense_threshold, tol, maxiter):
    """Pencil iteration on projected operators.

    B annihilates constants, so instead of constraining, both operators are
    M-orthogonally projected onto the zero-mean subspace and the constant
    direction is assigned a huge artificial eigenvalue, keeping B-hat SPD.
    """
    n = mesh.num_vertices
    M = fem.assemble_mass(mesh).matrix
    b_apply, _ = _b_apply(mesh)
    m_ones = M @ np.ones(n)
    area = mesh.area
    lam_art = 1e10 * (1.0 + float(np.abs(A.diagonal()).max()))
    sigma_c = lam_art / area

    def project(x):
        x = np.asarray(x).reshape(-1)
        return x - np.ones(n) * ((m_ones @ x) / area)

    def a_hat(x):
        x = np.asarray(x).reshape(-1)
        y = A @ project(x)
        y = y - m_ones * (y.sum() / area)
        return y + sigma_c * m_ones * (m_ones @ x)

    def b_hat(x):
        x = np.asarray(x).reshape(-1)
        return b_apply(project(x)) + m_ones * ((m_ones @ x) / area)

    A_op = spla.LinearOperator((n, n), matvec=a_hat)
    B_op = spla.LinearOperator((n, n), matvec=b_hat)

    prec_lu = _spd_preconditioner(mesh, eps)

    def prec(x):
        return project(prec_lu.solve(project(x)))

    precond = spla.LinearOperator((n, n), matvec=prec)

    rng = np.random.default_rng(12345)
    X = np.column_stack([project(rng.standard_normal(n)) for _ in range(3)])

    try:
        with warnings.catch_warnings():
            # the reported value is the Rayleigh quotient of the returned
            # vector; residual-tolerance warnings are recorded, not raised
            warnings.simplefilter("ignore", UserWarning)
            vals, vecs = spla.lobpcg(
                A_op, X, B=B_op, M=precond, tol=tol, maxiter=maxiter,
                largest=False,
            )
    except Exception as exc:  # breakdown; fall back to dense if plausible
        if n <= 6 * dense_threshold:
            return _dense_solve(A, mesh)
        raise SolverFailure("eigensolver failed", {"error": str(exc)})
    order = np.argsort(vals)
    return float(vals[order[0]]), vecs[:, order[0]]


def _finalize(u, eps, mesh, A, lam, v, iterations, method):
    v = _deflate(mesh, v)
    v = v / np.linalg.norm(v)
    lam_rq = rayleigh_quotient(u, eps, mesh, v)
    b_apply, _ = _b_apply(mesh)
    res = float(np.linalg.norm(A @ v - lam_rq * b_apply(v)))
    vec = fe_function(mesh, v)
    return EigenResult(lam=lam_rq, vector=vec, residual=res,
                       iterations=iterations, method=method)


def peak_time(times, values):
    """argmax over samples; ties break to the earliest time."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0 or times.size != values.size:
        raise InputError("peak time needs one value per sample time")
    return float(times[int(np.argmax(values))])
