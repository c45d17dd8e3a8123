"""P1 finite element kernels on forest meshes.

Assembly of mass/stiffness/weighted-mass operators, exact cross-mesh
transfer through the forest overlay, the L2 projection, the mean-deflated
discrete Neumann inverse Laplacian, the discrete H^-1 norm, and the lumped
nodal Laplacian.  All operations are pure functions of immutable inputs;
sparse factorizations are memoized per mesh generation behind a lock.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, PreconditionError, StructuralError
from .mesh import Mesh, common_refinement

# -- quadrature ----------------------------------------------------------------


@dataclass(frozen=True)
class Quadrature:
    """Barycentric quadrature rule on the reference triangle.

    Weights are normalized to sum to one (fractions of the element area);
    ``degree`` is the highest total polynomial degree integrated exactly.
    """

    rule_id: str
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sums to 1
    degree: int

    def verify(self):
        """Check monomial exactness up to the declared degree."""
        if abs(self.weights.sum() - 1.0) > 1e-14:
            raise InputError(f"rule {self.rule_id}: weights do not sum to 1")
        # reference triangle (0,0),(1,0),(0,1): x = lam1, y = lam2
        x = self.points[:, 1]
        y = self.points[:, 2]
        for i in range(self.degree + 1):
            for j in range(self.degree + 1 - i):
                approx = 0.5 * np.sum(self.weights * x**i * y**j)
                import math

                exact = (
                    math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)
                )
                if abs(approx - exact) > 1e-13 * max(1.0, exact):
                    raise InputError(
                        f"rule {self.rule_id}: not exact for x^{i} y^{j}"
                    )
        return self


def _midpoint_rule():
    pts = np.array(
        [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]], dtype=float
    )
    w = np.full(3, 1.0 / 3.0)
    return Quadrature("midpoint-3", pts, w, 2)


def _dunavant6_rule():
    # 12-point degree-6 rule (Dunavant), weights as area fractions
    groups = [
        (0.873821971016996, 0.063089014491502, 0.050844906370207, 3),
        (0.501426509658179, 0.249286745170910, 0.116786275726379, 3),
        (0.636502499121399, 0.310352451033785, 0.082851075618374, 6),
    ]
    pts = []
    wts = []
    for a, b, w, mult in groups:
        if mult == 3:
            pts += [(a, b, b), (b, a, b), (b, b, a)]
            wts += [w] * 3
        else:
            c = 1.0 - a - b
            pts += [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
            wts += [w] * 6
    return Quadrature("dunavant-12", np.array(pts), np.array(wts), 6)


@lru_cache(maxsize=None)
def quadrature(degree):
    """Return a verified rule exact at least to ``degree``."""
    rule = _midpoint_rule() if degree <= 2 else _dunavant6_rule()
    if rule.degree < degree:
        raise InputError(f"no quadrature rule of degree {degree}")
    return rule.verify()


# -- fields and operators -------------------------------------------------------


@dataclass(frozen=True)
class FeFunction:
    """Nodal coefficients of a P1 field bound to one mesh generation."""

    generation: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def bound_to(self, mesh):
        return self.generation == mesh.generation

    def _check(self, other):
        if self.generation != other.generation:
            raise StructuralError(
                "arithmetic across mesh generations; transfer first"
            )

    def __add__(self, other):
        self._check(other)
        return FeFunction(self.generation, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return FeFunction(self.generation, self.values - other.values)

    def __mul__(self, alpha):
        return FeFunction(self.generation, self.values * float(alpha))

    __rmul__ = __mul__


def fe_function(mesh, values):
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.num_vertices,):
        raise InputError("coefficient count does not match vertex count")
    return FeFunction(mesh.generation, values)


def interpolate(mesh, fn):
    """Nodal interpolant of a callable fn(x, y) -> value."""
    return fe_function(mesh, fn(mesh.vertices[:, 0], mesh.vertices[:, 1]))


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    kind: str  # mass | stiffness | weighted-mass | lumped-mass
    symmetric: bool = True

    def __matmul__(self, vec):
        return self.matrix @ vec


def _check_bound(v, mesh):
    if not isinstance(v, FeFunction):
        raise InputError("expected an FeFunction")
    if not v.bound_to(mesh):
        raise StructuralError("function is bound to a different mesh generation")


# -- assembly -------------------------------------------------------------------


def _gradients(mesh):
    """Constant P1 basis gradients per element, shape (ne, 3, 2)."""
    tri = mesh.vertices[mesh.elements]  # (ne, 3, 2)
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    two_area = 2.0 * mesh.areas
    gx = np.stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]], 1)
    gy = np.stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]], 1)
    return np.stack([gx, gy], axis=2) / two_area[:, None, None]


def _assemble_from_local(mesh, local):
    """Scatter (ne, 3, 3) element matrices into a CSR matrix."""
    ne = mesh.num_elements
    rows = np.repeat(mesh.elements, 3, axis=1).reshape(ne, 9)
    cols = np.tile(mesh.elements, (1, 3)).reshape(ne, 9)
    mat = sp.coo_matrix(
        (local.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
        shape=(mesh.num_vertices, mesh.num_vertices),
    )
    return mat.tocsr()


_MASS_LOCAL = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], dtype=float) / 12.0


def assemble_mass(mesh):
    def build():
        local = mesh.areas[:, None, None] * _MASS_LOCAL[None, :, :]
        return SparseOperator(_assemble_from_local(mesh, local), "mass")

    return _FACTORS.get((mesh.generation, "mass-matrix"), build)


def assemble_stiffness(mesh):
    def build():
        g = _gradients(mesh)
        local = mesh.areas[:, None, None] * np.einsum("eid,ejd->eij", g, g)
        return SparseOperator(_assemble_from_local(mesh, local), "stiffness")

    return _FACTORS.get((mesh.generation, "stiffness-matrix"), build)


def lumped_mass_diagonal(mesh):
    """Row sums of the mass matrix (integrals of the hat functions)."""
    diag = np.zeros(mesh.num_vertices)
    np.add.at(diag, mesh.elements.reshape(-1), np.repeat(mesh.areas / 3.0, 3))
    return diag


def assemble_weighted_mass(mesh, weight, weight_map, degree=6):
    """Matrix of (weight_map(weight) v, w) for P1 v, w via quadrature."""
    _check_bound(weight, mesh)
    rule = quadrature(degree)
    lam = rule.points  # (nq, 3)
    wv = weight.values[mesh.elements] @ lam.T  # (ne, nq) weight at quad pts
    g = weight_map(wv)
    coeff = mesh.areas[:, None] * rule.weights[None, :] * g  # (ne, nq)
    local = np.einsum("eq,qi,qj->eij", coeff, lam, lam)
    return SparseOperator(_assemble_from_local(mesh, local), "weighted-mass")


def load_vector(mesh, fn, degree=6):
    """Vector of (fn, phi_i) for a callable fn(x, y)."""
    rule = quadrature(degree)
    tri = mesh.vertices[mesh.elements]
    pts = np.einsum("qk,ekd->eqd", rule.points, tri)  # (ne, nq, 2)
    vals = fn(pts[..., 0], pts[..., 1])
    coeff = mesh.areas[:, None] * rule.weights[None, :] * vals
    local = coeff @ rule.points  # (ne, 3)
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.elements.reshape(-1), local.reshape(-1))
    return out


def nonlinear_load(mesh, u, pointwise, degree=6):
    """Vector of (pointwise(u), phi_i) for a P1 field u."""
    _check_bound(u, mesh)
    rule = quadrature(degree)
    uv = u.values[mesh.elements] @ rule.points.T  # (ne, nq)
    coeff = mesh.areas[:, None] * rule.weights[None, :] * pointwise(uv)
    local = coeff @ rule.points
    out = np.zeros(mesh.num_vertices)
    np.add.at(out, mesh.elements.reshape(-1), local.reshape(-1))
    return out


def element_l2_sq(mesh, nodal_values, degree=2, pointwise=None):
    """Per-element integral of g(v)^2 for P1 v (g identity by default)."""
    rule = quadrature(degree)
    vv = np.asarray(nodal_values)[mesh.elements] @ rule.points.T
    if pointwise is not None:
        vv = pointwise(vv)
    return mesh.areas * np.sum(rule.weights[None, :] * vv * vv, axis=1)


def integrate(mesh, nodal_values, pointwise=None, degree=6):
    """Integral of g(v) over the domain for P1 v."""
    rule = quadrature(degree)
    vv = np.asarray(nodal_values)[mesh.elements] @ rule.points.T
    if pointwise is not None:
        vv = pointwise(vv)
    return float(np.sum(mesh.areas[:, None] * rule.weights[None, :] * vv))


# -- factor cache ----------------------------------------------------------------


class _FactorCache:
    """Small LRU of sparse factorizations keyed by (generation, tag)."""

    def __init__(self, maxsize=16):
        self.maxsize = maxsize
        self._lock = threading.Lock()
        self._data = OrderedDict()

    def get(self, key, build):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        value = build()
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return value


_FACTORS = _FactorCache(maxsize=48)


def overlay(a, b):
    """Memoized common refinement of two meshes."""
    if a.generation == b.generation:
        return a
    return _FACTORS.get(
        (a.generation, b.generation, "overlay"), lambda: common_refinement(a, b)
    )


def mass_solver(mesh):
    def build():
        return spla.splu(assemble_mass(mesh).matrix.tocsc())

    return _FACTORS.get((mesh.generation, "mass"), build)


def _deflated_stiffness_solver(mesh):
    """Factorization of the stiffness matrix bordered by the constant mode."""

    def build():
        K = assemble_stiffness(mesh).matrix
        c = assemble_mass(mesh).matrix @ np.ones(mesh.num_vertices)
        n = mesh.num_vertices
        bordered = sp.bmat(
            [[K, c[:, None]], [c[None, :], None]], format="csc"
        )
        return spla.splu(bordered)

    return _FACTORS.get((mesh.generation, "stiffness-deflated"), build)


# -- mean, projection, inverse Laplacian ------------------------------------------


def mean_value(v, mesh):
    """m(v) = (v, 1) / |D| computed through the mass matrix."""
    _check_bound(v, mesh)
    return float(lumped_mass_diagonal(mesh) @ v.values) / mesh.area


def ancestor_elements(coarse, fine):
    """For each fine element, the index of its coarse ancestor element."""
    coarse_index = {leaf: i for i, leaf in enumerate(coarse.leaves)}
    out = np.empty(fine.num_elements, dtype=np.int64)
    for i, leaf in enumerate(fine.leaves):
        anc = coarse.ancestor_leaf(*leaf)
        if anc is None:
            raise StructuralError("target mesh does not refine the source mesh")
        out[i] = coarse_index[anc]
    return out


def prolongation_matrix(coarse, fine):
    """Sparse matrix carrying coarse P1 coefficients to a nested fine mesh."""

    def build():
        anc = ancestor_elements(coarse, fine)
        tri = coarse.vertices[coarse.elements[anc]]  # (nf, 3, 2)
        p0 = tri[:, 0]
        d1 = tri[:, 1] - p0
        d2 = tri[:, 2] - p0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        rel = fine.vertices[fine.elements] - p0[:, None, :]  # (nf, 3, 2)
        lam1 = (rel[..., 0] * d2[:, None, 1] - rel[..., 1] * d2[:, None, 0]) / det[
            :, None
        ]
        lam2 = (rel[..., 1] * d1[:, None, 0] - rel[..., 0] * d1[:, None, 1]) / det[
            :, None
        ]
        lam = np.stack([1.0 - lam1 - lam2, lam1, lam2], axis=2)  # (nf, 3v, 3)

        flat_v = fine.elements.reshape(-1)
        first = np.unique(flat_v, return_index=True)[1]
        elem_of = first // 3
        local_of = first % 3
        rows = np.repeat(flat_v[first], 3)
        cols = coarse.elements[anc[elem_of]].reshape(-1)
        vals = lam[elem_of, local_of, :].reshape(-1)
        return sp.coo_matrix(
            (vals, (rows, cols)), shape=(fine.num_vertices, coarse.num_vertices)
        ).tocsr()

    return _FACTORS.get((coarse.generation, fine.generation, "prolong"), build)


def prolong(v, coarse, fine):
    """Exactly represent a coarse P1 field on a nested finer mesh."""
    _check_bound(v, coarse)
    return fe_function(fine, prolongation_matrix(coarse, fine) @ v.values)


def cross_mass(src_mesh, src, dst_mesh):
    """(src, phi_i) for all P1 test functions phi_i on dst_mesh, exactly."""
    _check_bound(src, src_mesh)
    if src_mesh.generation == dst_mesh.generation or src_mesh.same_content(dst_mesh):
        return assemble_mass(dst_mesh).matrix @ src.values
    common = overlay(src_mesh, dst_mesh)
    ps = prolongation_matrix(src_mesh, common)
    pd = prolongation_matrix(dst_mesh, common)
    return pd.T @ (assemble_mass(common).matrix @ (ps @ src.values))


def l2_project(src, src_mesh, dst_mesh):
    """L2 projection onto the target mesh (exact mixed mass action)."""
    b = cross_mass(src_mesh, src, dst_mesh)
    x = mass_solver(dst_mesh).solve(b)
    return fe_function(dst_mesh, x)


def project_callable(mesh, fn, degree=6):
    """L2 projection of an analytic function via quadrature."""
    b = load_vector(mesh, fn, degree=degree)
    return fe_function(mesh, mass_solver(mesh).solve(b))


def inv_neumann_laplacian(v, mesh, mean_tol=1e-10):
    """Zero-mean z with (grad z, grad phi) = (v, phi) for all P1 phi."""
    _check_bound(v, mesh)
    scale = float(np.max(np.abs(v.values))) if v.values.size else 0.0
    if abs(mean_value(v, mesh)) > mean_tol * max(1.0, scale):
        raise PreconditionError("inverse Laplacian needs a zero-mean input")
    rhs = assemble_mass(mesh).matrix @ v.values
    sol = _deflated_stiffness_solver(mesh).solve(np.append(rhs, 0.0))
    return fe_function(mesh, sol[:-1])


def h_minus1_norm(v, mesh):
    """Discrete H^-1 norm: ||grad (-lap_h)^-1 v|| for zero-mean v."""
    z = inv_neumann_laplacian(v, mesh)
    K = assemble_stiffness(mesh).matrix
    return float(np.sqrt(max(z.values @ (K @ z.values), 0.0)))


def grad_norm_sq(v, mesh):
    _check_bound(v, mesh)
    return float(v.values @ (assemble_stiffness(mesh).matrix @ v.values))


def l2_norm_sq(v, mesh):
    _check_bound(v, mesh)
    return float(v.values @ (assemble_mass(mesh).matrix @ v.values))


def discrete_laplacian(v, mesh):
    """Nodal Laplacian through the lumped mass: -(M_L)^-1 K v."""
    _check_bound(v, mesh)
    K = assemble_stiffness(mesh).matrix
    return fe_function(mesh, -(K @ v.values) / lumped_mass_diagonal(mesh))
