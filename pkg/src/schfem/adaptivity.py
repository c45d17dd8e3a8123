"""Pathwise mesh adaptation driven by the discrete Laplacian magnitude.

Marking follows the time-explicit rule: eta_max is the largest interior
nodal |lap_h u|; elements whose vertex maximum exceeds 0.25 eta_max are
refined until h_K <= h_min, elements below 0.1 eta_max are coarsened, with
the merged diameter capped by the noise mesh spacing so the noise space
stays contained in every solver space.  Boundary rows of the lumped
Laplacian carry O(1/h) Neumann flux artifacts for generic fields, so only
interior vertices enter the marking quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import InputError
from .mesh import coarsen, refine


@dataclass(frozen=True)
class AdaptConfig:
    h_min: float
    ceiling: float  # noise mesh spacing h-tilde
    refine_fraction: float = 0.25
    coarsen_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.coarsen_fraction < self.refine_fraction <= 1.0:
            raise InputError("need 0 < coarsen fraction < refine fraction <= 1")
        if not 0.0 < self.h_min < self.ceiling:
            raise InputError("need 0 < h_min < ceiling")


@dataclass(frozen=True)
class MarkSet:
    refine_ids: np.ndarray
    coarsen_ids: np.ndarray
    eta_max: float

    def __post_init__(self):
        if set(self.refine_ids.tolist()) & set(self.coarsen_ids.tolist()):
            raise InputError("refine and coarsen sets must be disjoint")


def mark_from_values(values, h_elem, cfg, zero_tol=1e-9):
    """Threshold arithmetic on per-element marking values."""
    values = np.asarray(values, dtype=float)
    h_elem = np.asarray(h_elem, dtype=float)
    eta_max = float(values.max()) if values.size else 0.0
    if eta_max <= zero_tol:
        empty = np.array([], dtype=np.int64)
        return MarkSet(empty, empty, 0.0)
    refine_ids = np.nonzero(
        (values >= cfg.refine_fraction * eta_max) & (h_elem > cfg.h_min)
    )[0]
    coarsen_ids = np.nonzero(values <= cfg.coarsen_fraction * eta_max)[0]
    return MarkSet(refine_ids, coarsen_ids, eta_max)


def mark(u, mesh, cfg):
    """Mark elements by the interior nodal |lap_h u| of the field."""
    lap = fem.discrete_laplacian(u, mesh).values
    nodal = np.abs(lap)
    nodal[mesh.boundary_vertex_mask] = 0.0
    elem_values = nodal[mesh.elements].max(axis=1)
    return mark_from_values(elem_values, mesh.h_elem, cfg)


def adapt(mesh, marks, carried, cfg, max_rounds=40):
    """Refine marked elements to h_min, then coarsen under the ceiling.

    ``carried`` functions are transferred exactly under pure refinement and
    by L2 projection when coarsening occurred.  Returns the new mesh and
    the transferred functions.
    """
    if len(marks.refine_ids) == 0 and len(marks.coarsen_ids) == 0:
        return mesh, list(carried)

    target_leaves = {mesh.leaves[i] for i in marks.refine_ids}
    coarsen_leaves = {mesh.leaves[i] for i in marks.coarsen_ids}

    def descends(leaf):
        root, path = leaf
        for k in range(len(path) + 1):
            if (root, path[:k]) in target_leaves:
                return True
        return False

    current = mesh
    for _ in range(max_rounds):
        if not target_leaves:
            break
        ids = [
            i
            for i, leaf in enumerate(current.leaves)
            if current.h_elem[i] > cfg.h_min and descends(leaf)
        ]
        if not ids:
            break
        current = refine(current, ids)
    refined = current

    # coarsen only leaves that survived refinement untouched
    survivor_ids = [
        i for i, leaf in enumerate(refined.leaves) if leaf in coarsen_leaves
    ]
    coarsened = coarsen(refined, survivor_ids, floor=cfg.ceiling)

    # keep the original object (and its cached factorizations) when the
    # adaptation turns out to be a no-op
    if coarsened.same_content(mesh):
        return mesh, list(carried)

    transferred = []
    if coarsened.same_content(refined):
        final = refined
        for v in carried:
            transferred.append(fem.prolong(v, mesh, final))
    else:
        final = coarsened
        for v in carried:
            on_refined = fem.prolong(v, mesh, refined)
            transferred.append(fem.l2_project(on_refined, refined, final))
    return final, transferred
