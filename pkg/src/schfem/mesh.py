"""Conforming 2D triangulations with hierarchical newest-vertex bisection.

A mesh is a section through a binary forest: every element is identified by
a macro (root) triangle id and the sequence of bisection choices that lead
to it.  All meshes derived from the same macro triangulation share the
forest, which makes nestedness queries, exact cross-mesh transfer and
sibling-pair coarsening cheap and exact.

Element vertex convention: the refinement edge of element ``(v0, v1, v2)``
is ``(v0, v1)`` and the newest vertex is ``v2``.  Bisection at the midpoint
``m`` of the refinement edge produces the children

    child 0 = (v2, v0, m)      child 1 = (v1, v2, m)

which keeps positive orientation and makes ``m`` the newest vertex of both
children.  Macro rectangles are triangulated criss-cross (two triangles per
grid square with the diagonal as refinement edge), which satisfies the
matching-edge condition, so closure terminates and overlays of two meshes
from the same macro are again conforming.
"""

from __future__ import annotations

import itertools
from functools import cached_property

import numpy as np

from .errors import InputError, StructuralError

_GENERATION = itertools.count(1)

Leaf = tuple  # (root id, path tuple of 0/1 bits)


def _next_generation():
    return next(_GENERATION)


class MacroMesh:
    """Immutable root triangulation shared by a forest of meshes."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise InputError("macro vertices must be (n, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InputError("macro triangles must be (n, 3)")
        self.triangle_coords = self.vertices[self.triangles]  # (nt, 3, 2)

    def same_as(self, other):
        if self is other:
            return True
        return (
            self.vertices.shape == other.vertices.shape
            and self.triangles.shape == other.triangles.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )


def _leaf_coords(macro, root, path):
    """Triangle coordinates of a forest node, by recursive bisection."""
    tri = macro.triangle_coords[root]
    v0, v1, v2 = tri[0], tri[1], tri[2]
    for bit in path:
        m = 0.5 * (v0 + v1)
        if bit == 0:
            v0, v1, v2 = v2, v0, m
        else:
            v0, v1, v2 = v1, v2, m
    return v0, v1, v2


def _leaves_coords(macro, leaves):
    """Vectorized bisection walk for a whole forest section, (ne, 3, 2)."""
    ne = len(leaves)
    if ne == 0:
        return np.empty((0, 3, 2))
    roots = np.fromiter((lf[0] for lf in leaves), dtype=np.int64, count=ne)
    depths = np.fromiter((len(lf[1]) for lf in leaves), dtype=np.int64, count=ne)
    coords = macro.triangle_coords[roots].copy()
    max_depth = int(depths.max())
    if max_depth == 0:
        return coords
    bits = np.zeros((ne, max_depth), dtype=np.int8)
    for i, (_, path) in enumerate(leaves):
        if path:
            bits[i, : len(path)] = path
    for k in range(max_depth):
        active = np.nonzero(depths > k)[0]
        sub = coords[active]
        mid = 0.5 * (sub[:, 0] + sub[:, 1])
        one = bits[active, k] == 1
        out = np.empty_like(sub)
        out[~one, 0] = sub[~one, 2]
        out[~one, 1] = sub[~one, 0]
        out[one, 0] = sub[one, 1]
        out[one, 1] = sub[one, 2]
        out[:, 2] = mid
        coords[active] = out
    return coords


class Mesh:
    """A conforming triangulation given by a section through the forest.

    Instances are immutable: :func:`refine`, :func:`coarsen` and
    :func:`common_refinement` return new values.  Construction is canonical
    (elements sorted by (root, path), vertices deduplicated and ordered
    lexicographically), so two meshes with the same leaf set are equal
    arrays for arrays.
    """

    def __init__(self, macro, leaves, audit=True):
        self.macro = macro
        self.leaves = tuple(sorted(leaves))
        if len(set(self.leaves)) != len(self.leaves):
            raise StructuralError("duplicate leaves in forest section")
        self.generation = _next_generation()

        ne = len(self.leaves)
        coords = _leaves_coords(macro, self.leaves)

        flat = coords.reshape(-1, 2)
        self.vertices, inverse = np.unique(flat, axis=0, return_inverse=True)
        self.elements = inverse.reshape(ne, 3).astype(np.int64)
        self.roots = np.array([lf[0] for lf in self.leaves], dtype=np.int64)

        p0 = coords[:, 0, :]
        p1 = coords[:, 1, :]
        p2 = coords[:, 2, :]
        cross = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
            p1[:, 1] - p0[:, 1]
        ) * (p2[:, 0] - p0[:, 0])
        if np.any(cross <= 0):
            raise StructuralError("negatively oriented element in forest build")
        self.areas = 0.5 * cross
        edge_len = np.stack(
            [
                np.linalg.norm(p1 - p0, axis=1),
                np.linalg.norm(p2 - p1, axis=1),
                np.linalg.norm(p0 - p2, axis=1),
            ],
            axis=1,
        )
        self.h_elem = edge_len.max(axis=1)

        if audit:
            problems = self.audit()
            if problems:
                raise StructuralError("mesh audit failed: " + "; ".join(problems))

    # -- basic queries ----------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def area(self):
        return float(self.areas.sum())

    def __repr__(self):
        return "Mesh(gen={}, {} vertices, {} elements)".format(
            self.generation, self.num_vertices, self.num_elements
        )

    def same_content(self, other):
        """True if both meshes are the same forest section (ids aside)."""
        return self.macro.same_as(other.macro) and self.leaves == other.leaves

    # -- edge topology (lazy) ---------------------------------------------

    @cached_property
    def _edge_data(self):
        ne = self.num_elements
        local = self.elements[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        local_sorted = np.sort(local, axis=1)
        edges, elem_to_edge = np.unique(local_sorted, axis=0, return_inverse=True)
        elem_to_edge = elem_to_edge.reshape(ne, 3)

        n_edges = edges.shape[0]
        edge_elems = np.full((n_edges, 2), -1, dtype=np.int64)
        flat_edges = elem_to_edge.reshape(-1)
        owner = np.repeat(np.arange(ne), 3)
        order = np.argsort(flat_edges, kind="stable")
        for k in order:
            e = flat_edges[k]
            if edge_elems[e, 0] < 0:
                edge_elems[e, 0] = owner[k]
            elif edge_elems[e, 1] < 0:
                edge_elems[e, 1] = owner[k]
            else:
                raise StructuralError("edge with more than two incident elements")

        vec = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        h_edge = np.linalg.norm(vec, axis=1)
        normals = np.stack([vec[:, 1], -vec[:, 0]], axis=1) / h_edge[:, None]
        return edges, elem_to_edge, edge_elems, h_edge, normals

    @property
    def edges(self):
        return self._edge_data[0]

    @property
    def elem_to_edge(self):
        return self._edge_data[1]

    @property
    def edge_elements(self):
        return self._edge_data[2]

    @property
    def h_edge(self):
        return self._edge_data[3]

    @property
    def edge_normals(self):
        return self._edge_data[4]

    @property
    def interior_edge_mask(self):
        return self.edge_elements[:, 1] >= 0

    @cached_property
    def boundary_vertex_mask(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        boundary_edges = self.edges[~self.interior_edge_mask]
        mask[boundary_edges.reshape(-1)] = True
        return mask

    @cached_property
    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    # -- audits ------------------------------------------------------------

    def audit(self):
        """Conformity/orientation audit; returns a list of problem strings."""
        problems = []
        edges, _, edge_elems, _, _ = self._edge_data
        counts = (edge_elems >= 0).sum(axis=1)
        if np.any(counts < 1) or np.any(counts > 2):
            problems.append("edge incidence outside {1, 2}")

        mids = 0.5 * (self.vertices[edges[:, 0]] + self.vertices[edges[:, 1]])
        void = np.dtype((np.void, 16))
        vertex_keys = np.ascontiguousarray(self.vertices).view(void).reshape(-1)
        mid_keys = np.ascontiguousarray(mids).view(void).reshape(-1)
        if np.isin(mid_keys, vertex_keys).any():
            problems.append("hanging node (edge midpoint is a mesh vertex)")
        return problems

    # -- forest queries -----------------------------------------------------

    @cached_property
    def _leaf_set(self):
        return frozenset(self.leaves)

    @cached_property
    def _strict_prefixes(self):
        out = set()
        for root, path in self.leaves:
            for k in range(len(path)):
                out.add((root, path[:k]))
        return out

    def ancestor_leaf(self, root, path):
        """The leaf of this mesh that is an ancestor-or-equal of (root, path)."""
        for k in range(len(path), -1, -1):
            cand = (root, path[:k])
            if cand in self._leaf_set:
                return cand
        return None

    def refines(self, other):
        """True if every element of ``self`` descends from a leaf of ``other``."""
        if not self.macro.same_as(other.macro):
            return False
        return all(other.ancestor_leaf(r, p) is not None for r, p in self.leaves)


# -- constructors ------------------------------------------------------------


def rectangle(bounds, nx, ny=None):
    """Criss-cross macro triangulation of an axis-aligned rectangle.

    Parameters
    ----------
    bounds : (x0, x1, y0, y1)
        Rectangle corners.
    nx, ny : int
        Number of grid cells per direction; each cell is split into two
        triangles along its diagonal (the refinement edge).
    """
    if ny is None:
        ny = nx
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0) or nx < 1 or ny < 1:
        raise InputError("degenerate rectangle bounds or resolution")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            c00 = vid(i, j)
            c10 = vid(i + 1, j)
            c01 = vid(i, j + 1)
            c11 = vid(i + 1, j + 1)
            tris.append((c11, c00, c10))
            tris.append((c00, c11, c01))
    macro = MacroMesh(vertices, np.array(tris, dtype=np.int64))
    leaves = [(r, ()) for r in range(macro.triangles.shape[0])]
    return Mesh(macro, leaves)


def unit_square(nx, ny=None):
    return rectangle((0.0, 1.0, 0.0, 1.0), nx, ny)


# -- refinement ---------------------------------------------------------------


def refine(mesh, marked):
    """Bisect the marked elements (plus conformity closure).

    Every marked element is bisected at least once; unmarked elements are
    bisected only as needed to remove hanging nodes.  Returns a new mesh.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.num_elements):
        raise InputError("invalid element id in marked set")

    elem_to_edge = mesh.elem_to_edge
    n_edges = mesh.edges.shape[0]
    edge_marked = np.zeros(n_edges, dtype=bool)
    edge_marked[elem_to_edge[marked, 0]] = True

    # closure: an element with any marked edge must have its refinement
    # edge marked too
    while True:
        any_marked = edge_marked[elem_to_edge].any(axis=1)
        need = any_marked & ~edge_marked[elem_to_edge[:, 0]]
        if not need.any():
            break
        edge_marked[elem_to_edge[need, 0]] = True

    new_leaves = []
    for i, (root, path) in enumerate(mesh.leaves):
        f0, f1, f2 = edge_marked[elem_to_edge[i]]
        if not f0:
            new_leaves.append((root, path))
            continue
        # child 0 = (v2, v0, m) owns parent edge (v2, v0) = local edge 2
        if f2:
            new_leaves.append((root, path + (0, 0)))
            new_leaves.append((root, path + (0, 1)))
        else:
            new_leaves.append((root, path + (0,)))
        # child 1 = (v1, v2, m) owns parent edge (v1, v2) = local edge 1
        if f1:
            new_leaves.append((root, path + (1, 0)))
            new_leaves.append((root, path + (1, 1)))
        else:
            new_leaves.append((root, path + (1,)))
    return Mesh(mesh.macro, new_leaves)


def refine_uniform(mesh, bisections=1):
    """Apply ``bisections`` rounds of refine-all (two rounds halve h)."""
    out = mesh
    for _ in range(bisections):
        out = refine(out, range(out.num_elements))
    return out


# -- coarsening ---------------------------------------------------------------


def coarsen(mesh, marked, floor=None):
    """Merge marked sibling pairs, bounded by a diameter floor.

    A sibling pair merges only if both children are marked, the merged
    parent's diameter does not exceed ``floor`` (a scalar, or a callable of
    the parent centroid), and removing the pair's bisection vertex leaves
    no hanging node (every element touching that vertex is itself one of
    the merging children).  One call merges at most one forest level.
    """
    marked = set(int(m) for m in marked)
    if marked and (min(marked) < 0 or max(marked) >= mesh.num_elements):
        raise InputError("invalid element id in marked set")
    if not marked:
        return mesh

    def floor_ok(parent_coords):
        if floor is None:
            return True
        d = max(
            np.linalg.norm(parent_coords[0] - parent_coords[1]),
            np.linalg.norm(parent_coords[1] - parent_coords[2]),
            np.linalg.norm(parent_coords[2] - parent_coords[0]),
        )
        if callable(floor):
            centroid = parent_coords.mean(axis=0)
            return d <= floor(centroid)
        return d <= float(floor)

    leaf_index = {leaf: i for i, leaf in enumerate(mesh.leaves)}
    # candidate sibling pairs keyed by the bisection vertex they remove
    by_vertex = {}
    for i, (root, path) in enumerate(mesh.leaves):
        if not path or path[-1] != 0 or i not in marked:
            continue
        sib = (root, path[:-1] + (1,))
        j = leaf_index.get(sib)
        if j is None or j not in marked:
            continue
        parent = (root, path[:-1])
        pc = np.stack(_leaf_coords(mesh.macro, *parent))
        if not floor_ok(pc):
            continue
        mid = mesh.elements[i, 2]
        if mesh.elements[j, 2] != mid:
            raise StructuralError("sibling pair does not share its bisection vertex")
        by_vertex.setdefault(mid, []).append((i, j, parent))

    touch_count = np.zeros(mesh.num_vertices, dtype=np.int64)
    np.add.at(touch_count, mesh.elements.reshape(-1), 1)

    drop = set()
    add = []
    for mid, pairs in by_vertex.items():
        if touch_count[mid] != 2 * len(pairs):
            continue  # some non-merging element still needs the vertex
        for i, j, parent in pairs:
            drop.add(i)
            drop.add(j)
            add.append(parent)

    if not drop:
        return mesh
    new_leaves = [leaf for i, leaf in enumerate(mesh.leaves) if i not in drop]
    new_leaves.extend(add)
    return Mesh(mesh.macro, new_leaves)


# -- overlay ------------------------------------------------------------------


def common_refinement(a, b):
    """Finest common refinement (overlay) of two meshes from one macro."""
    if not a.macro.same_as(b.macro):
        raise StructuralError("meshes do not share a macro triangulation")
    if a.leaves == b.leaves:
        return Mesh(a.macro, a.leaves)

    strict_prefixes_b = b._strict_prefixes
    descendants_b = {}
    for leaf in b.leaves:
        root, path = leaf
        for k in range(len(path)):
            descendants_b.setdefault((root, path[:k]), []).append(leaf)

    out = []
    for leaf in a.leaves:
        if leaf in strict_prefixes_b:
            out.extend(descendants_b[leaf])
        else:
            out.append(leaf)
    return Mesh(a.macro, out)


# -- VTK export ---------------------------------------------------------------


def write_vtk(path, mesh, point_data=None, title="schfem snapshot"):
    """Write a legacy ASCII VTK UNSTRUCTURED_GRID file with triangle cells.

    ``point_data`` is an ordered mapping of scalar name -> nodal array.
    """
    point_data = point_data or {}
    for name, values in point_data.items():
        if len(values) != mesh.num_vertices:
            raise InputError(f"point data '{name}' length mismatch")
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.num_vertices} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    ne = mesh.num_elements
    lines.append(f"CELLS {ne} {4 * ne}")
    for a_, b_, c_ in mesh.elements:
        lines.append(f"3 {a_} {b_} {c_}")
    lines.append(f"CELL_TYPES {ne}")
    lines.extend(["5"] * ne)
    if point_data:
        lines.append(f"POINT_DATA {mesh.num_vertices}")
        for name, values in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in np.asarray(values, dtype=float))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
