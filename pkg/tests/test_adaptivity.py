import numpy as np
import pytest

from schfem import adaptivity, fem
from schfem.adaptivity import AdaptConfig, MarkSet
from schfem.errors import InputError
from schfem.harness import two_circle_profile
from schfem.mesh import rectangle, refine_uniform


def test_config_validation():
    with pytest.raises(InputError):
        AdaptConfig(h_min=0.1, ceiling=0.05)
    with pytest.raises(InputError):
        AdaptConfig(h_min=0.01, ceiling=0.1, refine_fraction=0.1,
                    coarsen_fraction=0.25)


def test_threshold_arithmetic():
    values = np.array([1.0, 0.3, 0.2, 0.05])
    h = np.full(4, 1.0)
    cfg = AdaptConfig(h_min=0.5, ceiling=2.0)
    marks = adaptivity.mark_from_values(values, h, cfg)
    assert marks.eta_max == 1.0
    assert set(marks.refine_ids.tolist()) == {0, 1}
    assert set(marks.coarsen_ids.tolist()) == {3}


def test_zero_eta_max_marks_nothing():
    cfg = AdaptConfig(h_min=0.5, ceiling=2.0)
    marks = adaptivity.mark_from_values(np.zeros(4), np.ones(4), cfg)
    assert marks.refine_ids.size == 0 and marks.coarsen_ids.size == 0


def test_disjoint_sets_enforced():
    with pytest.raises(InputError):
        MarkSet(np.array([1, 2]), np.array([2, 3]), 1.0)


def test_affine_field_produces_no_marks():
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 4), 2)
    u = fem.interpolate(mesh, lambda x, y: 0.5 * x - 0.25 * y)
    cfg = AdaptConfig(h_min=1.0 / 64.0, ceiling=0.25)
    marks = adaptivity.mark(u, mesh, cfg)
    assert marks.eta_max == 0.0
    assert marks.refine_ids.size == 0 and marks.coarsen_ids.size == 0


def test_tanh_interface_band_marking():
    eps = 1.0 / 16.0
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 8), 2)
    profile = two_circle_profile(0.2, 0.55, eps)
    u = fem.project_callable(mesh, profile)
    cfg = AdaptConfig(h_min=1.0 / 64.0, ceiling=1.0 / 8.0)
    marks = adaptivity.mark(u, mesh, cfg)
    assert marks.refine_ids.size > 0
    assert marks.coarsen_ids.size > 0
    # refine set hugs the two interface circles, coarsen set sits in bulk
    cent = mesh.centroids
    radii = np.linalg.norm(cent, axis=1)
    near = np.minimum(np.abs(radii - 0.2), np.abs(radii - 0.55))
    assert near[marks.refine_ids].max() < 4.0 * eps + mesh.h_elem.max()
    assert np.percentile(near[marks.coarsen_ids], 50) > 2.0 * eps


def test_adapt_empty_marks_is_identity():
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 4), 1)
    u = fem.fe_function(mesh, np.zeros(mesh.num_vertices))
    cfg = AdaptConfig(h_min=1.0 / 16.0, ceiling=0.5)
    marks = MarkSet(np.array([], dtype=int), np.array([], dtype=int), 0.0)
    out, carried = adaptivity.adapt(mesh, marks, [u], cfg)
    assert out is mesh
    assert np.array_equal(carried[0].values, u.values)


def test_refine_only_transfer_is_exact_at_old_vertices():
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 4), 1)
    rng = np.random.default_rng(2)
    u = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    cfg = AdaptConfig(h_min=1.0 / 32.0, ceiling=0.5)
    marks = MarkSet(np.arange(4), np.array([], dtype=int), 1.0)
    out, (v,) = adaptivity.adapt(mesh, marks, [u], cfg)
    assert out.refines(mesh)
    # nested prolongation: values at every old vertex unchanged
    old = {tuple(p): u.values[i] for i, p in enumerate(mesh.vertices)}
    for i, p in enumerate(out.vertices):
        key = tuple(p)
        if key in old:
            assert abs(v.values[i] - old[key]) < 1e-15


def test_refine_until_h_min():
    mesh = rectangle((-1.0, 1.0, -1.0, 1.0), 4)
    cfg = AdaptConfig(h_min=1.0 / 16.0, ceiling=0.5)
    marks = MarkSet(np.array([0]), np.array([], dtype=int), 1.0)
    out, _ = adaptivity.adapt(mesh, marks, [], cfg)
    # every descendant of the marked leaf satisfies h <= h_min
    root, path = mesh.leaves[0]
    for i, (r, p) in enumerate(out.leaves):
        if r == root and p[: len(path)] == path:
            assert out.h_elem[i] <= cfg.h_min + 1e-12


def test_coarsen_ceiling_preserves_noise_ancestry():
    noise_mesh = rectangle((-1.0, 1.0, -1.0, 1.0), 8)  # h-tilde = 1/4
    mesh = refine_uniform(noise_mesh, 4)
    cfg = AdaptConfig(h_min=1.0 / 64.0, ceiling=1.0 / 4.0)
    current = mesh
    for _ in range(8):
        marks = MarkSet(
            np.array([], dtype=int), np.arange(current.num_elements), 1.0
        )
        nxt, _ = adaptivity.adapt(current, marks, [], cfg)
        assert nxt.refines(noise_mesh)
        assert nxt.h_elem.max() <= cfg.ceiling + 1e-12
        if nxt.same_content(current):
            break
        current = nxt
    assert current.num_elements < mesh.num_elements


def test_adaptation_is_deterministic():
    eps = 1.0 / 16.0
    mesh = refine_uniform(rectangle((-1.0, 1.0, -1.0, 1.0), 8), 2)
    u = fem.project_callable(mesh, two_circle_profile(0.2, 0.55, eps))
    cfg = AdaptConfig(h_min=1.0 / 32.0, ceiling=1.0 / 8.0)
    m1 = adaptivity.mark(u, mesh, cfg)
    out1, _ = adaptivity.adapt(mesh, m1, [], cfg)
    m2 = adaptivity.mark(u, mesh, cfg)
    out2, _ = adaptivity.adapt(mesh, m2, [], cfg)
    assert out1.same_content(out2)


def test_coarsening_transfer_uses_l2_projection():
    noise_mesh = rectangle((-1.0, 1.0, -1.0, 1.0), 4)
    mesh = refine_uniform(noise_mesh, 2)
    rng = np.random.default_rng(3)
    u = fem.fe_function(mesh, rng.standard_normal(mesh.num_vertices))
    cfg = AdaptConfig(h_min=1.0 / 64.0, ceiling=2.0)
    marks = MarkSet(np.array([], dtype=int), np.arange(mesh.num_elements), 1.0)
    out, (v,) = adaptivity.adapt(mesh, marks, [u], cfg)
    assert out.num_elements < mesh.num_elements
    expected = fem.l2_project(u, mesh, out)
    assert np.abs(v.values - expected.values).max() < 1e-12
