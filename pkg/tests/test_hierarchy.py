import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_plane, icosahedron
from vmnet.hierarchy import (HierarchyError, HierarchySpec, QEMTargetWarning, TraceMap,
                             build_hierarchy, pool_mean, qem_simplify, read_trace, unpool,
                             unpool_backward, vertex_clustering, write_trace)
from vmnet.mesh import MeshValidationError, SurfaceMesh, read_ply
from vmnet.training import SceneSpec, generate_scene


# --- trace maps -------------------------------------------------------------

def test_trace_validate_catches_non_surjective():
    with pytest.raises(HierarchyError, match="surjective"):
        TraceMap(np.array([0, 0, 2]), 3).validate()
    with pytest.raises(HierarchyError, match="total"):
        TraceMap(np.array([0, 1, 3]), 3).validate()


def test_trace_compose_and_identity():
    a = TraceMap(np.array([0, 1, 1, 2]), 3)
    b = TraceMap(np.array([1, 0, 1]), 2)
    np.testing.assert_array_equal(a.compose(b).fine_to_coarse, [1, 0, 0, 1])
    np.testing.assert_array_equal(a.compose(TraceMap.identity(3)).fine_to_coarse,
                                  a.fine_to_coarse)
    with pytest.raises(HierarchyError):
        b.compose(a)


def test_trace_file_roundtrip(tmp_path):
    t = TraceMap(np.array([2, 0, 1, 1, 0]), 3)
    p = tmp_path / "t.bin"
    write_trace(p, t)
    assert p.stat().st_size == 8 + 4 * 5
    back = read_trace(p)
    np.testing.assert_array_equal(back.fine_to_coarse, t.fine_to_coarse)
    assert back.coarse_count == 3
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(HierarchyError):
        read_trace(p)


# --- vertex clustering ------------------------------------------------------

def test_vc_single_cell():
    m = grid_plane(3, spacing=0.1)
    coarse, tr = vertex_clustering(m, 10.0)
    assert coarse.num_vertices == 1 and coarse.num_faces == 0
    np.testing.assert_array_equal(tr.fine_to_coarse, np.zeros(9))


def test_vc_fine_cells_is_bijection(ico):
    coarse, tr = vertex_clustering(ico, 0.1)
    assert coarse.num_vertices == ico.num_vertices
    assert sorted(tr.fine_to_coarse.tolist()) == list(range(12))
    # isomorphic: relabelled faces match
    f = {tuple(sorted(x)) for x in tr.fine_to_coarse[ico.faces].tolist()}
    assert f == {tuple(sorted(x)) for x in coarse.faces.tolist()}
    np.testing.assert_allclose(coarse.positions[tr.fine_to_coarse], ico.positions)


def test_vc_two_squares_far_apart():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    pos = np.concatenate([sq, sq + [10, 0, 0]])
    faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]
    coarse, tr = vertex_clustering(SurfaceMesh(pos, faces), 2.0)
    assert coarse.num_vertices == 2
    np.testing.assert_allclose(coarse.positions, [[0.5, 0.5, 0], [10.5, 0.5, 0]])
    np.testing.assert_array_equal(tr.fine_to_coarse, [0, 0, 0, 0, 1, 1, 1, 1])


def test_vc_grid_anchored_at_origin():
    pos = np.array([[-0.01, 0, 0], [0.01, 0, 0], [0.03, 0, 0]])
    coarse, tr = vertex_clustering(SurfaceMesh(pos, np.zeros((0, 3))), 0.02)
    # cells -1, 0, 1 -> three separate vertices in cell order
    np.testing.assert_array_equal(tr.fine_to_coarse, [0, 1, 2])


def test_vc_majority_labels_and_mean_colors():
    pos = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
    col = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    m = SurfaceMesh(pos, np.zeros((0, 3)), col, np.array([2, 1, 2]))
    coarse, _ = vertex_clustering(m, 1.0)
    np.testing.assert_allclose(coarse.colors, [[1 / 3] * 3])
    assert coarse.labels.tolist() == [2]


def test_vc_empty_mesh():
    with pytest.raises(MeshValidationError):
        vertex_clustering(SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3))), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.05, 2.0))
def test_vc_is_idempotent_and_faces_clean(seed, cell):
    rng = np.random.default_rng(seed)
    m = icosahedron().replace(positions=icosahedron().positions * rng.uniform(0.2, 3)
                              + rng.normal(0, 0.05, (12, 3)))
    c1, t1 = vertex_clustering(m, cell)
    c2, t2 = vertex_clustering(c1, cell)
    assert c2.num_vertices == c1.num_vertices
    t1.validate()
    f = c1.faces
    assert np.all((f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2]))
    assert len({tuple(sorted(x)) for x in f.tolist()}) == len(f)


# --- QEM --------------------------------------------------------------------

def _oracle_costs(mesh):
    """Independent quadric construction (closed meshes: face planes only)."""
    P = mesh.positions
    Q = np.zeros((mesh.num_vertices, 4, 4))
    for f in mesh.faces:
        a, b, c = P[f]
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        plane = np.array([*n, -n.dot(a)])
        for v in f:
            Q[v] += np.outer(plane, plane)
    out = {}
    for a, b in mesh.edges:
        q = Q[a] + Q[b]
        try:
            v = np.linalg.solve(q[:3, :3], -q[:3, 3])
            if abs(np.linalg.det(q[:3, :3])) <= 1e-10:
                raise np.linalg.LinAlgError
            cands = [v]
        except np.linalg.LinAlgError:
            cands = [(P[a] + P[b]) / 2, P[a], P[b]]
        out[(int(a), int(b))] = min(float(np.append(x, 1) @ q @ np.append(x, 1)) for x in cands)
    return out


def test_tetrahedron_single_collapse_matches_hand_enumeration(tet):
    costs = _oracle_costs(tet)
    assert len(costs) == 6
    best = min(costs, key=lambda k: (round(costs[k], 12), k))
    res = qem_simplify(tet, 3)
    assert res.mesh.num_vertices == 3 and res.mesh.num_faces == 1
    assert res.costs[0] == pytest.approx(costs[best], abs=1e-9)
    f2c = res.trace.fine_to_coarse
    assert f2c[best[0]] == f2c[best[1]]
    assert len(set(f2c.tolist())) == 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_first_collapse_is_global_minimum(seed):
    rng = np.random.default_rng(seed)
    m = icosahedron()
    m = m.replace(positions=m.positions + rng.normal(0, 0.1, (12, 3)))
    costs = _oracle_costs(m)
    res = qem_simplify(m, 11)
    assert res.costs[0] == pytest.approx(min(costs.values()), rel=1e-6, abs=1e-9)


def test_planar_grid_collapses_are_free_and_stay_on_plane():
    m = grid_plane(3, spacing=1.0, z=0.7)
    res = qem_simplify(m, 4)
    assert res.reached_target
    assert max(res.costs) < 1e-9
    assert np.abs(res.mesh.positions[:, 2] - 0.7).max() < 1e-9


def test_target_bounds():
    m = icosahedron()
    with pytest.raises(ValueError):
        qem_simplify(m, 12)
    res = qem_simplify(m, 11)
    assert res.mesh.num_vertices == 11 and len(res.costs) == 1


def test_unreachable_target_returns_early_with_warning():
    tri = np.eye(3)
    m = SurfaceMesh(np.concatenate([tri, tri + 5]), [[0, 1, 2], [3, 4, 5]])
    with pytest.warns(QEMTargetWarning):
        res = qem_simplify(m, 1)
    assert not res.reached_target
    assert res.mesh.num_vertices == 2


def test_qem_costs_nonnegative_and_trace_valid():
    m = generate_scene(SceneSpec(num_objects=2, floor_size=1.2), 3)
    m0, _ = vertex_clustering(m, 0.05)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", QEMTargetWarning)
        res = qem_simplify(m0, math.ceil(0.3 * m0.num_vertices))
    assert min(res.costs) >= 0
    res.trace.validate()
    assert res.trace.fine_count == m0.num_vertices
    assert res.trace.coarse_count == res.mesh.num_vertices


def test_qem_is_deterministic():
    m = icosahedron()
    a = qem_simplify(m, 6)
    b = qem_simplify(m, 6)
    np.testing.assert_array_equal(a.trace.fine_to_coarse, b.trace.fine_to_coarse)
    np.testing.assert_array_equal(a.mesh.positions, b.mesh.positions)


# --- hierarchy --------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(), 0)


def test_default_hierarchy_plan(scene):
    spec = HierarchySpec.for_voxel_size(0.05, 3)
    h = build_hierarchy(scene, spec)
    assert h.methods == ["vc", "vc", "qem"]
    counts = [m.num_vertices for m in h.levels]
    assert counts[0] > counts[1] > counts[2]
    assert counts[2] == math.ceil(0.3 * counts[1])
    for t in range(1, h.depth):
        tr = h.trace(t)
        tr.validate()
        assert tr.fine_count == counts[t - 1] and tr.coarse_count == counts[t]
    full = h.base_trace.compose(h.composed_trace())
    full.validate()
    assert full.fine_count == scene.num_vertices


def test_default_cell_sizes_are_two_and_four_cm():
    spec = HierarchySpec()
    assert spec.level_plan()[:2] == [("vc", 0.02), ("vc", 0.04)]


def test_vc_only_tags_every_level(scene):
    h = build_hierarchy(scene, HierarchySpec.for_voxel_size(0.05, 3, "vc_only"))
    assert h.methods == ["vc", "vc", "vc"]


def test_qem_only_uses_qem_above_base(scene):
    h = build_hierarchy(scene, HierarchySpec.for_voxel_size(0.05, 3, "qem_only"))
    assert h.methods == ["vc", "qem", "qem"]
    assert h.levels[1].num_vertices == math.ceil(0.3 * h.levels[0].num_vertices)


def test_vc_from_original_traces_stay_adjacent(scene):
    spec = HierarchySpec.for_voxel_size(0.05, 3, vc_from_original=True)
    h = build_hierarchy(scene, spec)
    for t in range(1, h.depth):
        h.trace(t).validate()


def test_hierarchy_too_deep_raises(tet):
    with pytest.raises(HierarchyError, match="level"):
        build_hierarchy(tet, HierarchySpec.for_voxel_size(0.05, 3))


def test_hierarchy_save_layout(tmp_path, scene):
    h = build_hierarchy(scene, HierarchySpec.for_voxel_size(0.05, 3))
    h.save(tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["level_0.ply", "level_1.ply", "level_2.ply", "trace_0_1.bin",
                     "trace_1_2.bin", "trace_input_0.bin"]
    assert read_ply(tmp_path / "level_2.ply").num_vertices == h.levels[2].num_vertices
    np.testing.assert_array_equal(read_trace(tmp_path / "trace_0_1.bin").fine_to_coarse,
                                  h.trace(1).fine_to_coarse)


# --- unpool / pool ----------------------------------------------------------

def test_unpool_constant_and_identity():
    tr = TraceMap(np.array([0, 1, 1, 0, 2]), 3)
    np.testing.assert_array_equal(unpool(np.full((3, 2), 4.0), tr), np.full((5, 2), 4.0))
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(unpool(x, TraceMap.identity(3)), x)


def test_unpool_backward_counts_preimages():
    tr = TraceMap(np.array([0, 1, 1, 0, 2, 1]), 3)
    g = unpool_backward(np.ones((6, 1)), tr)
    np.testing.assert_array_equal(g[:, 0], [2, 3, 1])


def test_unpool_shape_mismatch():
    with pytest.raises(HierarchyError):
        unpool(np.zeros((2, 1)), TraceMap(np.array([0, 1, 2]), 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 30), st.integers(0, 2 ** 31))
def test_pool_mean_inverts_unpool(coarse, extra, seed):
    rng = np.random.default_rng(seed)
    f2c = rng.permutation(np.concatenate([np.arange(coarse), rng.integers(0, coarse, extra)]))
    tr = TraceMap(f2c, coarse)
    x = rng.normal(size=(coarse, 3))
    np.testing.assert_allclose(pool_mean(unpool(x, tr), tr), x, atol=1e-12)
