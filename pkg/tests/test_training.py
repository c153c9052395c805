import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmnet import nn
from vmnet.network import ModelConfig, build_model, make_scene, prepare_inputs, forward
from vmnet.training import (Hyperparams, SceneGenerationError, SceneSpec, TrainingAbort, augment,
                            clip_gradients, confusion_matrix, evaluate, generate_scene,
                            generate_scene_detailed, graph_distance, metrics_from_confusion,
                            poly_lr, sgd_step, train, train_step, trap_contact_sets)

SMALL = ModelConfig(voxel_size=0.1, widths=(4, 6, 8), dtype="float64")
SMALL_SPEC = SceneSpec(floor_size=1.4, spacing=0.1, voxel_size=0.1, num_objects=2)


@pytest.fixture(scope="module")
def small_scenes():
    return [make_scene(generate_scene(SMALL_SPEC, s), SMALL) for s in range(2)]


# --- metrics ----------------------------------------------------------------

def test_confusion_example():
    m = metrics_from_confusion(np.array([[5, 0, 0], [0, 3, 2], [0, 1, 4]]))
    np.testing.assert_allclose(m["per_class_iou"], [1.0, 0.5, 4 / 7])
    assert m["miou"] == pytest.approx((1 + 0.5 + 4 / 7) / 3)
    np.testing.assert_allclose(m["per_class_acc"], [1.0, 0.6, 0.8])


def test_perfect_and_complement():
    y = np.array([0, 1, 0, 1])
    m = metrics_from_confusion(confusion_matrix(y, y, 2))
    assert m["miou"] == 1.0 and m["macc"] == 1.0
    m = metrics_from_confusion(confusion_matrix(1 - y, y, 2))
    assert m["miou"] == 0.0


def test_absent_classes_excluded():
    y = np.array([0, 0, 1])
    m = metrics_from_confusion(confusion_matrix(y, y, 4))
    assert m["miou"] == 1.0
    assert math.isnan(m["per_class_iou"][3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6), st.integers(1, 200))
def test_confusion_total_and_rows(seed, k, n):
    rng = np.random.default_rng(seed)
    t, p = rng.integers(0, k, n), rng.integers(0, k, n)
    cm = confusion_matrix(p, t, k)
    assert cm.sum() == n and cm.min() >= 0
    np.testing.assert_array_equal(cm.sum(1), np.bincount(t, minlength=k))


# --- optimization -----------------------------------------------------------

def test_lr_endpoints():
    assert poly_lr(0.1, 0, 1000) == 0.1
    assert poly_lr(0.1, 1000, 1000) == 0.0
    assert poly_lr(0.1, 500, 1000, 1.0) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        poly_lr(0.1, 0, 0)


def test_sgd_matches_gradient_descent_on_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    b = np.array([1.0, -2.0, 0.5])
    x0 = np.array([2.0, 1.0, -1.0])
    s = nn.ParameterStore()
    x = s.add("x", x0.copy())
    ref = x0.copy()
    for _ in range(50):
        s.grads["x"][...] = A @ x - b
        sgd_step(s, 0.1, 0.0, 0.0)
        ref = ref - 0.1 * (A @ ref - b)
        np.testing.assert_allclose(x, ref, atol=1e-8)


def test_sgd_momentum_and_weight_decay_rule():
    s = nn.ParameterStore()
    w = s.add("a.weight", np.array([1.0]))
    b = s.add("a.bias", np.array([1.0]))
    s.grads["a.weight"][...] = 0.5
    s.grads["a.bias"][...] = 0.5
    sgd_step(s, 0.1, 0.9, 0.1)
    assert w[0] == pytest.approx(1 - 0.1 * 0.6)
    assert b[0] == pytest.approx(1 - 0.1 * 0.5)
    sgd_step(s, 0.1, 0.9, 0.0)
    assert b[0] == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5))


def test_clip_gradients():
    s = nn.ParameterStore()
    s.add("a", np.zeros(2))
    s.grads["a"][...] = [3.0, 4.0]
    assert clip_gradients(s, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(s.grads["a"], [0.6, 0.8])
    clip_gradients(s, 2.0)
    np.testing.assert_allclose(s.grads["a"], [0.6, 0.8])


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_small_step_decreases_loss(small_scenes, lr):
    scene = small_scenes[0]
    model = build_model(SMALL, 0)
    inp = prepare_inputs(scene.hierarchy, SMALL)

    def loss():
        return nn.softmax_cross_entropy(forward(model, inp)[0], scene.labels0)[0]
    before = loss()
    hp = Hyperparams(momentum=0.0, weight_decay=0.0, grad_clip=None)
    train_step(model, scene, hp, lr, np.random.default_rng(0), training=False)
    assert loss() < before


def test_hyperparam_validation():
    for kw in [dict(lr=0), dict(momentum=1.0), dict(power=0), dict(edge_keep=0),
               dict(scale_range=(1.1, 0.9)), dict(grad_clip=0)]:
        with pytest.raises(ValueError):
            Hyperparams(**kw)


# --- augmentation -----------------------------------------------------------

def test_zero_ranges_are_identity():
    m = generate_scene(SMALL_SPEC, 0)
    hp = Hyperparams(scale_range=(1.0, 1.0), rotation_range=0.0, translation=0.0,
                     color_jitter=0.0)
    a = augment(m, hp, 5)
    np.testing.assert_array_equal(a.positions, m.positions)
    np.testing.assert_array_equal(a.colors, m.colors)


def test_rotation_by_pi():
    from vmnet.training import AugmentParams
    a = AugmentParams(1.0, math.pi, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(a.apply_positions(np.array([[1.0, 0, 0]])), [[-1, 0, 0]],
                               atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augment_preserves_topology_and_ranges(seed):
    m = generate_scene(SMALL_SPEC, 0)
    a = augment(m, Hyperparams(), seed)
    np.testing.assert_array_equal(a.faces, m.faces)
    np.testing.assert_array_equal(a.labels, m.labels)
    assert a.colors.min() >= 0 and a.colors.max() <= 1
    assert np.abs(a.colors - m.colors).max() <= 0.05 + 1e-12
    # pairwise distances scale uniformly within [0.9, 1.1]
    ratio = np.linalg.norm(a.positions[1] - a.positions[0]) / \
        np.linalg.norm(m.positions[1] - m.positions[0])
    assert 0.9 - 1e-9 <= ratio <= 1.1 + 1e-9
    # z only scaled and shifted, never rotated
    dz = (a.positions[:, 2] - a.positions[0, 2]) / ratio
    np.testing.assert_allclose(dz, m.positions[:, 2] - m.positions[0, 2], atol=1e-9)


# --- synthetic scenes -------------------------------------------------------

def test_floor_plus_box_two_classes():
    m = generate_scene(SceneSpec(num_classes=2, num_objects=1, floor_size=1.0), 0)
    assert set(np.unique(m.labels)) == {0, 1}


@pytest.mark.parametrize("seed", range(5))
def test_trap_pairs_close_but_disconnected(seed):
    spec = SceneSpec()
    syn = generate_scene_detailed(spec, seed)
    assert syn.trap_pairs
    labels = syn.mesh.labels
    contacts = trap_contact_sets(syn, 1.5 * spec.voxel_size)
    for (a, b), (sa, sb) in zip(syn.trap_pairs, contacts):
        ia = np.flatnonzero(syn.instance == a)
        ib = np.flatnonzero(syn.instance == b)
        assert labels[ia[0]] != labels[ib[0]]
        assert len(sa) and len(sb)
        assert graph_distance(syn.mesh, ia, ib) == math.inf


def test_graph_distance_connected():
    from conftest import grid_plane
    m = grid_plane(3)
    assert graph_distance(m, np.array([0]), np.array([8])) == 2


def test_scene_determinism():
    a = generate_scene(SceneSpec(), 7)
    b = generate_scene(SceneSpec(), 7)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.faces.tobytes() == b.faces.tobytes()


def test_colors_overlap_across_classes():
    m = generate_scene(SceneSpec(), 0)
    means = [m.colors[m.labels == c].mean(0) for c in np.unique(m.labels)]
    stds = [m.colors[m.labels == c].std(0) for c in np.unique(m.labels)]
    spread = np.ptp(np.array(means), axis=0)
    assert spread.max() < 0.45 and min(s.max() for s in stds) > 0


def test_placement_failure():
    with pytest.raises(SceneGenerationError):
        generate_scene(SceneSpec(floor_size=0.3, num_objects=3, max_retries=5), 0)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(num_classes=1)
    with pytest.raises(ValueError):
        SceneSpec(trap_gap=1.5)


# --- loop -------------------------------------------------------------------

def _run(tmp, scenes):
    model = build_model(SMALL, 0)
    return train(model, scenes, Hyperparams(epochs=2, seed=4), out_dir=tmp)


def test_train_writes_outputs_and_is_reproducible(tmp_path, small_scenes):
    r1 = _run(tmp_path / "a", small_scenes)
    _run(tmp_path / "b", small_scenes)
    for name in ("train_log.jsonl", "checkpoint_best.bin", "checkpoint_final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
    assert len(r1.log) == 2 and r1.log[-1]["lr"] == 0.0


def test_train_rejects_label_overflow(small_scenes):
    with pytest.raises(ValueError):
        train(build_model(replace(SMALL, num_classes=2)), small_scenes, Hyperparams(epochs=1))


def test_non_finite_loss_aborts_with_dump(tmp_path, small_scenes, monkeypatch):
    def bad(logits, labels):
        return float("nan"), np.zeros_like(logits)
    monkeypatch.setattr(nn, "softmax_cross_entropy", bad)
    with pytest.raises(TrainingAbort, match="epoch 0 step 0"):
        train(build_model(SMALL), small_scenes, Hyperparams(epochs=1), out_dir=tmp_path)
    dump = json.loads((tmp_path / "abort.json").read_text())
    assert dump["step"] == 0
    assert (tmp_path / "abort_checkpoint.bin").exists()


def test_evaluate_counts_original_vertices(small_scenes):
    rep = evaluate(build_model(SMALL), small_scenes)
    assert rep["vertices"] == sum(s.mesh.num_vertices for s in small_scenes)
    assert np.sum(rep["confusion"]) == rep["vertices"]
