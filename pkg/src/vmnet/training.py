"""Synthetic scenes, augmentation, the momentum-SGD/poly training loop and segmentation metrics."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .hierarchy import MeshHierarchy
from .mesh import SurfaceMesh, connected_components, project_labels
from .network import (Model, ModelConfig, Scene, backward, forward, make_scene, predict,
                      prepare_inputs, save_model)

CLASS_NAMES = ("floor", "box", "cylinder", "slab")


class SceneGenerationError(RuntimeError):
    pass


class TrainingAbort(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class SceneSpec:
    """Desk-scale surrogate scene: a floor plane plus primitives.

    With ``geodesic_trap`` every object hovers ``trap_gap`` voxels above the
    floor and one object pair stands ``trap_gap`` voxels apart, so those
    surfaces are Euclidean neighbors without sharing any mesh edge.

    The floor sits at ``floor_height`` voxels and the side-by-side seam at
    1.5 voxels modulo 2, so in the canonical pose both trap surfaces fall in
    distinct cells at the voxel and double-voxel clustering sizes.
    """

    num_classes: int = 4
    num_objects: int = 3
    floor_size: float = 1.6
    spacing: float = 0.05
    voxel_size: float = 0.05
    geodesic_trap: bool = True
    trap_gap: float = 1.0
    free_gap: float = 4.0
    floor_height: float = 1.5
    noise: float = 0.002
    color_noise: float = 0.04
    max_retries: int = 200

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
        if self.spacing <= 0 or self.floor_size <= 0 or self.voxel_size <= 0:
            raise ValueError("sizes and densities must be positive")
        if self.num_objects < 1:
            raise ValueError("need at least one object")
        if self.geodesic_trap and not 0 < self.trap_gap < 1.5:
            raise ValueError("trap_gap must be below 1.5 voxel lengths")


@dataclass
class SyntheticScene:
    mesh: SurfaceMesh
    instance: np.ndarray
    trap_pairs: list = field(default_factory=list)


def _grid_patch(origin, u, v, nu, nv):
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    a = np.arange(nu + 1) / nu
    b = np.arange(nv + 1) / nv
    A, B = np.meshgrid(a, b, indexing="ij")
    pts = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    q0, q1 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    q2, q3 = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([q0, q1, q2], 1), np.stack([q0, q2, q3], 1)])
    return pts, faces


def _weld(parts, tol=1e-7):
    pts, faces, off = [], [], 0
    for p, f in parts:
        pts.append(p)
        faces.append(f + off)
        off += len(p)
    pts = np.concatenate(pts)
    faces = np.concatenate(faces)
    key = np.round(pts / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    faces = remap[inv[faces]]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return pts[first[order]], faces[ok]


def _n(length, h):
    return max(1, int(round(length / h)))


def box_mesh(lo, hi, h):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = hi - lo
    ex, ey, ez = np.diag(d)
    nx, ny, nz = _n(d[0], h), _n(d[1], h), _n(d[2], h)
    parts = [
        _grid_patch(lo, ey, ex, ny, nx),
        _grid_patch(lo + ez, ex, ey, nx, ny),
        _grid_patch(lo, ex, ez, nx, nz),
        _grid_patch(lo + ey, ez, ex, nz, nx),
        _grid_patch(lo, ez, ey, nz, ny),
        _grid_patch(lo + ex, ey, ez, ny, nz),
    ]
    return _weld(parts)


def cylinder_mesh(center_xy, z0, radius, height, h):
    m = max(8, int(math.ceil(2 * math.pi * radius / h)))
    rows = _n(height, h)
    rings = max(1, int(round(radius / h)))
    ang = 2 * math.pi * np.arange(m) / m
    cx, cy = center_xy
    pts, faces = [], []

    def ring(r, z):
        return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang), np.full(m, z)], 1)

    base = 0
    side = np.concatenate([ring(radius, z0 + height * k / rows) for k in range(rows + 1)])
    pts.append(side)
    for k in range(rows):
        for a in range(m):
            i0, i1 = base + k * m + a, base + k * m + (a + 1) % m
            j0, j1 = i0 + m, i1 + m
            faces += [(i0, i1, j1), (i0, j1, j0)]
    base += len(side)
    for z, flip in ((z0, True), (z0 + height, False)):
        cap = [np.array([[cx, cy, z]])] + [ring(radius * k / rings, z) for k in range(1, rings + 1)]
        cap = np.concatenate(cap)
        pts.append(cap)
        c = base
        for a in range(m):
            t = (c, c + 1 + a, c + 1 + (a + 1) % m)
            faces.append(t[::-1] if flip else t)
        for k in range(1, rings):
            for a in range(m):
                i0 = c + 1 + (k - 1) * m + a
                i1 = c + 1 + (k - 1) * m + (a + 1) % m
                j0, j1 = i0 + m, i1 + m
                t1, t2 = (i0, j0, j1), (i0, j1, i1)
                faces += [t1[::-1], t2[::-1]] if flip else [t1, t2]
        base += len(cap)
    pts = np.concatenate(pts)
    return _weld([(pts, np.array(faces, dtype=np.int64))])


def _object_mesh(cls, rng, x, y, z0, spec):
    """Mesh and footprint half-extent for one object of class ``cls`` centered at (x, y)."""
    h = spec.spacing
    if cls == 1:
        sx, sy = rng.uniform(0.25, 0.4, 2)
        sz = rng.uniform(0.25, 0.45)
        return box_mesh((x - sx / 2, y - sy / 2, z0), (x + sx / 2, y + sy / 2, z0 + sz), h)
    if cls == 2:
        r = rng.uniform(0.12, 0.18)
        return cylinder_mesh((x, y), z0, r, rng.uniform(0.25, 0.45), h)
    sx, sy = rng.uniform(0.35, 0.5, 2)
    sz = rng.uniform(0.08, 0.12)
    return box_mesh((x - sx / 2, y - sy / 2, z0), (x + sx / 2, y + sy / 2, z0 + sz), h)


def _footprint(pts):
    return pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()


def _separated(a, b, gap):
    return a[1] + gap <= b[0] or b[1] + gap <= a[0] or a[3] + gap <= b[2] or b[3] + gap <= a[2]


def generate_scene_detailed(spec: SceneSpec, seed) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    v, h, F = spec.voxel_size, spec.spacing, spec.floor_size
    z_floor = spec.floor_height * v
    hover = z_floor + (spec.trap_gap * v if spec.geodesic_trap else spec.free_gap * v)
    classes = [1 + (k % (spec.num_classes - 1)) for k in range(spec.num_objects)]
    rng.shuffle(classes)
    fp, fpf = _grid_patch((0, 0, z_floor), (F, 0, 0), (0, F, 0), _n(F, h), _n(F, h))
    parts = [(fp, fpf, 0, 0)]
    prints = []
    trap_pairs = []
    margin = 0.1
    for k, cls in enumerate(classes):
        for _ in range(spec.max_retries):
            x, y = rng.uniform(margin, F - margin, 2)
            if spec.geodesic_trap and k == 0:
                # leave room on the +x side for the trap neighbor
                x = rng.uniform(margin, 0.45 * F)
            pts, faces = _object_mesh(cls, rng, 0.0, 0.0, hover, spec)
            lo = pts[:, :2].min(0)
            if spec.geodesic_trap and k == 0:
                x += (1.5 * v - x - pts[:, 0].max()) % (2 * v)
            if spec.geodesic_trap and k == 1 and prints:
                # stand next to the first object, one trap gap away along +x
                px = prints[0][1] + spec.trap_gap * v - lo[0]
                x, y = px, (prints[0][2] + prints[0][3]) / 2
            pts = pts + np.array([x, y, 0.0])
            fpk = _footprint(pts)
            inside = fpk[0] >= margin / 2 and fpk[1] <= F - margin / 2 and \
                fpk[2] >= margin / 2 and fpk[3] <= F - margin / 2
            sep = all(_separated(fpk, q, 0.99 * spec.trap_gap * v if (
                spec.geodesic_trap and k == 1 and j == 0) else spec.free_gap * v)
                for j, q in enumerate(prints))
            if inside and sep:
                break
        else:
            raise SceneGenerationError(f"could not place object {k} after {spec.max_retries} tries")
        prints.append(fpk)
        parts.append((pts, faces, cls, k + 1))
    if spec.geodesic_trap:
        trap_pairs = [(0, k + 1) for k in range(len(classes))]
        if len(classes) > 1 and classes[0] != classes[1]:
            trap_pairs.append((1, 2))
    pos, fcs, lab, inst = [], [], [], []
    off = 0
    for pts, faces, cls, ins in parts:
        pos.append(pts)
        fcs.append(faces + off)
        lab.append(np.full(len(pts), cls))
        inst.append(np.full(len(pts), ins))
        off += len(pts)
    pos = np.concatenate(pos)
    pos = pos + rng.normal(0.0, spec.noise, pos.shape) if spec.noise > 0 else pos
    labels = np.concatenate(lab)
    instance = np.concatenate(inst)
    # shared color distribution; a small per-class tint keeps colors weakly informative only
    base = rng.uniform(0.3, 0.7, (instance.max() + 1, 3))
    tint = 0.03 * (np.arange(spec.num_classes) - (spec.num_classes - 1) / 2)
    colors = base[instance] + tint[labels, None] + rng.normal(0, spec.color_noise, pos.shape)
    colors = np.clip(colors, 0.0, 1.0)
    mesh = SurfaceMesh(pos, np.concatenate(fcs), colors, labels)
    return SyntheticScene(mesh, instance, trap_pairs)


def generate_scene(spec: SceneSpec, seed) -> SurfaceMesh:
    return generate_scene_detailed(spec, seed).mesh


def trap_contact_sets(scene: SyntheticScene, radius: float):
    """For each trap pair, the vertices of each side lying within ``radius`` of the other side."""
    from scipy.spatial import cKDTree

    P = scene.mesh.positions
    out = []
    for a, b in scene.trap_pairs:
        ia = np.flatnonzero(scene.instance == a)
        ib = np.flatnonzero(scene.instance == b)
        da, _ = cKDTree(P[ib]).query(P[ia])
        db, _ = cKDTree(P[ia]).query(P[ib])
        out.append((ia[da <= radius], ib[db <= radius]))
    return out


def graph_distance(mesh: SurfaceMesh, a: np.ndarray, b: np.ndarray) -> float:
    """Hop distance between two vertex sets (inf when disconnected), via BFS."""
    from collections import deque

    adj = mesh.adjacency
    dist = np.full(mesh.num_vertices, -1)
    q = deque(int(i) for i in a)
    dist[list(a)] = 0
    target = set(int(i) for i in b)
    while q:
        i = q.popleft()
        if i in target:
            return float(dist[i])
        for j in adj.ring(i):
            if dist[j] < 0:
                dist[j] = dist[i] + 1
                q.append(int(j))
    return math.inf


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.1
    momentum: float = 0.9
    power: float = 0.9
    epochs: int = 100
    weight_decay: float = 1e-4
    edge_keep: float = 0.8
    scale_range: tuple = (0.9, 1.1)
    rotation_range: float = 2 * math.pi
    translation: float = 0.5
    color_jitter: float = 0.05
    grad_clip: float | None = 1.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.power > 0:
            raise ValueError("power must be positive")
        if not 0 < self.edge_keep <= 1:
            raise ValueError("edge_keep must be in (0, 1]")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError("invalid scale range")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or None")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    angle: float
    shift: np.ndarray
    jitter: np.ndarray

    def apply_positions(self, positions):
        c, s = math.cos(self.angle), math.sin(self.angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return (positions * self.scale) @ R.T + self.shift

    def apply_colors(self, colors):
        return np.clip(colors + self.jitter, 0.0, 1.0)


def draw_augmentation(hp: Hyperparams, rng) -> AugmentParams:
    lo, hi = hp.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    angle = rng.uniform(0.0, hp.rotation_range) if hp.rotation_range > 0 else 0.0
    t = hp.translation
    shift = rng.uniform(-t, t, 3) if t > 0 else np.zeros(3)
    j = hp.color_jitter
    jitter = rng.uniform(-j, j, 3) if j > 0 else np.zeros(3)
    return AugmentParams(scale, angle, shift, jitter)


def augment(mesh: SurfaceMesh, hp: Hyperparams, seed) -> SurfaceMesh:
    """Random scale, rotation about +z, translation and additive color jitter; topology untouched."""
    a = draw_augmentation(hp, np.random.default_rng(seed))
    return mesh.replace(positions=a.apply_positions(mesh.positions),
                        colors=a.apply_colors(mesh.colors))


def augment_hierarchy(h: MeshHierarchy, a: AugmentParams):
    """Same transform on every level; returns per-level positions and jittered M^0 colors."""
    return ([a.apply_positions(m.positions) for m in h.levels],
            a.apply_colors(h.levels[0].colors))


# ---------------------------------------------------------------------------
# optimization

def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    frac = min(max(step / total, 0.0), 1.0)
    return base * (1.0 - frac) ** power


def clip_gradients(store: nn.ParameterStore, max_norm: float) -> float:
    """Rescale all gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                          for g in store.grads.values()))
    if total > max_norm:
        s = max_norm / total
        for g in store.grads.values():
            g *= s
    return total


def sgd_step(store: nn.ParameterStore, lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD, v <- mu v + g (+ wd w for weights), w <- w - lr v."""
    for name, w in store.params.items():
        g = store.grads[name]
        if weight_decay and name.endswith(".weight"):
            g = g + weight_decay * w
        if momentum:
            v = store.momentum.get(name)
            if v is None:
                v = store.momentum[name] = np.zeros_like(w)
            v *= momentum
            v += g
            g = v
        w -= (lr * g).astype(w.dtype, copy=False)


def _split_seed(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def train_step(model: Model, scene: Scene, hp: Hyperparams, lr: float, rng, training=True):
    """One augment/forward/backward/update step; returns (loss, accuracy on M^0)."""
    h = scene.hierarchy
    if training and hp.augment:
        pos, col = augment_hierarchy(h, draw_augmentation(hp, rng))
    else:
        pos, col = None, None
    keep = hp.edge_keep if training else 1.0
    inputs = prepare_inputs(h, model.config, pos, col, keep, rng)
    logits, state = forward(model, inputs)
    loss, dlogits = nn.softmax_cross_entropy(logits, scene.labels0)
    if not np.isfinite(loss):
        raise TrainingAbort(f"non-finite loss {loss}")
    model.store.zero_grad()
    backward(model, state, dlogits.astype(logits.dtype))
    if hp.grad_clip is not None:
        clip_gradients(model.store, hp.grad_clip)
    sgd_step(model.store, lr, hp.momentum, hp.weight_decay)
    acc = float((logits.argmax(1) == scene.labels0).mean())
    return loss, acc


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_loss: float


def train(model: Model, scenes: list, hp: Hyperparams, out_dir=None, log_every_step=False,
          stop_at_accuracy: float | None = None) -> TrainResult:
    """Train end to end; one full scene per step, poly-decayed momentum SGD.

    When ``out_dir`` is given, writes ``train_log.jsonl``, ``checkpoint_final.bin``
    and ``checkpoint_best.bin``.
    """
    k = {int(s.labels0.max()) for s in scenes}
    if any(x >= model.config.num_classes for x in k):
        raise ValueError("scene labels exceed the model's class count")
    total = hp.epochs * len(scenes)
    rng = _split_seed(hp.seed, 1)
    log, step = [], 0
    best = (math.inf, -1)
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")
    try:
        for epoch in range(hp.epochs):
            order = rng.permutation(len(scenes))
            losses, correct, count = [], 0, 0
            for si in order:
                lr = poly_lr(hp.lr, step, total, hp.power)
                try:
                    loss, acc = train_step(model, scenes[si], hp, lr, rng)
                except (TrainingAbort, FloatingPointError) as exc:
                    if out_dir is not None:
                        _dump_abort(out_dir, model, epoch, step, int(si), exc)
                    raise TrainingAbort(
                        f"epoch {epoch} step {step} scene {si}: {exc}") from exc
                n = len(scenes[si].labels0)
                losses.append(loss)
                correct += acc * n
                count += n
                step += 1
                if log_every_step and log_fh is not None:
                    log_fh.write(json.dumps(dict(epoch=epoch, step=step, loss=loss, lr=lr,
                                                 train_acc=acc)) + "\n")
            rec = dict(epoch=epoch, step=step, loss=float(np.mean(losses)),
                       lr=poly_lr(hp.lr, step, total, hp.power), train_acc=correct / count)
            log.append(rec)
            if log_fh is not None and not log_every_step:
                log_fh.write(json.dumps(rec) + "\n")
            if rec["loss"] < best[0]:
                best = (rec["loss"], epoch)
                if out_dir is not None:
                    save_model(model, os.path.join(out_dir, "checkpoint_best.bin"),
                               {"epoch": epoch})
            if stop_at_accuracy is not None and rec["train_acc"] >= stop_at_accuracy:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_model(model, os.path.join(out_dir, "checkpoint_final.bin"), {"epoch": len(log) - 1})
    return TrainResult(log, best[1], best[0])


def _dump_abort(out_dir, model, epoch, step, scene_index, exc):
    with open(os.path.join(out_dir, "abort.json"), "w") as fh:
        json.dump(dict(epoch=epoch, step=step, scene=scene_index, error=str(exc)), fh)
    save_model(model, os.path.join(out_dir, "abort_checkpoint.bin"))


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(pred, truth, k) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Per-class IoU/accuracy and their means; classes absent from truth and prediction are skipped."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fn = cm.sum(1) - tp
    fp = cm.sum(0) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
    return dict(per_class_iou=iou.tolist(), miou=float(np.nanmean(iou)),
                per_class_acc=acc.tolist(), macc=float(np.nanmean(acc)),
                confusion=cm.astype(np.int64).tolist())


def evaluate(model: Model, scenes: list) -> dict:
    """Score predictions on the original meshes (M^0 predictions projected through the base trace)."""
    k = model.config.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for s in scenes:
        inputs = prepare_inputs(s.hierarchy, model.config)
        logits, _ = forward(model, inputs)
        pred = project_labels(s.mesh, logits.argmax(1), s.hierarchy.base_trace)
        cm += confusion_matrix(pred, s.mesh.labels, k)
    out = metrics_from_confusion(cm)
    out["vertices"] = int(cm.sum())
    return out


def trap_pair_outcomes(model: Model, scene: Scene, synthetic: SyntheticScene, radius: float):
    """For each trap pair, whether the two contact surfaces get different majority classes."""
    pred = predict(model, scene)
    res = []
    for sa, sb in trap_contact_sets(synthetic, radius):
        if len(sa) == 0 or len(sb) == 0:
            continue
        ma = np.bincount(pred[sa]).argmax()
        mb = np.bincount(pred[sb]).argmax()
        res.append(bool(ma != mb))
    return res


def make_scenes(meshes, config: ModelConfig) -> list:
    return [make_scene(m, config) for m in meshes]


def hyperparams_json(hp: Hyperparams) -> str:
    return json.dumps(asdict(hp), sort_keys=True)


__all__ = [
    "CLASS_NAMES", "Hyperparams", "SceneSpec", "SyntheticScene", "TrainingAbort", "augment",
    "confusion_matrix", "evaluate", "generate_scene", "generate_scene_detailed",
    "graph_distance", "metrics_from_confusion", "poly_lr", "sgd_step", "train", "train_step",
    "trap_contact_sets", "trap_pair_outcomes", "connected_components", "ModelConfig",
]
