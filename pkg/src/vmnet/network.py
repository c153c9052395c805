"""VMNet assembly: sparse-voxel U-Net, voxel-to-vertex projection and the geodesic stack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .hierarchy import HierarchySpec, MeshHierarchy, build_hierarchy
from .hierarchy import pool_mean, pool_mean_backward, unpool, unpool_backward
from .mesh import SurfaceMesh, sample_edges
from .voxel import (Rulebook, SparseVoxelGrid, conv_backward, conv_forward, projection_matrix,
                    project_backward, project_forward, strided_rulebook, submanifold_rulebook,
                    transposed_rulebook, voxelize)

BRANCHES = ("full", "euc_only", "geo_only", "euc_intra")
VARIANTS = ("scalar", "vector", "edgeconv")
FUSIONS = ("primal", "dual")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``branch``: ``full`` (VMNet), ``euc_only`` (voxel U-Net baseline),
    ``geo_only`` (intra-attention U-Net over the mesh hierarchy) or
    ``euc_intra`` (U-Net plus intra modules, no inter-domain fusion).
    ``refinement_depth`` counts mesh levels carrying geodesic modules from M^0
    upward; ``None`` enables all levels.
    """

    levels: int = 3
    widths: tuple = (16, 32, 64)
    in_channels: int = 3
    num_classes: int = 4
    variant: str = "scalar"
    fusion: str = "primal"
    branch: str = "full"
    refinement_depth: int | None = None
    self_in_ring: bool = False
    key_dim: int | None = None
    euclid_norm: str = "layer"
    voxel_size: float = 0.02
    hierarchy: str = "vc_qem"
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.levels < 2:
            raise ConfigError("need at least 2 levels")
        if len(self.widths) != self.levels or min(self.widths) <= 0:
            raise ConfigError(f"widths {self.widths} must give {self.levels} positive entries")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.branch not in BRANCHES:
            raise ConfigError(f"unknown branch {self.branch!r}")
        if self.refinement_depth is not None and not 0 <= self.refinement_depth <= self.levels:
            raise ConfigError(f"refinement_depth must be in [0, {self.levels}]")
        if self.euclid_norm not in ("layer", "none"):
            raise ConfigError(f"unknown euclid_norm {self.euclid_norm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.hierarchy not in ("vc_qem", "vc_only", "qem_only"):
            raise ConfigError(f"unknown hierarchy method {self.hierarchy!r}")

    @property
    def resolution(self) -> float:
        return 1.0 / self.voxel_size

    @property
    def geo_depth(self) -> int:
        """Number of mesh levels with geodesic modules (0 for the Euclidean baseline)."""
        if self.branch == "euc_only":
            return 0
        return self.levels if self.refinement_depth is None else self.refinement_depth

    def hierarchy_spec(self) -> HierarchySpec:
        return HierarchySpec.for_voxel_size(self.voxel_size, self.levels, self.hierarchy)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# per-scene inputs

@dataclass
class SceneInputs:
    """Everything one forward pass needs for one scene."""

    input_features: np.ndarray
    submanifold: list
    strided: list
    projections: list
    adjacency: list
    traces: list
    vertex_counts: list
    voxel_counts: list = field(default_factory=list)


def prepare_inputs(hierarchy: MeshHierarchy, config: ModelConfig, positions=None, colors=None,
                   keep_probability: float = 1.0, rng=None) -> SceneInputs:
    """Voxelize M^0, build all rulebooks/projections and (optionally sampled) adjacencies.

    ``positions`` overrides per-level vertex positions (augmentation);
    ``colors`` overrides the M^0 colors.
    """
    if hierarchy.depth != config.levels:
        raise ConfigError(
            f"hierarchy has {hierarchy.depth} levels, model expects {config.levels}")
    dt = np.dtype(config.dtype)
    positions = positions or [m.positions for m in hierarchy.levels]
    colors = hierarchy.levels[0].colors if colors is None else colors
    r = config.resolution
    grid, _ = voxelize(positions[0], colors, r)
    grids = [grid]
    subm, strided = [], []
    for lvl in range(config.levels):
        subm.append(submanifold_rulebook(grids[-1]))
        if lvl < config.levels - 1:
            rb = strided_rulebook(grids[-1])
            strided.append(rb)
            grids.append(SparseVoxelGrid(rb.out_coords, grids[-1].resolution / 2))
    projections = [projection_matrix(g, p).astype(dt) for g, p in zip(grids, positions)]
    adjacency = []
    for lvl, mesh in enumerate(hierarchy.levels):
        if keep_probability < 1.0:
            seed = None if rng is None else int(rng.integers(2 ** 63))
            es = sample_edges(mesh, keep_probability, seed)
            adj = es.adjacency(config.self_in_ring)
        else:
            adj = mesh.adjacency.with_self_loops() if config.self_in_ring else mesh.adjacency
        adjacency.append(adj)
    return SceneInputs(
        input_features=grid.features.astype(dt),
        submanifold=subm,
        strided=strided,
        projections=projections,
        adjacency=adjacency,
        traces=list(hierarchy.traces),
        vertex_counts=[m.num_vertices for m in hierarchy.levels],
        voxel_counts=[len(g) for g in grids],
    )


# ---------------------------------------------------------------------------
# layers

class Linear:
    def __init__(self, name, cin, cout, bias=True):
        self.name, self.cin, self.cout, self.bias = name, cin, cout, bias

    def shapes(self):
        s = {f"{self.name}.weight": (self.cin, self.cout)}
        if self.bias:
            s[f"{self.name}.bias"] = (self.cout,)
        return s

    def forward(self, P, x):
        return nn.linear_forward(x, P[f"{self.name}.weight"],
                                 P[f"{self.name}.bias"] if self.bias else None)

    def backward(self, P, dy, cache):
        dx, dW, db = nn.linear_backward(dy, cache)
        P.grads[f"{self.name}.weight"] += dW
        if self.bias:
            P.grads[f"{self.name}.bias"] += db
        return dx


class LayerNorm:
    def __init__(self, name, c):
        self.name, self.c = name, c

    def shapes(self):
        return {f"{self.name}.scale": (self.c,), f"{self.name}.shift": (self.c,)}

    def forward(self, P, x):
        return nn.layer_norm_forward(x, P[f"{self.name}.scale"], P[f"{self.name}.shift"])

    def backward(self, P, dy, cache):
        dx, ds, db = nn.layer_norm_backward(dy, cache)
        P.grads[f"{self.name}.scale"] += ds
        P.grads[f"{self.name}.shift"] += db
        return dx


class ConvBlock:
    """Sparse conv -> (layer norm) -> ReLU."""

    OFFSETS = {"submanifold": 27, "strided": 8, "transposed": 8}

    def __init__(self, name, cin, cout, mode, norm="layer"):
        self.name, self.cin, self.cout, self.mode = name, cin, cout, mode
        self.norm = LayerNorm(f"{name}.norm", cout) if norm == "layer" else None

    def shapes(self):
        s = {f"{self.name}.weight": (self.OFFSETS[self.mode], self.cin, self.cout)}
        if self.norm is None:
            s[f"{self.name}.bias"] = (self.cout,)
        else:
            s.update(self.norm.shapes())
        return s

    def forward(self, P, x, rb: Rulebook):
        b = P[f"{self.name}.bias"] if self.norm is None else None
        y = conv_forward(x, P[f"{self.name}.weight"], b, rb)
        cn = None
        if self.norm is not None:
            y, cn = self.norm.forward(P, y)
        y, mask = nn.relu_forward(y)
        return y, (x, rb, cn, mask)

    def backward(self, P, dy, cache):
        x, rb, cn, mask = cache
        dy = nn.relu_backward(dy, mask)
        if self.norm is not None:
            dy = self.norm.backward(P, dy, cn)
        dx, dw, db = conv_backward(dy, x, P[f"{self.name}.weight"], rb)
        P.grads[f"{self.name}.weight"] += dw
        if self.norm is None:
            P.grads[f"{self.name}.bias"] += db
        return dx


class GraphLayer:
    def __init__(self, name, variant, cq, ckv, d, key_dim=None):
        self.name, self.variant = name, variant
        self.cq, self.ckv, self.d, self.key_dim = cq, ckv, d, key_dim
        self.fwd, self.bwd = nn.GRAPH_OPS[variant]

    def shapes(self):
        return {f"{self.name}.{k}": v for k, v in
                nn.graph_param_shapes(self.variant, self.cq, self.ckv, self.d,
                                      self.key_dim).items()}

    def forward(self, P, fq, fkv, adj):
        return self.fwd(fq, fkv, adj, P.group(self.name))

    def backward(self, P, dy, cache):
        dfq, dfkv, grads = self.bwd(dy, cache)
        P.accumulate(self.name, grads)
        return dfq, dfkv


class IntraModule:
    """Two graph layers, each added back onto its input: h <- h + relu(norm(layer(h)))."""

    def __init__(self, name, variant, w, key_dim=None):
        self.layers = [GraphLayer(f"{name}.layer{k}", variant, w, w, w, key_dim) for k in (1, 2)]
        self.norms = [LayerNorm(f"{name}.norm{k}", w) for k in (1, 2)]

    def shapes(self):
        s = {}
        for layer, norm in zip(self.layers, self.norms):
            s.update(layer.shapes())
            s.update(norm.shapes())
        return s

    def forward(self, P, h, adj):
        caches = []
        for layer, norm in zip(self.layers, self.norms):
            a, ca = layer.forward(P, h, h, adj)
            z, cn = norm.forward(P, a)
            r, m = nn.relu_forward(z)
            h = h + r
            caches.append((ca, cn, m))
        return h, caches

    def backward(self, P, dh, caches):
        for layer, norm, (ca, cn, m) in zip(reversed(self.layers), reversed(self.norms),
                                            reversed(caches)):
            da = norm.backward(P, nn.relu_backward(dh, m), cn)
            dq, dkv = layer.backward(P, da, ca)
            dh = dh + dq + dkv
        return dh


class InterModule:
    """Inter-domain layer -> layer norm -> ReLU, concatenated with both inputs, merged to width w."""

    def __init__(self, name, variant, fusion, w, key_dim=None):
        self.fusion = fusion
        self.layer = GraphLayer(f"{name}.attn", variant, w, w, w, key_dim)
        self.norm = LayerNorm(f"{name}.norm", w)
        self.merge = Linear(f"{name}.merge", 3 * w, w)

    def shapes(self):
        s = self.layer.shapes()
        s.update(self.norm.shapes())
        s.update(self.merge.shapes())
        return s

    def forward(self, P, euc, geo, adj):
        fq, fkv = (euc, geo) if self.fusion == "primal" else (geo, euc)
        a, ca = self.layer.forward(P, fq, fkv, adj)
        n, cn = self.norm.forward(P, a)
        f, m = nn.relu_forward(n)
        cat = np.concatenate([f, euc, geo], axis=1)
        out, cm = self.merge.forward(P, cat)
        return out, (ca, cn, m, cm, euc.shape[1])

    def backward(self, P, dy, cache):
        ca, cn, m, cm, w = cache
        dcat = self.merge.backward(P, dy, cm)
        df, de, dg = dcat[:, :w], dcat[:, w:2 * w], dcat[:, 2 * w:]
        da = self.norm.backward(P, nn.relu_backward(df, m), cn)
        dq, dkv = self.layer.backward(P, da, ca)
        if self.fusion == "primal":
            return de + dq, dg + dkv
        return de + dkv, dg + dq


# ---------------------------------------------------------------------------
# model

class Model:
    """Parameters plus the wiring that binds levels to layers."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = nn.ParameterStore()
        c = config
        W = c.widths
        L = c.levels - 1
        norm = c.euclid_norm
        self.enc, self.down, self.up, self.dec = [], [], [], []
        self.geo = {}
        self.stem = self.pool_lin = None
        if c.branch != "geo_only":
            for lvl in range(c.levels):
                cin = c.in_channels if lvl == 0 else W[lvl]
                self.enc.append((ConvBlock(f"enc{lvl}.conv1", cin, W[lvl], "submanifold", norm),
                                 ConvBlock(f"enc{lvl}.conv2", W[lvl], W[lvl], "submanifold", norm)))
                if lvl < L:
                    self.down.append(ConvBlock(f"down{lvl}", W[lvl], W[lvl + 1], "strided", norm))
            for lvl in range(L - 1, -1, -1):
                self.up.insert(0, ConvBlock(f"up{lvl}", W[lvl + 1], W[lvl], "transposed", norm))
            for lvl in range(L):
                self.dec.append((ConvBlock(f"dec{lvl}.conv1", 2 * W[lvl], W[lvl], "submanifold", norm),
                                 ConvBlock(f"dec{lvl}.conv2", W[lvl], W[lvl], "submanifold", norm)))
            top = c.geo_depth - 1
            for lvl in range(top, -1, -1):
                mods = {"intra": IntraModule(f"geo{lvl}.intra", c.variant, W[lvl], c.key_dim)}
                if lvl < top:
                    mods["narrow"] = Linear(f"geo{lvl}.narrow", W[lvl + 1], W[lvl])
                    if c.branch == "full":
                        mods["inter"] = InterModule(f"geo{lvl}.inter", c.variant, c.fusion,
                                                    W[lvl], c.key_dim)
                    else:
                        mods["merge"] = Linear(f"geo{lvl}.merge", 2 * W[lvl], W[lvl])
                self.geo[lvl] = mods
        else:
            self.stem = Linear("stem", c.in_channels, W[0])
            self.pool_lin = [Linear(f"widen{lvl}", W[lvl], W[lvl + 1]) for lvl in range(L)]
            for lvl in range(c.levels):
                self.geo[lvl] = {"enc_intra": IntraModule(f"geoenc{lvl}.intra", c.variant, W[lvl],
                                                          c.key_dim)}
                if lvl < L:
                    self.geo[lvl]["narrow"] = Linear(f"geo{lvl}.narrow", W[lvl + 1], W[lvl])
                    self.geo[lvl]["merge"] = Linear(f"geo{lvl}.merge", 2 * W[lvl], W[lvl])
                    self.geo[lvl]["intra"] = IntraModule(f"geo{lvl}.intra", c.variant, W[lvl],
                                                         c.key_dim)
        self.classifier = Linear("classifier", W[0], c.num_classes)

    def layers(self):
        out = []
        if self.stem is not None:
            out.append(self.stem)
            out += self.pool_lin
        for pair in self.enc:
            out += list(pair)
        out += self.down + self.up
        for pair in self.dec:
            out += list(pair)
        for lvl in sorted(self.geo, reverse=True):
            out += list(self.geo[lvl].values())
        out.append(self.classifier)
        return out

    def param_shapes(self) -> dict:
        shapes = {}
        for layer in self.layers():
            for k, v in layer.shapes().items():
                if k in shapes:
                    raise ConfigError(f"parameter {k} bound twice")
                shapes[k] = v
        return shapes

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def attention_parameter_count(self) -> int:
        keys = ("rho.", "alpha.", "phi.", "psi.", "enc1.", "enc2.", "mlp.")
        return int(sum(v.size for k, v in self.store.params.items()
                       if k.startswith("geo") and any(t in k for t in keys)))


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Create a model with He-uniform weights drawn from ``seed`` and zero biases/shifts, unit scales."""
    model = Model(config)
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    for name, shape in model.param_shapes().items():
        if name.endswith(".weight"):
            value = nn.he_uniform(shape, rng, dt)
        elif name.endswith(".scale"):
            value = np.ones(shape, dtype=dt)
        else:
            value = np.zeros(shape, dtype=dt)
        model.store.add(name, value)
    return model


@dataclass
class ForwardState:
    caches: dict
    inputs: SceneInputs
    consumed: bool = False


def forward(model: Model, inputs: SceneInputs):
    """Run the network; returns ``(logits over M^0, state for backward)``."""
    c, P = model.config, model.store
    if len(inputs.projections) != c.levels:
        raise ConfigError(f"scene has {len(inputs.projections)} levels, model expects {c.levels}")
    for lvl in range(c.levels):
        if inputs.adjacency[lvl].num_vertices != inputs.vertex_counts[lvl]:
            raise ConfigError(f"level {lvl}: adjacency does not match mesh vertex count")
    caches = {}
    if c.branch == "geo_only":
        g = _geo_only_forward(model, inputs, caches)
    else:
        dec = _euclid_forward(model, inputs, caches)
        top = c.geo_depth - 1
        g = project_forward(dec[0], inputs.projections[0]) if top < 0 else None
        for lvl in range(top, -1, -1):
            mods = model.geo[lvl]
            e = project_forward(dec[lvl], inputs.projections[lvl])
            if e.shape[0] != inputs.vertex_counts[lvl]:
                raise ConfigError(f"level {lvl}: projected rows {e.shape[0]} != |M^{lvl}|")
            adj = inputs.adjacency[lvl]
            if lvl == top:
                h = e
            else:
                gc, cn = mods["narrow"].forward(P, g)
                gu = unpool(gc, inputs.traces[lvl])
                if "inter" in mods:
                    h, ci = mods["inter"].forward(P, e, gu, adj)
                else:
                    h, ci = mods["merge"].forward(P, np.concatenate([e, gu], axis=1))
                caches[("fuse", lvl)] = (cn, ci)
            h, cintra = mods["intra"].forward(P, h, adj)
            caches[("intra", lvl)] = cintra
            g = h
    logits, ccls = model.classifier.forward(P, g)
    caches["classifier"] = ccls
    return logits, ForwardState(caches, inputs)


def _euclid_forward(model, inputs, caches):
    c, P = model.config, model.store
    L = c.levels - 1
    x = inputs.input_features
    skips = []
    for lvl in range(c.levels):
        rb = inputs.submanifold[lvl]
        for k, blk in enumerate(model.enc[lvl]):
            x, caches[("enc", lvl, k)] = blk.forward(P, x, rb)
        skips.append(x)
        if lvl < L:
            x, caches[("down", lvl)] = model.down[lvl].forward(P, x, inputs.strided[lvl])
    dec = [None] * c.levels
    dec[L] = x
    for lvl in range(L - 1, -1, -1):
        x, caches[("up", lvl)] = model.up[lvl].forward(
            P, x, transposed_rulebook(inputs.strided[lvl]))
        x = np.concatenate([x, skips[lvl]], axis=1)
        for k, blk in enumerate(model.dec[lvl]):
            x, caches[("dec", lvl, k)] = blk.forward(P, x, inputs.submanifold[lvl])
        dec[lvl] = x
    return dec


def _geo_only_forward(model, inputs, caches):
    c, P = model.config, model.store
    L = c.levels - 1
    colors = project_forward(inputs.input_features, inputs.projections[0])
    x, caches["stem"] = model.stem.forward(P, colors)
    skips = []
    for lvl in range(c.levels):
        x, caches[("genc", lvl)] = model.geo[lvl]["enc_intra"].forward(P, x, inputs.adjacency[lvl])
        skips.append(x)
        if lvl < L:
            pooled = pool_mean(x, inputs.traces[lvl])
            y, cl = model.pool_lin[lvl].forward(P, pooled)
            x, m = nn.relu_forward(y)
            caches[("pool", lvl)] = (cl, m)
    for lvl in range(L - 1, -1, -1):
        mods = model.geo[lvl]
        gc, cn = mods["narrow"].forward(P, x)
        gu = unpool(gc, inputs.traces[lvl])
        h, cm = mods["merge"].forward(P, np.concatenate([gu, skips[lvl]], axis=1))
        x, ci = mods["intra"].forward(P, h, inputs.adjacency[lvl])
        caches[("gdec", lvl)] = (cn, cm, ci)
    return x


def backward(model: Model, state: ForwardState, dlogits: np.ndarray) -> None:
    """Accumulate parameter gradients into ``model.store.grads``."""
    if state is None or state.consumed:
        raise RuntimeError("backward needs the state of a forward pass that was not yet consumed")
    state.consumed = True
    c, P = model.config, model.store
    caches, inputs = state.caches, state.inputs
    dg = model.classifier.backward(P, dlogits, caches["classifier"])
    if c.branch == "geo_only":
        _geo_only_backward(model, inputs, caches, dg)
        return
    ddec = [None] * c.levels
    top = c.geo_depth - 1
    if top < 0:
        ddec[0] = project_backward(dg, inputs.projections[0])
    for lvl in range(0, top + 1):
        mods = model.geo[lvl]
        dh = mods["intra"].backward(P, dg, caches[("intra", lvl)])
        if lvl == top:
            de = dh
            dg = None
        else:
            cn, ci = caches[("fuse", lvl)]
            if "inter" in mods:
                de, dgu = mods["inter"].backward(P, dh, ci)
            else:
                dcat = mods["merge"].backward(P, dh, ci)
                w = c.widths[lvl]
                de, dgu = dcat[:, :w], dcat[:, w:]
            dgc = unpool_backward(dgu, inputs.traces[lvl])
            dg = mods["narrow"].backward(P, dgc, cn)
        ddec[lvl] = project_backward(de, inputs.projections[lvl])
    _euclid_backward(model, inputs, caches, ddec)


def _add(a, b):
    if a is None:
        return b
    return a if b is None else a + b


def _euclid_backward(model, inputs, caches, ddec):
    c, P = model.config, model.store
    L = c.levels - 1
    dskips = [None] * L
    # dec[l] feeds both its own projection and the upsampling into level l-1
    carry = None
    for lvl in range(L):
        d = _add(ddec[lvl], carry)
        for k in (1, 0):
            d = model.dec[lvl][k].backward(P, d, caches[("dec", lvl, k)])
        w = c.widths[lvl]
        dskips[lvl] = d[:, w:]
        carry = model.up[lvl].backward(P, d[:, :w], caches[("up", lvl)])
    dx = _add(ddec[L], carry)
    for lvl in range(L, -1, -1):
        if lvl < L:
            dx = model.down[lvl].backward(P, dx, caches[("down", lvl)]) + dskips[lvl]
        for k in (1, 0):
            dx = model.enc[lvl][k].backward(P, dx, caches[("enc", lvl, k)])


def _geo_only_backward(model, inputs, caches, dx):
    c, P = model.config, model.store
    L = c.levels - 1
    dskips = [None] * c.levels
    for lvl in range(0, L):
        mods = model.geo[lvl]
        cn, cm, ci = caches[("gdec", lvl)]
        dh = mods["intra"].backward(P, dx, ci)
        dcat = mods["merge"].backward(P, dh, cm)
        w = c.widths[lvl]
        dgu, dskips[lvl] = dcat[:, :w], dcat[:, w:]
        dx = mods["narrow"].backward(P, unpool_backward(dgu, inputs.traces[lvl]), cn)
    for lvl in range(L, -1, -1):
        if lvl < L:
            cl, m = caches[("pool", lvl)]
            dp = model.pool_lin[lvl].backward(P, nn.relu_backward(dx, m), cl)
            dx = pool_mean_backward(dp, inputs.traces[lvl]) + dskips[lvl]
        dx = model.geo[lvl]["enc_intra"].backward(P, dx, caches[("genc", lvl)])
    model.stem.backward(P, dx, caches["stem"])


# ---------------------------------------------------------------------------
# convenience

@dataclass
class Scene:
    """A labeled input mesh with its precomputed hierarchy and M^0 labels."""

    mesh: SurfaceMesh
    hierarchy: MeshHierarchy

    @property
    def labels0(self) -> np.ndarray:
        return self.hierarchy.levels[0].labels


def make_scene(mesh: SurfaceMesh, config: ModelConfig) -> Scene:
    return Scene(mesh, build_hierarchy(mesh, config.hierarchy_spec()))


def predict(model: Model, scene: Scene) -> np.ndarray:
    """Class per vertex of the input mesh (M^0 predictions projected through the base trace)."""
    inputs = prepare_inputs(scene.hierarchy, model.config)
    logits, _ = forward(model, inputs)
    pred0 = logits.argmax(axis=1)
    return pred0[scene.hierarchy.base_trace.fine_to_coarse]


def load_model(path) -> Model:
    tensors, meta = nn.read_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config, 0)
    check_compatible(model, tensors)
    for k in model.store:
        model.store.params[k] = tensors[k].astype(np.dtype(config.dtype))
    return model


class CompatibilityError(ValueError):
    pass


def check_compatible(model: Model, tensors: dict) -> None:
    diffs = []
    for k, v in model.store.params.items():
        if k not in tensors:
            diffs.append(f"missing {k} {v.shape}")
        elif tensors[k].shape != v.shape:
            diffs.append(f"{k}: checkpoint {tensors[k].shape} vs model {v.shape}")
    extra = [k for k in tensors if k not in model.store.params and not k.startswith("momentum::")]
    diffs += [f"unexpected {k}" for k in extra]
    if diffs:
        raise CompatibilityError("incompatible checkpoint:\n  " + "\n  ".join(diffs))


def save_model(model: Model, path, extra: dict | None = None) -> None:
    meta = {"config": json.loads(model.config.to_json())}
    if extra:
        meta.update(extra)
    model.store.save(path, meta)

