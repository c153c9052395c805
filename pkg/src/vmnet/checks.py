"""Registry of differentiable ops with random test inputs, for finite-difference gradient checks."""

from __future__ import annotations

import time

import numpy as np

from . import nn
from .hierarchy import TraceMap, pool_mean, pool_mean_backward, unpool, unpool_backward
from .mesh import Adjacency
from .voxel import (SparseVoxelGrid, conv_backward, conv_forward, projection_matrix,
                    project_backward, project_forward, strided_rulebook, submanifold_rulebook,
                    transposed_rulebook)


def random_graph(rng, n=None, p=0.35, self_loops=False) -> Adjacency:
    """Random undirected graph on <= 10 vertices; isolated vertices are allowed."""
    n = n or int(rng.integers(3, 11))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], 1)
    return Adjacency.from_edges(edges, n, self_loops)


def random_grid(rng, n=40, extent=5) -> SparseVoxelGrid:
    cells = np.stack(np.meshgrid(*[np.arange(extent)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pick = rng.choice(len(cells), size=min(n, len(cells)), replace=False)
    return SparseVoxelGrid.from_coords(cells[pick] - extent // 2, 1.0)


def random_trace(rng, fine, coarse) -> TraceMap:
    f2c = np.concatenate([np.arange(coarse), rng.integers(0, coarse, fine - coarse)])
    return TraceMap(rng.permutation(f2c), coarse)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.sign(x) * (gap + np.abs(x))


def _linear(rng):
    inputs = dict(x=rng.standard_normal((7, 5)), W=rng.standard_normal((5, 4)),
                  b=rng.standard_normal(4))

    def fwd(x, W, b):
        return nn.linear_forward(x, W, b)

    def bwd(dy, cache):
        dx, dW, db = nn.linear_backward(dy, cache)
        return dict(x=dx, W=dW, b=db)
    return fwd, bwd, inputs


def _layer_norm(rng):
    inputs = dict(x=rng.standard_normal((6, 5)), scale=rng.standard_normal(5),
                  shift=rng.standard_normal(5))

    def bwd(dy, cache):
        dx, ds, db = nn.layer_norm_backward(dy, cache)
        return dict(x=dx, scale=ds, shift=db)
    return nn.layer_norm_forward, bwd, inputs


def _relu(rng):
    def bwd(dy, mask):
        return dict(x=nn.relu_backward(dy, mask))
    return nn.relu_forward, bwd, dict(x=_away_from_zero(rng, (8, 4)))


def _softmax_ce(rng):
    labels = rng.integers(0, 4, 9)
    labels[0] = -100

    def fwd(logits):
        loss, grad = nn.softmax_cross_entropy(logits, labels)
        return np.array([loss]), grad

    def bwd(dy, grad):
        return dict(logits=dy[0] * grad)
    return fwd, bwd, dict(logits=3 * rng.standard_normal((9, 4)))


def _conv(mode):
    def build(rng):
        grid = random_grid(rng)
        if mode == "submanifold":
            rb = submanifold_rulebook(grid)
        elif mode == "strided":
            rb = strided_rulebook(grid)
        else:
            rb = transposed_rulebook(strided_rulebook(grid))
        inputs = dict(x=rng.standard_normal((rb.n_in, 3)),
                      W=rng.standard_normal((rb.num_offsets, 3, 2)), b=rng.standard_normal(2))

        def fwd(x, W, b):
            return conv_forward(x, W, b, rb), (x, W)

        def bwd(dy, cache):
            dx, dw, db = conv_backward(dy, *cache, rb)
            return dict(x=dx, W=dw, b=db)
        return fwd, bwd, inputs
    return build


def _projection(rng):
    grid = random_grid(rng, n=60)
    pos = rng.uniform(-2.0, 2.0, (15, 3))
    P = projection_matrix(grid, pos)

    def fwd(features):
        return project_forward(features, P), None

    def bwd(dy, _):
        return dict(features=project_backward(dy, P))
    return fwd, bwd, dict(features=rng.standard_normal((len(grid), 4)))


def _unpool(rng):
    tr = random_trace(rng, 12, 5)

    def fwd(coarse):
        return unpool(coarse, tr), None

    def bwd(dy, _):
        return dict(coarse=unpool_backward(dy, tr))
    return fwd, bwd, dict(coarse=rng.standard_normal((5, 3)))


def _pool_mean(rng):
    tr = random_trace(rng, 12, 5)

    def fwd(fine):
        return pool_mean(fine, tr), None

    def bwd(dy, _):
        return dict(fine=pool_mean_backward(dy, tr))
    return fwd, bwd, dict(fine=rng.standard_normal((12, 3)))


def _graph(variant, cq, ckv, d, shared=False):
    def build(rng):
        adj = random_graph(rng, n=8, p=0.4)
        n = adj.num_vertices
        params = nn.init_graph_params(variant, cq, ckv, d, rng)
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
        fq = rng.standard_normal((n, cq))
        inputs = dict(fq=fq, **params)
        if not shared:
            inputs["fkv"] = rng.standard_normal((n, ckv))
        fwd_op, bwd_op = nn.GRAPH_OPS[variant]

        def fwd(fq, fkv=None, **p):
            return fwd_op(fq, fq if shared else fkv, adj, p)

        def bwd(dy, cache):
            dfq, dfkv, grads = bwd_op(dy, cache)
            out = dict(grads)
            out["fq"] = dfq + dfkv if shared else dfq
            if not shared:
                out["fkv"] = dfkv
            return out
        return fwd, bwd, inputs
    return build


OPS = {
    "linear": _linear,
    "layer_norm": _layer_norm,
    "relu": _relu,
    "softmax_ce": _softmax_ce,
    "conv_submanifold": _conv("submanifold"),
    "conv_strided": _conv("strided"),
    "conv_transposed": _conv("transposed"),
    "projection": _projection,
    "unpool": _unpool,
    "pool_mean": _pool_mean,
    "intra_attention": _graph("scalar", 5, 5, 5, shared=True),
    "inter_attention": _graph("scalar", 4, 6, 5),
    "vector_attention": _graph("vector", 4, 4, 4),
    "edgeconv": _graph("edgeconv", 4, 4, 3),
}


def run_gradchecks(names=None, seeds=(0, 1, 2, 3, 4), tol=1e-4, h=1e-4, corrupt=None):
    """Run finite-difference checks; returns a list of (op, seed, report, seconds).

    ``corrupt`` names an op whose analytic gradients get scaled by 1.1
    (a negative control that must fail).
    """
    names = list(OPS) if names is None else list(names)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    rows = []
    for name in names:
        for seed in seeds:
            rng = np.random.default_rng([seed, 7])
            fwd, bwd, inputs = OPS[name](rng)
            if name == corrupt:
                bwd = _corrupted(bwd)
            t0 = time.perf_counter()
            rep = nn.gradcheck(name, fwd, bwd, inputs, h=h, tol=tol, seed=seed)
            rows.append((name, seed, rep, time.perf_counter() - t0))
    return rows


def _corrupted(bwd):
    def wrapped(dy, cache):
        return {k: 1.1 * v for k, v in bwd(dy, cache).items()}
    return wrapped


def format_report(rows) -> str:
    lines = [f"{'op':<18} {'seed':>4} {'max rel err':>12}  status"]
    for name, seed, rep, _ in rows:
        lines.append(f"{name:<18} {seed:>4} {rep.max_error:12.3e}  "
                     f"{'ok' if rep.passed else 'FAIL'}")
    return "\n".join(lines)
