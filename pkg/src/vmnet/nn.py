"""Differentiable building blocks with explicit forward/backward passes.

Every op is a pair ``*_forward(...) -> (out, cache)`` / ``*_backward(dout, cache)``.
Graph operators take a query-side feature matrix ``fq`` and a key/value-side
matrix ``fkv`` over the same vertices plus a CSR :class:`~vmnet.mesh.Adjacency`;
intra-domain layers pass the same matrix twice.
"""

from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Adjacency


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dense ops

def linear_forward(x, W, b=None):
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {W.shape}")
    y = x @ W
    if b is not None:
        y = y + b
    return y, (x, W, b is not None)


def linear_backward(dy, cache):
    x, W, has_b = cache
    return dy @ W.T, x.T @ dy, (dy.sum(axis=0) if has_b else None)


def layer_norm_forward(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layer_norm_backward(dy, cache):
    xhat, inv, scale = cache
    dxhat = dy * scale
    c = xhat.shape[1]
    dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def softmax_cross_entropy(logits, labels, ignore_label=-100):
    """Mean cross entropy over rows whose label is not ``ignore_label``.

    Returns ``(loss, dlogits)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise ValueError("softmax_cross_entropy: every row is ignored")
    k = logits.shape[1]
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal the ignore label")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.flatnonzero(valid)
    loss = -logp[rows, labels[rows]].sum() / n
    grad = np.exp(logp)
    grad[rows, labels[rows]] -= 1.0
    grad[~valid] = 0.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# neighborhood helpers

def _segment_starts(adj: Adjacency):
    nonempty = np.flatnonzero(np.diff(adj.indptr) > 0)
    return nonempty, adj.indptr[nonempty]


def segment_softmax(logits: np.ndarray, adj: Adjacency) -> np.ndarray:
    """Softmax of per-edge logits over each center's neighborhood.

    ``logits`` is (E,) or (E, C); softmax runs per channel.
    """
    if len(logits) == 0:
        return logits.copy()
    rows, starts = _segment_starts(adj)
    mx = np.maximum.reduceat(logits, starts, axis=0)
    full = np.zeros((adj.num_vertices,) + logits.shape[1:], dtype=logits.dtype)
    full[rows] = mx
    c = adj.centers
    ex = np.exp(logits - full[c])
    den = np.zeros_like(full)
    den[rows] = np.add.reduceat(ex, starts, axis=0)
    return ex / den[c]


def _gather_matrix(adj: Adjacency, data, n_cols):
    """CSR matrix with row i holding ``data`` at columns N_i."""
    return sp.csr_matrix((data, adj.indices, adj.indptr), shape=(adj.num_vertices, n_cols))


def _edge_sum(adj: Adjacency, per_edge: np.ndarray) -> np.ndarray:
    """Sum (E, C) per-edge rows into their centers."""
    out = np.zeros((adj.num_vertices,) + per_edge.shape[1:], dtype=per_edge.dtype)
    if len(per_edge):
        rows, starts = _segment_starts(adj)
        out[rows] = np.add.reduceat(per_edge, starts, axis=0)
    return out


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Deterministic scatter-add of rows of ``values`` into ``n`` rows at ``index``."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(values.dtype)
    m = sp.csr_matrix((np.ones(len(index), dtype=values.dtype), (index, np.arange(len(index)))),
                      shape=(n, len(index)))
    return np.asarray(m @ values)


def _check_graph(fq, fkv, adj):
    if fq.shape[0] != adj.num_vertices or fkv.shape[0] != adj.num_vertices:
        raise ShapeError(
            f"feature rows ({fq.shape[0]}, {fkv.shape[0]}) do not match vertex count "
            f"{adj.num_vertices}")


def _transform(name, x, p):
    return linear_forward(x, p[f"{name}.weight"], p.get(f"{name}.bias"))


def _transform_back(name, dy, cache, grads):
    dx, dW, db = linear_backward(dy, cache)
    grads[f"{name}.weight"] = grads.get(f"{name}.weight", 0) + dW
    if db is not None:
        grads[f"{name}.bias"] = grads.get(f"{name}.bias", 0) + db
    return dx


# ---------------------------------------------------------------------------
# scalar attention (intra: fq is fkv; inter: queries from one domain, keys/values from the other)

def attention_forward(fq, fkv, adj: Adjacency, p: dict):
    """out_i = rho(fq_i) + sum_j w_ij alpha(fkv_j), w = softmax_j(phi(fq_i).psi(fkv_j)/sqrt(d))."""
    _check_graph(fq, fkv, adj)
    R, cr = _transform("rho", fq, p)
    Q, cq = _transform("phi", fq, p)
    K, ck = _transform("psi", fkv, p)
    V, cv = _transform("alpha", fkv, p)
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"query width {Q.shape[1]} != key width {K.shape[1]}")
    scale = 1.0 / np.sqrt(K.shape[1])
    c, j = adj.centers, adj.indices
    e = np.einsum("ij,ij->i", Q[c], K[j]) * scale
    w = segment_softmax(e, adj)
    out = R + _gather_matrix(adj, w, V.shape[0]) @ V
    return out, (adj, Q, K, V, w, scale, cr, cq, ck, cv)


def attention_backward(dout, cache):
    adj, Q, K, V, w, scale, cr, cq, ck, cv = cache
    c, j = adj.centers, adj.indices
    grads = {}
    A = _gather_matrix(adj, w, V.shape[0])
    dV = np.asarray(A.T @ dout)
    dw = np.einsum("ij,ij->i", dout[c], V[j])
    s = np.bincount(c, weights=w * dw, minlength=adj.num_vertices)
    de = (w * (dw - s[c]) * scale).astype(Q.dtype)
    B = _gather_matrix(adj, de, K.shape[0])
    dQ = np.asarray(B @ K)
    dK = np.asarray(B.T @ Q)
    dfq = _transform_back("rho", dout, cr, grads) + _transform_back("phi", dQ, cq, grads)
    dfkv = _transform_back("alpha", dV, cv, grads) + _transform_back("psi", dK, ck, grads)
    return dfq, dfkv, grads


def attention_weights(fq, fkv, adj, p):
    """Per-edge attention coefficients (aligned with ``adj.indices``)."""
    return attention_forward(fq, fkv, adj, p)[1][4]


# ---------------------------------------------------------------------------
# vector attention

def vector_attention_forward(fq, fkv, adj: Adjacency, p: dict):
    """Channelwise weights from an MLP of phi(fq_i) - psi(fkv_j), softmax per channel over N_i."""
    _check_graph(fq, fkv, adj)
    R, cr = _transform("rho", fq, p)
    Q, cq = _transform("phi", fq, p)
    K, ck = _transform("psi", fkv, p)
    V, cv = _transform("alpha", fkv, p)
    c, j = adj.centers, adj.indices
    rel = Q[c] - K[j]
    pre, c1 = _transform("enc1", rel, p)
    h, m1 = relu_forward(pre)
    logits, c2 = _transform("enc2", h, p)
    if logits.shape[1] != V.shape[1]:
        raise ShapeError("weight-encoding width must equal the value width")
    w = segment_softmax(logits, adj)
    out = R + _edge_sum(adj, w * V[j])
    return out, (adj, V, w, cr, cq, ck, cv, c1, m1, c2)


def vector_attention_backward(dout, cache):
    adj, V, w, cr, cq, ck, cv, c1, m1, c2 = cache
    c, j = adj.centers, adj.indices
    grads = {}
    dc = dout[c]
    dV = _scatter_rows(j, dc * w, V.shape[0])
    dw = dc * V[j]
    s = _edge_sum(adj, w * dw)
    dlogits = w * (dw - s[c])
    dh = _transform_back("enc2", dlogits, c2, grads)
    drel = _transform_back("enc1", relu_backward(dh, m1), c1, grads)
    dQ = _edge_sum(adj, drel)
    dK = -_scatter_rows(j, drel, V.shape[0])
    dfq = _transform_back("rho", dout, cr, grads) + _transform_back("phi", dQ, cq, grads)
    dfkv = _transform_back("alpha", dV, cv, grads) + _transform_back("psi", dK, ck, grads)
    return dfq, dfkv, grads


# ---------------------------------------------------------------------------
# EdgeConv

def edgeconv_forward(fq, fkv, adj: Adjacency, p: dict):
    """out_i = max_j W [fq_i || fkv_j - fq_i] + b (elementwise max); empty ring uses [fq_i || 0]."""
    _check_graph(fq, fkv, adj)
    W = p["mlp.weight"]
    C = fq.shape[1]
    if fkv.shape[1] != C or W.shape[0] != 2 * C:
        raise ShapeError(f"edgeconv: widths {fq.shape[1]}, {fkv.shape[1]} vs weight {W.shape}")
    Wa, Wb = W[:C], W[C:]
    base = fq @ Wa + p["mlp.bias"]
    G = fkv @ Wb
    Fb = fq @ Wb
    out = base.copy()
    rows, starts = _segment_starts(adj)
    j = adj.indices
    E = len(j)
    arg = None
    if E:
        Gj = G[j]
        mx = np.maximum.reduceat(Gj, starts, axis=0)
        full = np.zeros_like(base)
        full[rows] = mx
        c = adj.centers
        eidx = np.where(Gj == full[c], np.arange(E)[:, None], E)
        arg = np.minimum.reduceat(eidx, starts, axis=0)
        out[rows] += mx - Fb[rows]
    return out, (adj, fq, fkv, Wa, Wb, rows, arg)


def edgeconv_backward(dout, cache):
    adj, fq, fkv, Wa, Wb, rows, arg = cache
    grads = {}
    dWa = fq.T @ dout
    dWb = np.zeros_like(Wb)
    dfq = dout @ Wa.T
    dfkv = np.zeros_like(fkv)
    if arg is not None:
        dsel = dout[rows]
        d = dout.shape[1]
        jstar = adj.indices[arg]
        dG = np.zeros((fkv.shape[0], d), dtype=dout.dtype)
        np.add.at(dG, (jstar.ravel(), np.tile(np.arange(d), len(rows))), dsel.ravel())
        dfkv = dG @ Wb.T
        dfq[rows] -= dsel @ Wb.T
        dWb = fkv.T @ dG - fq[rows].T @ dsel
    grads["mlp.weight"] = np.concatenate([dWa, dWb])
    grads["mlp.bias"] = dout.sum(axis=0)
    return dfq, dfkv, grads


GRAPH_OPS = {
    "scalar": (attention_forward, attention_backward),
    "vector": (vector_attention_forward, vector_attention_backward),
    "edgeconv": (edgeconv_forward, edgeconv_backward),
}


def graph_param_shapes(variant: str, c_q: int, c_kv: int, d: int, key_dim: int | None = None):
    """Parameter shapes for one graph layer."""
    k = key_dim or d
    if variant == "edgeconv":
        return {"mlp.weight": (2 * c_q, d), "mlp.bias": (d,)}
    shapes = {
        "rho.weight": (c_q, d), "rho.bias": (d,),
        "alpha.weight": (c_kv, d), "alpha.bias": (d,),
        "phi.weight": (c_q, k), "phi.bias": (k,),
        "psi.weight": (c_kv, k), "psi.bias": (k,),
    }
    if variant == "vector":
        shapes.update({"enc1.weight": (k, d), "enc1.bias": (d,),
                       "enc2.weight": (d, d), "enc2.bias": (d,)})
    elif variant != "scalar":
        raise ValueError(f"unknown graph operator {variant!r}")
    return shapes


def init_graph_params(variant, c_q, c_kv, d, rng, dtype=np.float64, key_dim=None):
    p = {}
    for name, shape in graph_param_shapes(variant, c_q, c_kv, d, key_dim).items():
        p[name] = he_uniform(shape, rng, dtype) if name.endswith("weight") else \
            np.zeros(shape, dtype=dtype)
    return p


def he_uniform(shape, rng, dtype=np.float64):
    fan_in = int(np.prod(shape[:-1]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# parameters and checkpoints

CHECKPOINT_MAGIC = b"VMNETCKP"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": 0, "float64": 1, "int64": 2}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Named weights with matching gradient and momentum buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def group(self, prefix: str) -> dict:
        """Parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def accumulate(self, prefix: str, grads: dict) -> None:
        for k, g in grads.items():
            self.grads[f"{prefix}.{k}"] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def state_bytes(self) -> bytes:
        return b"".join(v.tobytes() for v in self.params.values())

    def save(self, path, metadata: dict | None = None, include_momentum: bool = False) -> None:
        buf = io.BytesIO()
        tensors = list(self.params.items())
        if include_momentum:
            tensors += [(f"momentum::{k}", v) for k, v in self.momentum.items()]
        meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<III", CHECKPOINT_VERSION, len(tensors), len(meta)))
        buf.write(meta)
        for name, v in tensors:
            nb = name.encode("utf-8")
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BB", _DTYPES[v.dtype.name], v.ndim))
            buf.write(struct.pack(f"<{v.ndim}I", *v.shape))
            buf.write(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(tensors, metadata)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, count, mlen = struct.unpack_from("<III", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    meta = json.loads(data[off:off + mlen].decode("utf-8"))
    off += mlen
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPE_NAMES[code]).newbyteorder("<")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dt, size, off).reshape(shape).astype(dt.newbyteorder("="))
        off += size * dt.itemsize
    return tensors, meta


# ---------------------------------------------------------------------------
# gradient checking

GRAD_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    name: str
    errors: dict
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return (f"{self.name:<22s} max_rel_err={self.max_error:.3e} (worst: {worst}) "
                f"{'PASS' if self.passed else 'FAIL'}")


def gradcheck(name, forward, backward, inputs: dict, h=1e-4, tol=1e-4, seed=0,
              directions=3, skip=()) -> GradcheckReport:
    """Compare analytic backward against central-difference directional derivatives.

    ``forward(**inputs)`` returns ``(out, cache)``; ``backward(dout, cache)``
    returns a dict ``name -> gradient`` for the entries of ``inputs``.
    The scalar objective is ``sum(u * out)`` for a fixed random ``u``.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: (np.array(v, dtype=np.float64) if isinstance(v, np.ndarray) else v)
              for k, v in inputs.items()}
    out, cache = forward(**inputs)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: non-finite forward output")
    u = rng.standard_normal(out.shape)
    grads = backward(u, cache)
    errors = {}
    for key, x in inputs.items():
        if not isinstance(x, np.ndarray) or not np.issubdtype(x.dtype, np.floating) or key in skip:
            continue
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(x)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"{name}: non-finite gradient for {key}")
        worst = 0.0
        for _ in range(directions):
            v = rng.standard_normal(x.shape)
            plus = dict(inputs)
            minus = dict(inputs)
            plus[key] = x + h * v
            minus[key] = x - h * v
            num = (np.sum(u * forward(**plus)[0]) - np.sum(u * forward(**minus)[0])) / (2 * h)
            ana = float(np.sum(g * v))
            # gradients that vanish identically (e.g. softmax-invariant biases) are judged
            # against an absolute floor instead of their own magnitude
            denom = max(abs(num), abs(ana), GRAD_FLOOR)
            worst = max(worst, abs(num - ana) / denom)
        errors[key] = worst
    return GradcheckReport(name, errors, tol)
