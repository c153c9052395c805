import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmnet import nn
from vmnet.checks import OPS, random_graph, run_gradchecks
from vmnet.mesh import Adjacency


def _lin(p, name, x):
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def _softmax(z, axis=0):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _rings(adj):
    return [adj.ring(i).tolist() for i in range(adj.num_vertices)]


def dense_scalar(fq, fkv, adj, p):
    out = []
    for i, ring in enumerate(_rings(adj)):
        o = _lin(p, "rho", fq[i])
        if ring:
            q = _lin(p, "phi", fq[i])
            e = np.array([q @ _lin(p, "psi", fkv[j]) for j in ring]) / np.sqrt(len(q))
            w = _softmax(e)
            o = o + sum(wk * _lin(p, "alpha", fkv[j]) for wk, j in zip(w, ring))
        out.append(o)
    return np.array(out)


def dense_vector(fq, fkv, adj, p):
    out = []
    for i, ring in enumerate(_rings(adj)):
        o = _lin(p, "rho", fq[i])
        if ring:
            logits = []
            for j in ring:
                rel = _lin(p, "phi", fq[i]) - _lin(p, "psi", fkv[j])
                logits.append(_lin(p, "enc2", np.maximum(_lin(p, "enc1", rel), 0)))
            w = _softmax(np.array(logits), axis=0)
            o = o + sum(w[k] * _lin(p, "alpha", fkv[j]) for k, j in enumerate(ring))
        out.append(o)
    return np.array(out)


def dense_edgeconv(fq, fkv, adj, p):
    out = []
    for i, ring in enumerate(_rings(adj)):
        feats = [np.concatenate([fq[i], fkv[j] - fq[i]]) for j in ring] or \
            [np.concatenate([fq[i], np.zeros_like(fq[i])])]
        out.append(np.max([_lin(p, "mlp", f) for f in feats], axis=0))
    return np.array(out)


ORACLES = {"scalar": dense_scalar, "vector": dense_vector, "edgeconv": dense_edgeconv}


def _case(seed, variant, inter):
    rng = np.random.default_rng([seed, 11])
    adj = random_graph(rng, self_loops=bool(rng.integers(2)))
    n = adj.num_vertices
    cq = 4
    ckv = cq if (variant == "edgeconv" or not inter) else 6
    d = 5
    p = nn.init_graph_params(variant, cq, ckv, d, rng)
    p = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in p.items()}
    fq = rng.standard_normal((n, cq))
    fkv = rng.standard_normal((n, ckv)) if inter else fq
    return fq, fkv, adj, p


@pytest.mark.parametrize("variant,inter", [("scalar", False), ("scalar", True),
                                           ("vector", False), ("vector", True),
                                           ("edgeconv", False), ("edgeconv", True)])
def test_dense_oracle_agreement(variant, inter):
    fwd = nn.GRAPH_OPS[variant][0]
    worst = 0.0
    for seed in range(100):
        fq, fkv, adj, p = _case(seed, variant, inter)
        got, _ = fwd(fq, fkv, adj, p)
        worst = max(worst, np.abs(got - ORACLES[variant](fq, fkv, adj, p)).max())
    assert worst < 1e-6


def test_attention_weights_rows_sum_to_one():
    fq, fkv, adj, p = _case(3, "scalar", True)
    w = nn.attention_weights(fq, fkv, adj, p)
    sums = np.bincount(adj.centers, weights=w, minlength=adj.num_vertices)
    deg = np.diff(adj.indptr)
    np.testing.assert_allclose(sums[deg > 0], 1.0)
    assert np.all(w >= 0)


def test_uniform_features_give_uniform_weights():
    adj = Adjacency.from_edges(np.array([[0, 1], [0, 2], [0, 3]]), 4)
    rng = np.random.default_rng(0)
    p = nn.init_graph_params("scalar", 3, 3, 3, rng)
    f = np.tile(rng.normal(size=3), (4, 1))
    w = nn.attention_weights(f, f, adj, p)
    np.testing.assert_allclose(w[:3], 1 / 3)


def test_vector_singleton_ring_weights_are_one():
    adj = Adjacency.from_edges(np.array([[0, 1]]), 2)
    fq, _, _, p = _case(0, "vector", False)
    fq = fq[:2]
    out, cache = nn.vector_attention_forward(fq, fq, adj, p)
    np.testing.assert_allclose(cache[2], 1.0)


def test_edgeconv_equal_features_edge_term_zero():
    adj = Adjacency.from_edges(np.array([[0, 1], [1, 2]]), 3)
    rng = np.random.default_rng(1)
    p = nn.init_graph_params("edgeconv", 2, 2, 3, rng)
    f = np.tile(rng.normal(size=2), (3, 1))
    out, _ = nn.edgeconv_forward(f, f, adj, p)
    np.testing.assert_allclose(out, f @ p["mlp.weight"][:2] + p["mlp.bias"])


def test_graph_shape_errors():
    fq, fkv, adj, p = _case(0, "scalar", False)
    with pytest.raises(nn.ShapeError):
        nn.attention_forward(fq[:-1], fkv, adj, p)


# --- dense ops --------------------------------------------------------------

def test_relu_examples():
    y, _ = nn.relu_forward(np.array([-1.0, 2.0, 0.0]))
    assert y.tolist() == [0.0, 2.0, 0.0]


def test_softmax_ce_examples():
    loss, g = nn.softmax_cross_entropy(np.zeros((2, 4)), np.array([1, 3]))
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(g.sum(1), 0, atol=1e-15)
    loss, g = nn.softmax_cross_entropy(np.array([[0.0, 0], [5, -5]]), np.array([-100, 0]))
    assert loss == pytest.approx(np.log1p(np.exp(-10)))
    assert np.all(g[0] == 0)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((1, 2)), np.array([-100]))
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_layer_norm_normalizes():
    x = np.random.default_rng(0).normal(3, 5, (10, 8))
    y, _ = nn.layer_norm_forward(x, np.ones(8), np.zeros(8))
    np.testing.assert_allclose(y.mean(1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(1), 1, atol=1e-5)


def test_linear_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.linear_forward(np.zeros((2, 3)), np.zeros((4, 2)))


# --- gradient checks --------------------------------------------------------

@pytest.mark.parametrize("op", list(OPS))
def test_gradcheck_op(op):
    rows = run_gradchecks([op], seeds=(0, 1))
    for _, seed, rep, _ in rows:
        assert rep.passed, f"{op} seed {seed}: {rep}"


def test_gradcheck_negative_control():
    rows = run_gradchecks(["linear", "intra_attention"], seeds=(0,), corrupt="intra_attention")
    ok = {name: rep.passed for name, _, rep, _ in rows}
    assert ok == {"linear": True, "intra_attention": False}


def test_gradcheck_report_is_deterministic():
    a = run_gradchecks(["edgeconv"], seeds=(3,))[0][2]
    b = run_gradchecks(["edgeconv"], seeds=(3,))[0][2]
    assert a.errors == b.errors


def test_unknown_op():
    with pytest.raises(KeyError):
        run_gradchecks(["conv_dilated"])


# --- parameters and checkpoints ---------------------------------------------

def test_parameter_store_duplicate_name():
    s = nn.ParameterStore()
    s.add("a.weight", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("a.weight", np.zeros(2))


def test_group_and_accumulate():
    s = nn.ParameterStore()
    s.add("x.w", np.zeros(2))
    s.add("x.b", np.zeros(1))
    s.add("y.w", np.zeros(3))
    assert set(s.group("x")) == {"w", "b"}
    s.accumulate("x", {"w": np.ones(2)})
    s.accumulate("x", {"w": np.ones(2)})
    assert s.grads["x.w"].tolist() == [2, 2]
    s.zero_grad()
    assert s.grads["x.w"].tolist() == [0, 0]
    assert s.num_parameters() == 6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([np.float32, np.float64]))
def test_checkpoint_roundtrip(tmp_path_factory, seed, dtype):
    rng = np.random.default_rng(seed)
    s = nn.ParameterStore()
    for k in range(int(rng.integers(1, 5))):
        shape = tuple(rng.integers(1, 4, rng.integers(0, 4)))
        s.add(f"layer{k}.weight", rng.normal(size=shape).astype(dtype))
    s.momentum = {k: np.ones_like(v) for k, v in s.params.items()}
    path = tmp_path_factory.mktemp("ck") / "m.bin"
    s.save(path, {"epoch": 3}, include_momentum=True)
    tensors, meta = nn.read_checkpoint(path)
    assert meta == {"epoch": 3}
    for k, v in s.params.items():
        assert tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(tensors[k], v)
        np.testing.assert_array_equal(tensors[f"momentum::{k}"], 1)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOTACKPT" + bytes(12))
    with pytest.raises(nn.CheckpointError):
        nn.read_checkpoint(p)
