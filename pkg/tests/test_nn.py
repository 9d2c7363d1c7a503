import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellsynth.nn import (
    GELU, Conv2d, Flatten, LayerNorm, LeakyReLU, Linear, MultiHeadAttention, NetParams,
    Sequential, Sigmoid, TransformerBlock, grad_check, layer_stack_backward, layer_stack_forward,
    load_params, multi_head_attention, optimizer_step, save_params, softmax,
)


def attn_params(d, heads, seed=0, identity=False):
    p = NetParams()
    mha = MultiHeadAttention("mha", d, heads)
    mha.init(p, np.random.default_rng(seed))
    if identity:
        for key in ("Wq", "Wk", "Wv", "Wo"):
            p.add(f"mha.{key}", np.eye(d))
    return p, mha


def test_uniform_keys_average_values():
    p, _ = attn_params(3, 1, identity=True)
    Q = np.array([[0.3, -0.2, 0.9], [1.0, 0.0, 0.5]])
    K = np.tile([[0.1, 0.4, -0.3]], (4, 1))
    V = np.random.default_rng(1).normal(size=(4, 3))
    out = multi_head_attention(Q, K, V, p, heads=1)
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (2, 1)), atol=1e-14)


def test_two_by_two_hand_computation():
    p, _ = attn_params(2, 1, identity=True)
    Q = np.array([[1.0, 0.0], [0.5, -1.0]])
    K = np.array([[0.2, 0.7], [-0.4, 1.1]])
    V = np.array([[1.0, 2.0], [-3.0, 0.5]])
    expected = np.zeros((2, 2))
    for i in range(2):
        s = [(Q[i, 0] * K[j, 0] + Q[i, 1] * K[j, 1]) / math.sqrt(2) for j in range(2)]
        w = [math.exp(x) for x in s]
        w = [x / sum(w) for x in w]
        expected[i] = w[0] * V[0] + w[1] * V[1]
    np.testing.assert_allclose(multi_head_attention(Q, K, V, p, heads=1), expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_permutation_symmetries(seed):
    rng = np.random.default_rng(seed)
    p, _ = attn_params(4, 2, seed)
    Q, K, V = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (5, 4))
    base = multi_head_attention(Q, K, V, p, 2)
    kv = rng.permutation(5)
    np.testing.assert_allclose(multi_head_attention(Q, K[kv], V[kv], p, 2), base, atol=1e-12)
    qp = rng.permutation(3)
    np.testing.assert_allclose(multi_head_attention(Q[qp], K, V, p, 2), base[qp], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(z):
    assert abs(softmax(np.array(z)).sum() - 1) < 1e-12


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        MultiHeadAttention("m", 5, 2)
    p, _ = attn_params(4, 2)
    with pytest.raises(ValueError):
        multi_head_attention(np.zeros((2, 4)), np.zeros((3, 4)), np.zeros((2, 4)), p, 2)


def test_zeroed_output_projections_give_identity():
    p = NetParams()
    blocks = [TransformerBlock(f"b{i}", 8, 2) for i in range(2)]
    rng = np.random.default_rng(0)
    for b in blocks:
        b.init(p, rng)
        p.add(f"{b.name}.attn.Wo", np.zeros((8, 8)))
        p.add(f"{b.name}.fc2.W", np.zeros_like(p[f"{b.name}.fc2.W"]))
        p.add(f"{b.name}.fc2.b", np.zeros(8))
    x = rng.normal(size=(5, 8))
    y, hidden, _ = layer_stack_forward(x, p, blocks)
    np.testing.assert_array_equal(y, x)
    assert len(hidden) == 2


def test_layer_norm_of_constant_token_is_zero():
    p = NetParams()
    ln = LayerNorm("ln", 6)
    ln.init(p, None)
    y, _ = ln.forward(p, np.full((1, 6), 3.7))
    np.testing.assert_allclose(y, 0, atol=1e-12)


def reference_block(x, w):
    """Straight-line re-implementation of one pre-norm block with 2 heads."""
    def ln(z, g, b):
        out = np.empty_like(z)
        for t in range(len(z)):
            mu = sum(z[t]) / len(z[t])
            var = sum((v - mu) ** 2 for v in z[t]) / len(z[t])
            out[t] = [(v - mu) / math.sqrt(var + 1e-5) for v in z[t]]
        return out * g + b

    h = ln(x, w["ln1.gamma"], w["ln1.beta"])
    heads = []
    for i in range(2):
        cols = slice(2 * i, 2 * i + 2)
        q, k, v = h @ w["attn.Wq"][:, cols], h @ w["attn.Wk"][:, cols], h @ w["attn.Wv"][:, cols]
        out = np.zeros((len(x), 2))
        for a in range(len(x)):
            s = [float(q[a] @ k[b]) / math.sqrt(2) for b in range(len(x))]
            m = max(s)
            e = [math.exp(t - m) for t in s]
            for b in range(len(x)):
                out[a] += e[b] / sum(e) * v[b]
        heads.append(out)
    x = x + np.hstack(heads) @ w["attn.Wo"]
    h = ln(x, w["ln2.gamma"], w["ln2.beta"])
    z = h @ w["fc1.W"] + w["fc1.b"]
    z = 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))
    return x + z @ w["fc2.W"] + w["fc2.b"]


def test_block_matches_reference_computation():
    rng = np.random.default_rng(3)
    p = NetParams()
    block = TransformerBlock("blk", 4, 2, d_ff=6)
    block.init(p, rng)
    p.add("blk.ln1.gamma", rng.uniform(0.5, 1.5, 4))
    p.add("blk.ln2.beta", rng.uniform(-0.2, 0.2, 4))
    x = rng.uniform(-1, 1, (2, 4))
    w = {n[len("blk."):]: v for n, v in p.values.items()}
    y, _, _ = layer_stack_forward(x, p, [block])
    np.testing.assert_allclose(y, reference_block(x, w), atol=1e-10)


def check_layer(layer, x_shape, seed=0, tol=1e-4, extra_inputs=False):
    rng = np.random.default_rng(seed)
    p = NetParams()
    layer.init(p, rng)
    p.add("x", rng.uniform(-1, 1, x_shape))
    r = rng.normal(size=layer.forward(p, p["x"])[0].shape)

    def loss(q):
        y, cache = layer.forward(q, q["x"])
        dx = layer.backward(q, r, cache)
        if isinstance(dx, tuple):
            dx = sum(dx)
        q.accumulate("x", dx)
        return float((y * r).sum())

    return grad_check(loss, p)


@pytest.mark.parametrize("layer,shape", [
    (Linear("lin", 4, 3), (5, 4)),
    (LeakyReLU(), (4, 6)),
    (GELU(), (3, 5)),
    (Sigmoid(), (3, 5)),
    (LayerNorm("ln", 6), (4, 6)),
    (MultiHeadAttention("mha", 6, 2), (4, 6)),
    (MultiHeadAttention("mha", 6, 3), (2, 4, 6)),
    (TransformerBlock("blk", 8, 4), (5, 8)),
    (Conv2d("conv", 3, 4, 3, stride=1, padding=1), (2, 6, 6, 3)),
    (Conv2d("conv", 4, 8, 4, stride=2, padding=1), (1, 8, 8, 4)),
    (Sequential([Conv2d("c", 2, 3, 4, 2, 1), LeakyReLU(), Flatten(), Linear("fc", 48, 1)]),
     (2, 8, 8, 2)),
])
def test_backward_matches_finite_differences(layer, shape):
    assert check_layer(layer, shape) < 1e-4


def test_layer_stack_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    p = NetParams()
    blocks = [TransformerBlock(f"b{i}", 8, 2) for i in range(2)]
    for b in blocks:
        b.init(p, rng)
    p.add("x", rng.uniform(-1, 1, (4, 8)))
    r = rng.normal(size=(4, 8))

    def loss(q):
        y, _, caches = layer_stack_forward(q["x"], q, blocks)
        q.accumulate("x", layer_stack_backward(r, q, blocks, caches))
        return float((y * r).sum())

    assert grad_check(loss, p, max_entries=10) < 1e-4


def test_grad_check_constant_function():
    p = NetParams()
    p.add("w", np.array([0.3, -0.7]))
    assert grad_check(lambda q: 4.2, p) == 0.0


def test_grad_check_linear_sum():
    p = NetParams()
    lin = Linear("lin", 3, 2, bias=False)
    lin.init(p, np.random.default_rng(0))
    x = np.array([0.5, -1.0, 2.0])

    def loss(q):
        y, cache = lin.forward(q, x[None])
        lin.backward(q, np.ones_like(y), cache)
        return float(y.sum())

    loss(p)
    np.testing.assert_allclose(p.grads["lin.W"], np.outer(x, np.ones(2)))
    assert grad_check(loss, p) < 1e-6


def test_grad_check_detects_wrong_gradient():
    p = NetParams()
    p.add("w", np.array([1.0, 2.0]))

    def loss(q):
        q.accumulate("w", q["w"])  # true gradient is 2w
        return float((q["w"] ** 2).sum())

    assert grad_check(loss, p) > 0.4


def test_rmsprop_hand_computation():
    p = NetParams()
    p.add("w", np.array([0.5]))
    p.grads["w"][:] = 1.0
    optimizer_step(p, lr=0.01)
    s = (1 - 0.99) * 1.0
    assert abs(p["w"][0] - (0.5 - 0.01 * 1.0 / (math.sqrt(s) + 1e-8))) < 1e-12
    p.grads["w"][:] = 1.0
    optimizer_step(p, lr=0.01)
    w1 = 0.5 - 0.01 / (math.sqrt(s) + 1e-8)
    s2 = 0.99 * s + 0.01
    assert abs(p["w"][0] - (w1 - 0.01 / (math.sqrt(s2) + 1e-8))) < 1e-12


def test_zero_gradient_leaves_parameter():
    p = NetParams()
    p.add("w", np.array([0.1, -0.2]))
    before = p["w"].copy()
    optimizer_step(p, lr=0.1)
    assert np.array_equal(p["w"], before)


def test_frozen_group_is_untouched():
    rng = np.random.default_rng(0)
    p = NetParams()
    Linear("a", 3, 3).init(p, rng, group="trunk")
    Linear("b", 3, 3).init(p, rng, group="decoder")
    p.freeze("decoder")
    frozen = {n: p[n].copy() for n in p.names("decoder")}
    for g in p.grads.values():
        g[...] = 1.0
    for kind in ("rmsprop", "sgd"):
        optimizer_step(p, lr=0.1, kind=kind)
    assert all(np.array_equal(p[n], v) for n, v in frozen.items())
    assert not np.array_equal(p["a.W"], frozen["b.W"])
    with pytest.raises(ValueError):
        Linear("b", 3, 3).init(p, rng, group="decoder")


def test_init_is_seeded_and_scaled():
    a, b = NetParams(), NetParams()
    Linear("l", 16, 4).init(a, np.random.default_rng(7))
    Linear("l", 16, 4).init(b, np.random.default_rng(7))
    assert np.array_equal(a["l.W"], b["l.W"])
    assert np.abs(a["l.W"]).max() <= 0.25


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = NetParams()
    TransformerBlock("blk", 8, 2).init(p, rng, group="enc")
    Linear("head", 8, 3).init(p, rng, group="dec")
    p.freeze("dec")
    path = tmp_path / "p.ckpt"
    save_params(path, p, meta={"step": 3})
    q, meta = load_params(path)
    assert meta == {"step": 3}
    assert list(q.values) == list(p.values)
    assert all(np.array_equal(q[n], p[n]) and q[n].tobytes() == p[n].tobytes() for n in p.values)
    assert q.frozen == {"dec"} and q.groups == p.groups


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_params(path)
