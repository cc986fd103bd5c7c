import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ehtune import numcore as nc
from ehtune.backbone import BackboneConfig, build_backbone
from ehtune.errors import ContractError, OutOfRangeError, ShapeError
from ehtune.numcore import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_add_broadcast_gradient_sums_over_broadcast_axes(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    (a + b).sum().backward()
    assert np.array_equal(a.grad, np.ones((3, 4)))
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_matmul_gradient_by_hand(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 3, 5)
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 5)) @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 5)), rtol=1e-6)


def test_reused_node_accumulates(rng):
    x = leaf(rng, 5)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-6)


def test_backward_needs_scalar(rng):
    with pytest.raises(ContractError):
        leaf(rng, 3).backward()


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 81)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    with nc.precision(np.float64):
        out = nc.gelu(Tensor(x)).data
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert nc.GELU_CUBIC == 0.044715


def test_softmax_rows_sum_to_one_and_survive_large_logits():
    z = Tensor([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
    p = nc.softmax_rows(z).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0], atol=1e-7)


def test_layer_norm_constant_row_gives_bias():
    x = Tensor(np.full((2, 6), 3.7))
    gain, bias = Tensor(np.full(6, 2.0)), Tensor(np.arange(6.0))
    out = nc.layer_norm(x, gain, bias).data
    assert np.array_equal(out, np.broadcast_to(np.arange(6.0, dtype=np.float32), (2, 6)))


def test_layer_norm_output_is_standardised(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    out = nc.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-3)


def test_layer_norm_rejects_wrong_gain():
    with pytest.raises(ShapeError):
        nc.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_cross_entropy_uniform_logits_is_log_classes():
    loss = nc.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), rel=1e-6)


def test_cross_entropy_label_range():
    with pytest.raises(OutOfRangeError):
        nc.cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    z = leaf(rng, 4, 3)
    y = np.array([0, 2, 1, 1])
    nc.cross_entropy(z, y).backward()
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(z.grad, p / 4, atol=1e-7)


def test_mse_loss_hand_value():
    assert nc.mse_loss(Tensor([[1.0], [3.0]]), [0.0, 1.0]).item() == pytest.approx(2.5)


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: (a * b + a).sum(),
        lambda a, b: (a @ b.transpose()).mean(),
        lambda a, b: nc.tanh(a - b).sum(),
        lambda a, b: nc.gelu(a * 3.0).sum(),
        lambda a, b: (nc.softmax_rows(a) * b).sum(),
        lambda a, b: nc.concat([a, b], axis=0)[1:3].sum(),
        lambda a, b: (nc.layer_norm(a, b[0], b[1]) * a).sum(),
        lambda a, b: nc.cross_entropy(a @ b.transpose(), [0, 1, 2]),
        lambda a, b: (nc.broadcast_to(a[0:1], (4, 4)) * b[0]).sum(),
        lambda a, b: a.reshape(2, 6).transpose().sum(axis=0).mean(),
    ],
    ids=["mul-add", "matmul", "tanh", "gelu", "softmax", "concat-slice", "layer-norm", "xent", "broadcast", "reshape"],
)
def test_grad_check_primitive(op, rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    report = nc.grad_check(lambda: op(a, b), {"a": a, "b": b})
    assert report.passed, report.errors


def test_embedding_gradient_scatters_repeated_ids(rng):
    w = leaf(rng, 5, 3)
    nc.embedding(w, np.array([[0, 2, 0]])).sum().backward()
    expected = np.zeros((5, 3))
    expected[0] = 2
    expected[2] = 1
    assert np.array_equal(w.grad, expected)


def test_grad_check_negative_control(monkeypatch, rng):
    """A wrong GELU derivative must be caught by the finite-difference check."""
    x = leaf(rng, 4, 4)
    fn = lambda: nc.gelu(x).sum()
    assert nc.grad_check(fn, [x]).passed
    monkeypatch.setattr(nc, "_gelu_derivative", lambda x, t: 0.5 * (1.0 + t))
    report = nc.grad_check(fn, [x])
    assert not report.passed
    assert report.max_error > 1e-2


def test_grad_check_floor_covers_structurally_zero_gradients(rng):
    """A shift added to every score of a softmax row has zero true gradient."""
    x, b = leaf(rng, 3, 4), leaf(rng, 1)
    w = nc.Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    fn = lambda: (nc.softmax_rows(x + b) * w).sum()
    report = nc.grad_check(fn, {"x": x, "b": b})
    assert report.passed and report.errors["b"] < 1e-3
    # without the floor the check compares rounding noise with rounding noise
    assert nc.grad_check(fn, {"x": x, "b": b}, floor=0.0).errors["b"] > 1e-3


def test_grad_check_restores_parameters(rng):
    x = leaf(rng, 3)
    before = x.data.copy()
    nc.grad_check(lambda: (x * x).sum(), [x])
    assert np.array_equal(x.data, before)
    assert x.data.dtype == np.float32


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_single_head_attention_matches_straight_line_oracle():
    """1 layer, 1 head, d=4, two tokens, computed without the library."""
    cfg = BackboneConfig(vocab_size=8, max_seq_len=2, d_model=4, n_heads=1, n_layers=1, d_ff=8)
    bb = build_backbone(cfg, seed=3)
    rng = np.random.default_rng(7)
    for t in bb.params.values():  # non-trivial biases and gains
        t.data = (t.data + rng.normal(0, 0.1, size=t.shape)).astype(np.float32)
    P = {k: v.data.astype(np.float64) for k, v in bb.params.items()}
    tokens = np.array([[1, 5]])

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    x = P["embed.token.weight"][tokens[0]] + P["embed.position.weight"][:2]
    x = ln(x, P["embed.norm.weight"], P["embed.norm.bias"])
    q = x @ P["layer.0.attn.q.weight"] + P["layer.0.attn.q.bias"]
    k = x @ P["layer.0.attn.k.weight"] + P["layer.0.attn.k.bias"]
    v = x @ P["layer.0.attn.v.weight"] + P["layer.0.attn.v.bias"]
    s = q @ k.T / 2.0
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    o = (a @ v) @ P["layer.0.attn.o.weight"] + P["layer.0.attn.o.bias"]
    x = ln(x + o, P["layer.0.norm1.weight"], P["layer.0.norm1.bias"])
    f = gelu(x @ P["layer.0.ffn.in.weight"] + P["layer.0.ffn.in.bias"]) @ P["layer.0.ffn.out.weight"]
    x = ln(x + f + P["layer.0.ffn.out.bias"], P["layer.0.norm2.weight"], P["layer.0.norm2.bias"])

    with nc.precision(np.float64):
        for t in bb.params.values():
            t.data = t.data.astype(np.float64)
        got = bb.hidden_states(tokens).data[0]
    np.testing.assert_allclose(got, x, atol=1e-10)


finite = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-50, 50))


@settings(max_examples=50, deadline=None)
@given(finite, st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    p = nc.softmax_rows(Tensor(z)).data
    q = nc.softmax_rows(Tensor(z + c)).data
    np.testing.assert_allclose(p, q, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(finite)
def test_sum_then_backward_gives_ones(z):
    x = Tensor(z, requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones_like(x.data))
