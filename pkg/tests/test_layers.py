import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padnet import tensor as T
from padnet.nn import Conv2d, DyConv2d, FeedForward, MoE, TemperaturePlan, temperature_at
from padnet.tensor import ShapeError, Tensor

from test_tensor import conv_loop


def fixed_attention(layer: DyConv2d, logits: np.ndarray):
    """Make the attention emit ``logits`` regardless of input."""
    att = layer.attention
    att.fc2.weight.data = np.zeros_like(att.fc2.weight.data)
    att.fc2.bias.data = np.asarray(logits, dtype=float)


def test_attention_single_kernel_is_one(rng):
    layer = DyConv2d(3, 4, 3, 1, rng, padding=1)
    pi = layer.attend(Tensor(rng.normal(size=(5, 3, 6, 6))), 1.0).data
    np.testing.assert_array_equal(pi, np.ones((5, 1)))


def test_attention_high_temperature_is_uniform(rng):
    layer = DyConv2d(3, 4, 3, 4, rng, padding=1)
    pi = layer.attend(Tensor(rng.normal(size=(5, 3, 6, 6))), 1e9).data
    assert np.max(np.abs(pi - 0.25)) <= 1e-6


def test_attention_two_logits(rng):
    layer = DyConv2d(2, 2, 3, 2, rng)
    fixed_attention(layer, [2.0, 0.0])
    pi = layer.attend(Tensor(rng.normal(size=(1, 2, 4, 4))), 1.0).data[0]
    np.testing.assert_allclose(pi, [0.8808, 0.1192], atol=1e-4)


def test_attention_rejects_bad_temperature_and_channels(rng):
    layer = DyConv2d(2, 2, 3, 2, rng)
    with pytest.raises(ValueError):
        layer.attend(Tensor(np.ones((1, 2, 4, 4))), 0.0)
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((1, 3, 4, 4))), 1.0)


def test_attention_hidden_width_default(rng):
    assert DyConv2d(32, 4, 3, 4, rng).attention.hidden == 8
    assert DyConv2d(4, 4, 3, 4, rng).attention.hidden == 4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_attention_sums_to_one(seed, tau):
    rng = np.random.default_rng(seed)
    layer = DyConv2d(3, 2, 3, 5, rng)
    pi = layer.attend(Tensor(rng.normal(size=(4, 3, 5, 5)) * 10), tau).data
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-9)


def test_dyconv_identical_kernels_equal_static(rng):
    layer = DyConv2d(2, 3, 3, 4, rng, padding=1)
    layer.kernels.data = np.repeat(layer.kernels.data[:1], 4, axis=0)
    layer.biases.data = np.repeat(rng.normal(size=(1, 3)), 4, axis=0)
    x = rng.normal(size=(3, 2, 5, 5))
    got = layer(Tensor(x), 1.0).data
    ref = conv_loop(x, layer.kernels.data[0], layer.biases.data[0], 1, 1)
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_dyconv_one_hot_attention_selects_kernel(rng):
    layer = DyConv2d(2, 3, 3, 3, rng, padding=1)
    fixed_attention(layer, [0.0, 1e4, 0.0])
    x = rng.normal(size=(2, 2, 5, 5))
    got = layer(Tensor(x), 1.0).data
    ref = conv_loop(x, layer.kernels.data[1], layer.biases.data[1], 1, 1)
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_dyconv_matches_per_sample_loop_oracle(rng):
    layer = DyConv2d(2, 3, 3, 2, rng, stride=2, padding=1)
    layer.biases.data = rng.normal(size=layer.biases.shape)
    x = rng.normal(size=(4, 2, 5, 5))
    got = layer(Tensor(x), 1.3).data
    pi = layer.attend(Tensor(x), 1.3).data
    for n in range(4):
        kernel = np.tensordot(pi[n], layer.kernels.data, axes=1)
        bias = pi[n] @ layer.biases.data
        ref = conv_loop(x[n:n + 1], kernel, bias, 2, 1)
        assert np.max(np.abs(got[n:n + 1] - ref)) <= 1e-10


def test_dyconv_k1_equals_static_conv(rng):
    dy = DyConv2d(2, 3, 3, 1, np.random.default_rng(0), padding=1)
    st_ = Conv2d(2, 3, 3, np.random.default_rng(1), padding=1)
    st_.weight.data = dy.kernels.data[0].copy()
    st_.bias.data = dy.biases.data[0].copy()
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    np.testing.assert_array_equal(dy(x, 7.0).data, st_(x).data)


def test_temperature_plan():
    plan = TemperaturePlan(30, 1, 10)
    assert temperature_at(plan, 0) == 30
    assert temperature_at(plan, 5) == 15.5
    assert temperature_at(plan, 10) == 1 and temperature_at(plan, 99) == 1
    taus = [plan.at(e) for e in range(12)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))


# -- mixture of experts ---------------------------------------------------------

def gate_logits(moe: MoE, logits):
    """Gate producing ``logits`` for the input ``e_0`` (first basis vector)."""
    moe.gate.data = np.zeros_like(moe.gate.data)
    moe.gate.data[0] = logits
    x = np.zeros((1, moe.dim))
    x[0, 0] = 1.0
    return Tensor(x)


def test_moe_rejects_n_not_below_m(rng):
    with pytest.raises(ValueError):
        MoE(4, 3, 2, 2, rng)


def test_moe_top1_of_two(rng):
    moe = MoE(3, 2, 2, 1, rng)
    x = gate_logits(moe, [0.3, 1.2])
    r = moe.route(x)
    assert r.indices.tolist() == [[1]]
    np.testing.assert_array_equal(r.weights.data, [[1.0]])


def test_moe_ties_go_to_lowest_index(rng):
    moe = MoE(3, 2, 8, 2, rng)
    r = moe.route(gate_logits(moe, np.zeros(8)))
    assert r.indices.tolist() == [[0, 1]]
    np.testing.assert_allclose(r.weights.data, [[0.5, 0.5]], atol=1e-12)


def test_moe_renormalised_pair(rng):
    moe = MoE(3, 2, 8, 2, rng)
    r = moe.route(gate_logits(moe, [3, 1, 0, 0, 0, 0, 0, 0]))
    assert r.indices.tolist() == [[0, 1]]
    np.testing.assert_allclose(r.weights.data, [[0.8808, 0.1192]], atol=1e-4)


def test_moe_identical_experts_equal_single_expert(rng):
    moe = MoE(4, 5, 6, 2, rng, init="shared")
    x = Tensor(rng.normal(size=(7, 4)))
    ff = FeedForward(4, 5, rng)
    ff.w1.data, ff.w2.data = moe.w1.data[0].copy(), moe.w2.data[0].copy()
    ff.b1.data, ff.b2.data = moe.b1.data[0].copy(), moe.b2.data[0].copy()
    np.testing.assert_allclose(moe(x).data, ff(x).data, atol=1e-12)


def test_moe_top1_is_argmax_expert(rng):
    moe = MoE(4, 5, 3, 1, rng, init="independent")
    x = Tensor(rng.normal(size=(6, 4)))
    out = moe(x).data
    best = (x.data @ moe.gate.data).argmax(axis=1)
    for t in range(6):
        e = best[t]
        h = np.maximum(x.data[t] @ moe.w1.data[e] + moe.b1.data[e], 0)
        np.testing.assert_allclose(out[t], h @ moe.w2.data[e] + moe.b2.data[e], atol=1e-12)


def test_moe_hand_computed_two_of_two():
    rng = np.random.default_rng(0)
    moe = MoE(2, 1, 3, 2, rng, init="independent")
    # reduce to two live experts by giving the third a hopeless gate score
    moe.gate.data = np.array([[0.0, 0.0, -1e9], [0.0, np.log(3.0), -1e9]])
    moe.w1.data = np.array([[[1.0], [0.0]], [[0.0], [1.0]], [[0.0], [0.0]]])
    moe.w2.data = np.array([[[2.0, 0.0]], [[0.0, 3.0]], [[0.0, 0.0]]])
    moe.b1.data[:] = 0
    moe.b2.data[:] = 0
    x = Tensor(np.array([[1.0, 1.0]]))
    # gate weights 1/4, 3/4; expert0 -> [2, 0], expert1 -> [0, 3]
    np.testing.assert_allclose(moe(x).data, [[0.5, 2.25]], atol=1e-12)


def test_moe_single_token_vector(rng):
    moe = MoE(4, 3, 4, 2, rng)
    x = rng.normal(size=4)
    np.testing.assert_array_equal(moe(Tensor(x)).data, moe(Tensor(x[None])).data[0])


def test_moe_permutation_consistency(rng):
    moe = MoE(4, 3, 5, 2, rng, init="independent")
    x = Tensor(rng.normal(size=(8, 4)))
    before = moe(x).data
    perm = np.array([3, 0, 4, 1, 2])
    for name in ("w1", "b1", "w2", "b2"):
        getattr(moe, name).data = getattr(moe, name).data[perm]
    moe.gate.data = moe.gate.data[:, perm]
    np.testing.assert_allclose(moe(x).data, before, atol=1e-12)


def test_moe_gradients_match_finite_differences(rng):
    from test_tensor import check_grads
    moe = MoE(3, 2, 4, 2, rng, init="independent")
    x = rng.normal(size=(5, 3))
    labels = np.array([0, 1, 2, 0, 1])

    def build(w1, w2, gate):
        moe.w1, moe.w2, moe.gate = w1, w2, gate
        return T.cross_entropy(moe(Tensor(x)), labels)

    check_grads(build, moe.w1.data.copy(), moe.w2.data.copy(), moe.gate.data.copy())
