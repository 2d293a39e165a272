import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from padnet import tensor as T
from padnet.optim import SGD, LrSchedule, NonFiniteGradientError, OptimState, lr_at, sgd_step
from padnet.tensor import ShapeError, Tensor

from conftest import numeric_grad, rel_err


def check_grads(build, *arrays_, delta=1e-5, tol=1e-6):
    """``build(*tensors)`` -> scalar Tensor; compares autograd with central differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays_]
    build(*leaves).backward()
    for leaf in leaves:
        num = numeric_grad(lambda: float(build(*[Tensor(l.data) for l in leaves]).data), leaf.data, delta)
        assert rel_err(leaf.grad, num) <= tol


def test_identity_gradient_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x.backward(np.ones((3, 2)))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_matmul_cross_entropy_matches_finite_differences(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    labels = np.array([0, 3, 4])
    check_grads(lambda a, b: T.cross_entropy(a @ b, labels), x, w)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: T.sum_((a + b) * (a + b)), [(2, 3), (3,)]),
    ("sub", lambda a, b: T.sum_((a - b) * a), [(2, 3), (2, 1)]),
    ("mul", lambda a, b: T.sum_(a * b * b), [(2, 3), (2, 3)]),
    ("div", lambda a, b: T.sum_(a / (b * b + 1.0)), [(2, 3), (2, 3)]),
    ("scale", lambda a: T.sum_(T.scale(a, 2.5) * a), [(4,)]),
    ("relu", lambda a: T.sum_(T.relu(a) * a), [(3, 3)]),
    ("exp", lambda a: T.sum_(T.exp(a)), [(3,)]),
    ("log", lambda a: T.sum_(T.log(a * a + 1.0)), [(3,)]),
    ("sigmoid", lambda a: T.sum_(T.sigmoid(a) * a), [(5,)]),
    ("mean", lambda a: T.mean(a * a, axis=1).sum(), [(2, 4)]),
    ("reshape", lambda a: T.sum_(T.reshape(a, (3, 2)) @ T.reshape(a, (2, 3))), [(6,)]),
    ("transpose", lambda a: T.sum_(T.transpose(a, (1, 0)) * T.transpose(a, (1, 0))), [(2, 3)]),
    ("broadcast_to", lambda a: T.sum_(T.broadcast_to(a, (3, 4)) * T.broadcast_to(a, (3, 4))), [(1, 4)]),
    ("batched_matmul", lambda a, b: T.sum_(T.matmul(a, b) * T.matmul(a, b)), [(2, 3, 4), (4, 2)]),
    ("softmax_temp", lambda a: T.sum_(T.softmax(a, temperature=0.7) * T.softmax(a, temperature=0.7)), [(2, 4)]),
    ("log_softmax", lambda a: T.sum_(T.log_softmax(a) * a), [(2, 4)]),
    ("gap", lambda a: T.sum_(T.global_avg_pool(a) * T.global_avg_pool(a)), [(2, 3, 3, 3)]),
    ("concat", lambda a, b: T.sum_(T.concat([a, b], axis=1) * T.concat([b, a], axis=1)), [(2, 2), (2, 2)]),
    ("take", lambda a: T.sum_(T.take(a, np.array([2, 0, 2]), axis=1) * T.take(a, np.array([2, 0, 2]), axis=1)), [(2, 3)]),
])
def test_primitive_gradients(rng, name, build, shapes):
    check_grads(build, *[rng.normal(size=s) for s in shapes])


def test_conv2d_gradients(rng):
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    check_grads(lambda x_, w_, b_: T.sum_(T.conv2d(x_, w_, b_, stride=2, padding=1) *
                                          T.conv2d(x_, w_, b_, stride=2, padding=1)), x, w, b)


def test_per_sample_conv2d_gradients(rng):
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 3, 2, 3, 3)), rng.normal(size=(2, 3))
    check_grads(lambda x_, w_, b_: T.sum_(T.relu(T.conv2d(x_, w_, b_, padding=1)) * x_.sum()), x, w, b)


def test_gather_gradient_flows_to_selected_only(rng):
    a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    idx = T.topk_indices(a.data, 2)
    T.sum_(T.take_along_axis(a, idx, axis=-1)).backward()
    expect = np.zeros((2, 5))
    np.put_along_axis(expect, idx, 1.0, axis=-1)
    np.testing.assert_array_equal(a.grad, expect)
    check_grads(lambda t: T.sum_(T.take_along_axis(t, idx, axis=-1) * T.take_along_axis(t, idx, axis=-1)),
                a.data.copy())


def test_scatter_and_where_gradients(rng):
    idx = np.array([[1, 3], [0, 2]])
    check_grads(lambda v: T.sum_(T.scatter_along_axis(v, idx, 4) * np.arange(8.0).reshape(2, 4)),
                rng.normal(size=(2, 2)))
    cond = np.array([True, False, True])
    check_grads(lambda a, b: T.sum_(T.where(cond, a, b) * a), rng.normal(size=3), rng.normal(size=3))


def conv_loop(x, w, b, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    bsz, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for n in range(bsz):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_reference(rng, stride, padding):
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    assert np.max(np.abs(got - conv_loop(x, w, b, stride, padding))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)),
       st.floats(0.05, 100))
def test_softmax_rows_sum_to_one(logits, tau):
    p = T.softmax(Tensor(logits), axis=-1, temperature=tau).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_shape_errors_are_raised_before_execution():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


def test_backward_needs_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        (x * 2.0).backward()


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.ones(3)), temperature=0.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_float32_mode_round_trip():
    try:
        T.set_default_dtype(np.float32)
        assert Tensor([1.0, 2.0]).dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1.0]).dtype == np.float64


# -- optimiser and schedule -------------------------------------------------------

def _param(v, g):
    p = Tensor(np.array([v]), requires_grad=True)
    p.grad = np.array([g])
    return p


def test_sgd_plain_step():
    p = _param(0.0, 2.0)
    sgd_step({"p": p}, OptimState(lr=1.0), lr=1.0)
    assert p.data[0] == -2.0


def test_sgd_fixed_point_with_zero_grad():
    p = _param(0.7, 0.0)
    SGD({"p": p}, lr=0.1, momentum=0.9).step()
    assert p.data[0] == 0.7


def test_sgd_momentum_two_steps():
    p = _param(0.0, 1.0)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    opt.step()
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_weight_decay_is_coupled():
    p = _param(1.0, 0.0)
    SGD({"p": p}, lr=0.5, weight_decay=0.1).step()
    assert p.data[0] == pytest.approx(1.0 - 0.5 * 0.1)


def test_sgd_non_finite_gradient_aborts_whole_step():
    good, bad = _param(1.0, 1.0), _param(1.0, np.nan)
    with pytest.raises(NonFiniteGradientError, match="bad"):
        sgd_step({"good": good, "bad": bad}, OptimState(lr=0.1), 0.1)
    assert good.data[0] == 1.0 and bad.data[0] == 1.0


def test_velocity_buffers_only_with_momentum():
    p = _param(0.0, 1.0)
    opt = SGD({"p": p}, lr=0.1)
    opt.step()
    assert opt.state.velocity == {}


def test_lr_schedule_examples():
    s = LrSchedule(max_lr=0.1, warmup_steps=10, total_steps=110)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == 0.1
    assert lr_at(s, 60) == pytest.approx(0.05, abs=1e-15)
    assert abs(lr_at(s, 110)) <= 1e-12
    with pytest.raises(ValueError):
        lr_at(s, 111)
    with pytest.raises(ValueError):
        lr_at(s, -1)


@given(st.integers(0, 50), st.integers(1, 200))
def test_lr_schedule_bounds(warmup, extra):
    s = LrSchedule(0.3, warmup, warmup + extra)
    values = [lr_at(s, i) for i in range(s.total_steps + 1)]
    assert all(0.0 <= v <= 0.3 + 1e-15 for v in values)
    assert values[-1] == 0.0
