import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tonetts import autodiff as ad
from tonetts.autodiff import EmptyTape, InvalidProbability, NonScalarLoss, Tensor
from tonetts.errors import ShapeMismatch


def param(x):
    return Tensor(np.asarray(x, dtype=np.float64), trainable=True)


def test_hand_chain_rule():
    w = param([1.0])
    loss = ad.mse_loss(ad.mul(w, np.array([2.0])), np.array([0.0]))
    ad.backward(loss)
    assert w.grad[0] == pytest.approx(8.0)


def test_frozen_leaf_gets_no_grad():
    w, v = param([1.0, 2.0]), Tensor(np.array([3.0, 4.0]))
    ad.backward(ad.sum_(ad.mul(w, v)))
    assert v.grad is None
    np.testing.assert_allclose(w.grad, [3.0, 4.0])


def test_accumulation_doubles():
    w = param(np.arange(3.0))
    ad.backward(ad.sum_(ad.mul(w, w)))
    first = w.grad.copy()
    ad.backward(ad.sum_(ad.mul(w, w)))
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_shared_subexpression():
    x = param([1.5, -2.0])
    y = ad.mul(x, x)
    ad.backward(ad.sum_(ad.add(y, y)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_backward_errors():
    with pytest.raises(NonScalarLoss):
        ad.backward(param([1.0, 2.0]))
    with pytest.raises(EmptyTape):
        ad.backward(ad.sum_(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    w = param([1.0])
    with ad.no_grad():
        y = ad.mul(w, w)
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_per_thread():
    barrier = threading.Barrier(4)

    def work():
        with ad.no_grad():
            barrier.wait()
        barrier.wait()

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    w = param([1.0])
    assert ad.mul(w, w).requires_grad


def test_shape_mismatch_reports_shapes():
    with pytest.raises(ShapeMismatch) as info:
        ad.matmul(param(np.ones((2, 3))), param(np.ones((4, 2))))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_dropout_contract():
    x = Tensor(np.random.default_rng(0).standard_normal((50, 40)).astype(np.float32))
    assert ad.dropout(x, 0.5, training=False) is x
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(InvalidProbability):
            ad.dropout(x, p, True, np.random.default_rng(0))
    y = ad.dropout(x, 0.5, True, np.random.default_rng(1)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 2 * x.data[kept], rtol=1e-6)
    assert 0.4 < kept.mean() < 0.6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 16), elements=st.floats(-100, 100)))
def test_layer_norm_statistics(x):
    x = x + np.linspace(0, 1, 16)  # never a constant row
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.all(np.abs(y.mean(-1)) < 1e-5)
    var = y.var(-1)
    assert np.all(np.abs(var[x.std(-1) > 0.1] - 1) < 1e-3)


def test_conv1d_same_padding_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 6, 3)), rng.standard_normal((3, 3, 4)), rng.standard_normal(4)
    y = ad.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    pad = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    direct = np.stack([np.einsum("bkc,kcd->bd", pad[:, t:t + 3], w) for t in range(6)], axis=1) + b
    np.testing.assert_allclose(y, direct, rtol=1e-10)
    with pytest.raises(ShapeMismatch):
        ad.conv1d(Tensor(x), Tensor(rng.standard_normal((3, 5, 4))))


def test_float32_storage():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32


@pytest.mark.parametrize("f, x", [
    (lambda t: ad.mse_loss(ad.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))), np.zeros((3, 4))),
     np.random.default_rng(1).standard_normal((3, 4))),
    (lambda t: ad.sum_(ad.relu(t)), np.random.default_rng(2).random((3, 4)) + 0.1),
])
def test_grad_check_examples(f, x):
    assert ad.grad_check(f, [x], eps=1e-4) < 1e-4


def test_grad_check_constant_function():
    assert ad.grad_check(lambda t: ad.sum_(Tensor(np.ones(3))), [np.ones(2)]) == 0.0


def test_grad_check_restores_tensor():
    t = Tensor(np.ones(3, dtype=np.float32), trainable=False)
    ad.grad_check(lambda u: ad.sum_(ad.mul(u, u)), [t])
    assert t.dtype == np.float32 and not t.trainable and t.grad is None


def test_grad_check_detects_wrong_gradient():
    def broken(t):
        out = ad.sum_(ad.mul(t, t))
        # sever the graph and reattach with a wrong local derivative
        return ad._make(out.data, (t,), lambda g: (g * 3 * t.data,))
    assert ad.grad_check(broken, [np.array([1.0, 2.0])]) > 0.1


def test_set_trainable_and_freeze_map():
    ps = ad.ParameterSet()
    for n in ("enc.a", "enc.b", "dec.a"):
        ps.add(n, np.ones(2))
    assert ad.set_trainable(ps, "enc.*", False) == 2
    assert ad.set_trainable(ps, "nothing.*", False) == 0
    assert ps.freeze_map() == {"enc": False, "dec": True}
    loss = ad.sum_(ad.add(ad.mul(ps["enc.a"], ps["dec.a"]), ps["enc.b"]))
    ad.backward(loss)
    assert ps["enc.a"].grad is None and ps["enc.b"].grad is None
    assert ps["dec.a"].grad is not None
    ad.set_trainable(ps, "*", False)
    ad.set_trainable(ps, lambda n: True, True)
    assert all(t.trainable for _, t in ps.items())
    with pytest.raises(KeyError):
        ps.add("enc.a", np.ones(1))


def test_index_rows_accumulates_repeats():
    x = param(np.arange(6.0).reshape(1, 3, 2))
    y = ad.index_rows(x, np.array([[0, 0, 2]]))
    ad.backward(ad.sum_(y))
    np.testing.assert_array_equal(x.grad[0], [[2, 2], [0, 0], [1, 1]])


def test_determinism():
    def run():
        rng = np.random.default_rng(3)
        w = param(rng.standard_normal((5, 5)))
        x = Tensor(rng.standard_normal((4, 5)))
        y = ad.dropout(ad.relu(ad.matmul(x, w)), 0.5, True, np.random.default_rng(9))
        ad.backward(ad.mse_loss(y, np.zeros((4, 5))))
        return y.data, w.grad
    (a, ga), (b, gb) = run(), run()
    assert a.tobytes() == b.tobytes() and ga.tobytes() == gb.tobytes()
