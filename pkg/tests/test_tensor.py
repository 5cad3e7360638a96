import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from regmix import tensor as T
from regmix.tensor import GradTape, ShapeError, Tensor

from conftest import central_diff, rel_err


def test_add_elementwise():
    assert np.array_equal(T.add([1, 2], [3, 4]).data, [4, 6])


def test_mul_self_gradient():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert np.array_equal(x.grad, [6.0])


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.div([1.0, 2.0], [1.0, 0.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4\]"):
        T.add(np.ones((2, 3)), np.ones(4))


def test_singleton_broadcast_gradient():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0).reshape(1, 4), requires_grad=True)
    T.backward(T.tsum(T.mul(a, b)))
    assert b.grad.shape == (1, 4)
    assert np.array_equal(b.grad, [[3.0, 3.0, 3.0, 3.0]])
    assert np.array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_matmul_identity_and_scalar():
    eye = [[1.0, 0.0], [0.0, 1.0]]
    m = [[5.0, 6.0], [7.0, 8.0]]
    assert np.array_equal(T.matmul(eye, m).data, m)
    assert np.array_equal(T.matmul([[2.0]], [[3.0]]).data, [[6.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(a, b).data, ref, rtol=1e-14, atol=1e-14)


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv_full_overlap_sum(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    out = T.conv2d(x, np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == pytest.approx(x.sum(), abs=1e-14)


def test_conv_delta_kernel_is_identity(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(T.conv2d(x, k, padding=1).data, x)


def _sliding_window(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, w = xp.shape
    o, _, kh, kw = k.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for c in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[b, c, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[c])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_sliding_window(rng, stride, pad):
    x, k = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
    out = T.conv2d(x, k, stride=stride, padding=pad)
    assert out.shape[2:] == ((7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 2) // stride + 1)
    assert np.allclose(out.data, _sliding_window(x, k, stride, pad), atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_log_softmax_values():
    assert np.allclose(T.log_softmax([[0.0, 0.0]]).data, np.log(0.5), atol=0, rtol=1e-15)
    big = T.log_softmax([[1000.0, 1000.0]]).data
    assert np.all(np.isfinite(big)) and np.allclose(big, np.log(0.5), rtol=1e-15)


def test_relu_values():
    assert np.array_equal(T.relu([-1.0, 2.0]).data, [0.0, 2.0])


def test_axis_out_of_range():
    with pytest.raises(ValueError):
        T.log_softmax(np.zeros((2, 3)), axis=2)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_log_softmax_normalized_and_shift_invariant(x, shift):
    ls = T.log_softmax(x, 1).data
    assert np.all(np.abs(np.exp(ls).sum(axis=1) - 1.0) <= 1e-12)
    assert np.allclose(T.log_softmax(x + shift, 1).data, ls, atol=1e-9)


def test_backward_sum_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, 2.0))


def test_gradients_accumulate_until_zero_grad():
    x = Tensor([2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, 3.0)))
    T.backward(T.tsum(T.mul(x, 3.0)))
    assert np.array_equal(x.grad, [6.0])
    x.zero_grad()
    T.backward(T.tsum(T.mul(x, 3.0)))
    assert np.array_equal(x.grad, [3.0])


def test_detach_semantics():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(T.mul(T.detach(x), x)))
    assert np.array_equal(x.grad, [3.0])
    d = T.detach(x)
    assert np.array_equal(T.detach(d).data, d.data)
    leaf = Tensor([1.0], requires_grad=True)
    y = T.mul(T.detach(leaf), 2.0)
    assert not y.requires_grad
    assert leaf.grad is None


def test_tape_visits_consumers_first():
    a = Tensor([1.0], requires_grad=True)
    b = T.mul(a, a)
    c = T.add(b, a)
    loss = T.tsum(T.mul(c, b))
    tape = GradTape.record(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(pos) == len(tape.nodes)  # each node once
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(node)] < pos[id(p)]


def _fd_check(build, *arrays, h=1e-5):
    """Compare reverse-mode gradients of sum(build(*ts) * R) with central differences."""
    rng = np.random.default_rng(7)
    out_shape = build(*[Tensor(a) for a in arrays]).shape
    r = rng.normal(size=out_shape)

    def scalar(*vals):
        return float(np.sum(build(*[Tensor(v) for v in vals]).data * r))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(T.tsum(T.mul(build(*ts), r)))
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            vals = list(arrays)
            vals[i] = v
            return scalar(*vals)
        worst = max(worst, rel_err(ts[i].grad, central_diff(f, a, h)))
    return worst


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "div": (lambda a, b: T.div(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "conv2d": (lambda a, b: T.conv2d(a, b, stride=2, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "exp": (lambda a: T.exp(a), [(3, 3)]),
    "log_softmax": (lambda a: T.log_softmax(a, 1), [(4, 6)]),
    "sum_axis": (lambda a: T.tsum(a, 0), [(3, 5)]),
    "mean": (lambda a: T.mean(a, 1), [(3, 5)]),
    "amax": (lambda a: T.amax(a, 1), [(4, 5)]),
    "neg": (lambda a: T.neg(a), [(2, 2)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name, rng):
    build, shapes = OPS[name]
    arrays = [rng.normal(size=s) for s in shapes]
    if name == "div":
        arrays[1] = np.sign(arrays[1]) * (0.5 + np.abs(arrays[1]))
    if name == "relu":
        arrays[0] = np.sign(arrays[0]) * (0.1 + np.abs(arrays[0]))  # keep away from the kink
    assert _fd_check(build, *arrays) < 1e-4


def test_nll_through_log_softmax_matches_finite_differences(rng):
    logits = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)

    def f(v):
        ls = v - v.max(axis=1, keepdims=True)
        ls = ls - np.log(np.exp(ls).sum(axis=1, keepdims=True))
        return -ls[np.arange(5), y].mean()

    t = Tensor(logits.copy(), requires_grad=True)
    T.backward(T.neg(T.mean(T.pick(T.log_softmax(t, 1), y))))
    assert rel_err(t.grad, central_diff(f, logits)) < 1e-4
