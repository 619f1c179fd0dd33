import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adin import autodiff as ad
from adin.autodiff import Tape, Tensor, backward
from adin.errors import ContractError, DimensionError

import gradcheck


def param(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ b).data, [[3, 4], [5, 6]])
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_sum_gradient_is_row_broadcast_of_column_sums():
    rng = np.random.default_rng(0)
    a, b = param(rng, 4, 5), param(rng, 5, 3)
    numeric = gradcheck.numeric_grad(lambda: (a.data @ b.data).sum(), [a.data])[0]
    expected = np.tile(b.data.sum(axis=1), (4, 1))
    np.testing.assert_allclose(numeric, expected, rtol=1e-8)
    with Tape() as tape:
        loss = (a @ b).sum()
    np.testing.assert_allclose(tape.gradient(loss, [a])[0], expected, rtol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = ad.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    mpmath.mp.dps = 50
    den = sum(mpmath.exp(v) for v in (1, 2, 3))
    expected = [float(mpmath.exp(v) / den) for v in (1, 2, 3)]
    np.testing.assert_allclose(ad.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0], expected, rtol=1e-15)


def test_softmax_needs_two_classes():
    with pytest.raises(DimensionError):
        ad.softmax(Tensor([[1.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(z, shift):
    s = ad.softmax(Tensor(z)).data
    assert (s > 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ad.softmax(Tensor(z + shift)).data, s, atol=1e-12)


def test_backward_examples():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = p.sum()
    np.testing.assert_array_equal(tape.gradient(loss, [p])[0], [1.0, 1.0])
    with Tape() as tape:
        loss = (p * p).sum()
    np.testing.assert_array_equal(tape.gradient(loss, [p])[0], [2.0, 4.0])


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = p * 2.0
    with pytest.raises(ContractError):
        backward(tape, out)


def test_two_layer_mlp_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-2, 2, (6, 5)))
    w1, b1 = param(rng, 5, 7), param(rng, 7)
    w2, b2 = param(rng, 7, 4), param(rng, 4)
    onehot = Tensor(np.eye(4)[rng.integers(0, 4, 6)])

    def build():
        h = (x @ w1 + b1).relu()
        c = ad.softmax(h @ w2 + b2)
        return (ad.log(c) * onehot).sum() * (-1.0 / 6)

    gradcheck.check(build, [w1, b1, w2, b2])


UNARY = {
    "relu": lambda a: a.relu(),
    "log": lambda a: ad.log(a),
    "exp": ad.exp,
    "neg": lambda a: -a,
    "square": ad.square,
    "scale": lambda a: a * 3.0 - 1.5,
    "softmax": ad.softmax,
    "sum0": lambda a: a.sum(axis=0),
    "sum1": lambda a: a.sum(axis=1),
    "mean": lambda a: a.mean(axis=0),
    "rows": lambda a: a[1:3],
    "cols": lambda a: a[:, 1:3],
    "concat": lambda a: ad.concat([a, a[:, :2]], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    lo = 0.1 if name == "log" else -2.0
    a = param(rng, 4, 3, lo=lo)
    if name == "relu":  # keep clear of the kink
        a.data[np.abs(a.data) < 0.05] = 0.5
    weights = Tensor(rng.normal(size=UNARY[name](Tensor(a.data)).shape))
    gradcheck.check(lambda: (UNARY[name](a) * weights).sum(), [a])


@pytest.mark.parametrize("other_shape", [(4, 3), (3,), ()])
@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_ops_match_finite_differences(op, other_shape):
    rng = np.random.default_rng(7)
    a = param(rng, 4, 3)
    b = param(rng, *other_shape) if other_shape else Tensor(rng.uniform(-2, 2), requires_grad=True)
    fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[op]
    weights = Tensor(rng.normal(size=(4, 3)))
    gradcheck.check(lambda: (fn(a, b) * weights).sum(), [a, b])


def test_broadcast_other_than_bias_row_is_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 4))) + Tensor(np.ones(3))


def test_log_clamps_forward_and_backward():
    p = Tensor([0.0, 1e-20, 1.0], requires_grad=True)
    with Tape() as tape:
        out = ad.log(p).sum()
    assert out.item() == pytest.approx(2 * np.log(1e-12))
    np.testing.assert_allclose(tape.gradient(out, [p])[0], [1e12, 1e12, 1.0])


def test_backward_is_deterministic_and_does_not_mutate_tape():
    rng = np.random.default_rng(3)
    w = param(rng, 5, 3)
    x = Tensor(rng.normal(size=(4, 5)))
    with Tape() as tape:
        loss = ad.softmax(x @ w).log().sum()
    n_nodes = len(tape.nodes)
    g1 = backward(tape, loss)[w.id]
    g2 = backward(tape, loss)[w.id]
    assert len(tape.nodes) == n_nodes
    np.testing.assert_array_equal(g1, g2)


def test_tape_ids_increase_and_no_recording_outside_tape():
    rng = np.random.default_rng(4)
    w = param(rng, 3, 3)
    out = w @ w
    assert not out.requires_grad
    with Tape() as tape:
        (w @ w).relu().sum()
    ids = [n.id for n in tape.nodes]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)


def test_shared_subexpression_gradients_accumulate():
    p = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        q = p * p
        loss = (q + q * p).sum()  # p^2 + p^3
    assert tape.gradient(loss, [p])[0][0] == pytest.approx(2 * 3 + 3 * 9)
