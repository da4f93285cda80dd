import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qvlab import tensor as T
from qvlab.tensor import Tensor, ShapeError
from reference import central_diff, matmul_loops

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    b = Tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), b).data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b),
                               rtol=0, atol=1e-12)


def test_matmul_associativity_against_loops(rng):
    a, b, c = (rng.normal(size=(5, 5)) for _ in range(3))
    left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
    oracle = matmul_loops(matmul_loops(a, b), c)
    np.testing.assert_allclose(left, oracle, atol=1e-10)
    np.testing.assert_allclose(right, oracle, atol=1e-10)


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    assert big[0, 0] == 1.0 and big[0, 1] == 0.0
    # exp(ln 1) / (1 + 3) and exp(ln 3) / (1 + 3)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(1), math.log(3)]])).data,
                               [[1 / 4, 3 / 4]], atol=1e-15)


def test_softmax_mask_zeroes_entries_and_rejects_empty_rows():
    y = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]]), mask=[[True, False, True]]).data
    assert y[0, 1] == 0.0
    assert abs(y.sum() - 1) < 1e-12
    with pytest.raises(ValueError, match="fully masked"):
        T.softmax_rows(Tensor([[1.0, 2.0]]), mask=[[False, False]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), finite)
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-12)


def test_elementwise_examples():
    assert T.concat_last_dim(Tensor([[1, 2]]), Tensor([[3]])).data.tolist() == [[1, 2, 3]]
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.scale(x, 1.0).data, x.data)
    np.testing.assert_array_equal(T.add(x, 0).data, x.data)
    np.testing.assert_array_equal(T.add(x, Tensor([1.0, 2.0, 3.0])).data, x.data + [1, 2, 3])
    with pytest.raises(ShapeError):
        T.add(x, Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.concat_last_dim(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


def test_backward_linear():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    T.backward(T.sum_all(T.scale(x, 3)))
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 3.0))


def test_backward_matmul_self_matches_finite_differences(rng):
    x0 = rng.normal(size=(2, 2))
    x = Tensor(x0.copy(), requires_grad=True)
    T.backward(T.sum_all(T.matmul(x, x)))
    numeric = central_diff(lambda a: (a @ a).sum(), x0.copy())
    rel = np.abs(x.grad - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < 1e-6


def test_unused_tensor_gradient_is_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_gradients_accumulate_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    T.backward(T.sum_all(T.add(T.mul_elementwise(x, x), x)))
    assert x.grad.tolist() == [5.0]


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.scale(x, 2))


def test_backward_visits_nodes_in_reverse_recording_order(monkeypatch):
    seen = []
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    a = T.scale(x, 2)
    b = T.add(a, x)
    c = T.matmul(b, a)
    loss = T.sum_all(c)
    for name, t in {"a": a, "b": b, "c": c, "loss": loss}.items():
        rule = t._node.backward

        def wrapped(g, rule=rule, name=name):
            seen.append(name)
            return rule(g)

        t._node.backward = wrapped
    T.backward(loss)
    assert seen == ["loss", "c", "b", "a"]


def test_shape_is_fixed():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        x.data = np.ones(3)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2)
    assert y._node is None and not y.requires_grad


# -- finite-difference checks of every differentiable op ------------------

def _fd_check(build, inputs, rng, tol=1e-4):
    ts = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    probe = rng.normal(size=build(*ts).shape)

    def loss_of(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * probe).sum())

    T.backward(T.sum_all(T.mul_elementwise(build(*ts), probe)))
    for i, a in enumerate(inputs):
        def f(x, i=i):
            arrs = list(inputs)
            arrs[i] = x
            return loss_of(*arrs)

        numeric = central_diff(f, a.copy())
        rel = np.abs(ts[i].grad - numeric) / np.maximum(
            np.maximum(np.abs(ts[i].grad), np.abs(numeric)), 1e-8)
        assert rel.max() < tol, (i, rel.max())


OPS = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "add_row": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: T.scale(a, -1.7), [(3, 4)]),
    "mul": (lambda a, b: T.mul_elementwise(a, b), [(3, 4), (3, 4)]),
    "concat": (lambda a, b: T.concat_last_dim(a, b), [(3, 2), (3, 3)]),
    "transpose": (lambda a: T.transpose(a), [(3, 4)]),
    "reshape": (lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
    "softmax": (lambda a: T.softmax_rows(a), [(3, 5)]),
    "softmax_masked": (lambda a: T.softmax_rows(a, np.tril(np.ones((4, 4), bool))), [(4, 4)]),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
    "relu": (lambda a: T.relu(a), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    build, shapes = OPS[name]
    inputs = [rng.normal(size=s) for s in shapes]
    if name == "relu":
        inputs = [np.where(np.abs(a) < 0.05, 0.5, a) for a in inputs]
    _fd_check(build, inputs, rng)


def test_embedding_and_cross_entropy_gradients(rng):
    ids = np.array([[0, 2, 2], [1, 3, 0]])
    targets = np.array([[1, 0, 2], [3, 3, 1]])
    weight = np.array([[1, 1, 0], [0, 1, 1]], dtype=float)
    table = rng.normal(size=(4, 5))
    proj = rng.normal(size=(5, 4))

    def f(tab):
        z = tab[ids] @ proj
        z = z - z.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], -1)[..., 0]
        return -(picked * weight).sum() / weight.sum()

    t = Tensor(table.copy(), requires_grad=True)
    loss = T.cross_entropy(T.matmul(T.embedding(t, ids), Tensor(proj)), targets, weight)
    assert abs(loss.item() - f(table)) < 1e-12
    T.backward(loss)
    numeric = central_diff(f, table.copy())
    np.testing.assert_allclose(t.grad, numeric, rtol=1e-5, atol=1e-9)
