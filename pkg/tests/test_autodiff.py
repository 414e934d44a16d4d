import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metatraffic import autodiff as ad
from metatraffic.autodiff import DomainError, ShapeError, Tape, Tensor


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, *inputs, tol=1e-4):
    """Compare tape gradients of sum(w * build(*inputs)) with central differences."""
    rng = np.random.default_rng(123)
    out_shape = build(*[Tensor(x) for x in inputs]).shape
    w = rng.normal(size=out_shape)

    def scalar(*xs):
        return float((build(*[Tensor(x) for x in xs]).data * w).sum())

    ts = [Tensor(x, requires_grad=True) for x in inputs]
    loss = ad.sum(ad.mul(build(*ts), w))
    grads = ad.backward(loss, {str(i): t for i, t in enumerate(ts)})
    for i, x in enumerate(inputs):
        num = numeric_grad(lambda v: scalar(*inputs[:i], v, *inputs[i + 1 :]), x)
        rel = np.abs(grads[str(i)] - num) / np.maximum(np.maximum(np.abs(num), np.abs(grads[str(i)])), 1e-6)
        assert rel.max() < tol, (i, rel.max())


rng = np.random.default_rng(0)
A34 = rng.normal(size=(3, 4))
B34 = rng.normal(size=(3, 4))
POS34 = rng.uniform(0.5, 2.0, size=(3, 4))


@pytest.mark.parametrize(
    "build,inputs",
    [
        (lambda a, b: a + b, (A34, B34)),
        (lambda a, b: a - b, (A34, B34)),
        (lambda a, b: a * b, (A34, B34)),
        (lambda a, b: a / b, (A34, POS34)),
        (lambda a, b: a + b, (A34, rng.normal(size=(1, 4)))),  # row broadcast
        (lambda a, b: a * b, (A34, rng.normal(size=(3, 1)))),
        (lambda a, b: a @ b, (A34, rng.normal(size=(4, 2)))),
        (lambda a, b: a @ b, (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))),
        (lambda a, b: ad.vecmat(a, b), (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4, 5)))),
        (lambda a: ad.sigmoid(a), (A34,)),
        (lambda a: ad.tanh(a), (A34,)),
        (lambda a: ad.exp(a), (A34,)),
        (lambda a: ad.log(a), (POS34,)),
        (lambda a: ad.sqrt(a), (POS34,)),
        (lambda a: ad.absolute(a), (A34,)),
        (lambda a: ad.relu(a), (A34,)),
        (lambda a: ad.square(a), (A34,)),
        (lambda a: ad.softmax(a, axis=-1), (A34,)),
        (lambda a: ad.softmax(a, axis=0), (A34,)),
        (lambda a: ad.transpose(a), (A34,)),
        (lambda a: ad.reshape(a, (4, 3)), (A34,)),
        (lambda a: ad.broadcast_to(a, (2, 3, 4)), (A34,)),
        (lambda a: ad.sum(a, axis=1), (A34,)),
        (lambda a: ad.sum(a, axis=0, keepdims=True), (A34,)),
        (lambda a: ad.mean(a), (A34,)),
        (lambda a: ad.mean(a, axis=-1), (A34,)),
        (lambda a: ad.norm(a, axis=-1), (A34,)),
        (lambda a: ad.norm(a, axis=-1, keepdims=False), (A34,)),
        (lambda a, b: ad.concat([a, b], axis=0), (A34, B34)),
        (lambda a, b: ad.concat([a, b], axis=-1), (A34, B34)),
        (lambda a: ad.take(a, np.array([[0, 2], [1, 1]]), axis=0), (A34,)),
        (lambda a: ad.index(a, (Ellipsis, slice(1, 3))), (A34,)),
        (lambda a: ad.clamp(a, -0.5, 0.5), (A34,)),
    ],
)
def test_primitive_gradients_match_finite_differences(build, inputs):
    check_grad(build, *inputs)


def test_matmul_identity():
    X = rng.normal(size=(2, 5))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(X)).data, X)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_derivative_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    g = ad.backward(ad.sum(ad.sigmoid(x)), {"x": x})["x"]
    fd = (ad.sigmoid(Tensor(1e-5)).item() - ad.sigmoid(Tensor(-1e-5)).item()) / 2e-5
    assert abs(g[0] - 0.25) < 1e-12
    assert abs(g[0] - fd) < 1e-6


def test_shape_error_names_operation_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-1.0]))


def test_backward_constant_loss_gives_zero_gradients():
    p = Tensor(np.ones(3), requires_grad=True)
    grads = ad.backward(Tensor(5.0), {"p": p})
    np.testing.assert_array_equal(grads["p"], np.zeros(3))


def test_backward_square():
    theta = Tensor(3.0, requires_grad=True)
    assert ad.backward(theta * theta, {"theta": theta})["theta"] == 6.0


def test_backward_rejects_non_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(p * 2.0, {"p": p})


def test_parameter_off_path_gets_zero_with_its_shape():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 1)), requires_grad=True)
    grads = ad.backward(ad.sum(a * a), {"a": a, "b": b})
    assert grads["b"].shape == (3, 1) and not grads["b"].any()


def test_tape_visits_each_node_once_in_reverse_topological_order():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    z = y + y  # diamond: y reached twice
    loss = ad.sum(z * x)
    tape = Tape.from_output(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    g = ad.backward(loss, {"x": x})["x"]
    np.testing.assert_allclose(g, 6 * x.data**2)


def test_straight_through_forward_hard_backward_identity():
    s = Tensor(np.array([0.2, 0.7]), requires_grad=True)
    h = ad.straight_through(s)
    np.testing.assert_array_equal(h.data, [0.0, 1.0])
    g = ad.backward(ad.sum(h * np.array([3.0, 4.0])), {"s": s})["s"]
    np.testing.assert_array_equal(g, [3.0, 4.0])


def test_no_in_place_mutation_of_inputs():
    a = rng.normal(size=(3, 3))
    keep = a.copy()
    t = Tensor(a, requires_grad=True)
    loss = ad.sum(ad.softmax(t) * t)
    ad.backward(loss, {"t": t})
    np.testing.assert_array_equal(t.data, keep)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.just((3, 5)), elements=st.floats(-10, 10)),
    st.permutations(range(5)),
)
def test_softmax_permutation_equivariant(x, perm):
    perm = list(perm)
    a = ad.softmax(Tensor(x[:, perm])).data
    b = ad.softmax(Tensor(x)).data[:, perm]
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_determinism_bit_identical():
    x = rng.normal(size=(4, 4))

    def run():
        t = Tensor(x, requires_grad=True)
        loss = ad.sum(ad.tanh(t @ t) * ad.softmax(t))
        return loss.item(), ad.backward(loss, {"t": t})["t"]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert np.array_equal(g1, g2)
