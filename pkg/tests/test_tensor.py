import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entitynlm import tensor as T
from entitynlm.errors import ContractError, DegenerateInputError, DimensionError
from entitynlm.tensor import Tape, Tensor

from conftest import numeric_grad, rel_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def grads_of(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` and the matching numeric ones."""
    params = [T.parameter(a) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value():
        return fn(*[Tensor(p.data) for p in params]).item()

    numeric = [numeric_grad(value, p.data) for p in params]
    return analytic, numeric


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(T.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_reports_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_absolute():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    analytic, numeric = grads_of(lambda x, y: T.sum(T.mul(T.matmul(x, y), Tensor(w))), a, b)
    for an, nu in zip(analytic, numeric):
        assert np.max(np.abs(an - nu)) < 1e-6


def test_bilinear_examples():
    eye = Tensor(np.eye(2))
    assert T.bilinear(Tensor([1.0, 0.0]), eye, Tensor([0.0, 1.0])).item() == 0.0
    assert T.bilinear(Tensor([1.0, 1.0]), eye, Tensor([2.0, 3.0])).item() == 5.0
    with pytest.raises(DimensionError):
        T.bilinear(Tensor([1.0, 1.0]), Tensor(np.eye(3)), Tensor([2.0, 3.0, 1.0]))


def test_bilinear_gradient():
    rng = np.random.default_rng(1)
    analytic, numeric = grads_of(T.bilinear, rng.normal(size=4), rng.normal(size=(4, 3)), rng.normal(size=3))
    for an, nu in zip(analytic, numeric):
        assert np.max(np.abs(an - nu)) < 1e-6


def test_log_softmax_examples():
    np.testing.assert_allclose(T.log_softmax(Tensor([0.0, 0.0])).data, np.log([0.5, 0.5]), rtol=0, atol=1e-15)
    out = T.log_softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0]) < 1e-12 and abs(out[1] + 1000.0) < 1e-9
    x = np.array([1.0, 2.0, 3.0])
    direct = np.log(np.exp(x) / np.exp(x).sum())
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, direct, atol=1e-14)
    with pytest.raises(DimensionError):
        T.log_softmax(Tensor(np.zeros(0)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_log_softmax_normalizes(x):
    out = T.log_softmax(Tensor(x)).data
    assert abs(np.exp(out).sum() - 1.0) < 1e-12


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.l2_normalize(Tensor(u)).data, u)
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(Tensor(np.zeros(3)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_l2_normalize_unit_and_idempotent(v):
    once = T.l2_normalize(Tensor(v)).data
    twice = T.l2_normalize(Tensor(once)).data
    assert abs(np.linalg.norm(once) - 1.0) < 1e-12
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_backward_examples():
    p = T.parameter(np.arange(5.0))
    with Tape() as tape:
        loss = T.sum(p)
    tape.backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones(5))
    assert loss.grad == 1.0

    z = T.parameter(0.0)
    with Tape() as tape:
        s = T.sigmoid(z)
    tape.backward(s)
    assert z.grad == 0.25


def test_backward_rejects_vector_loss():
    p = T.parameter(np.ones(3))
    with Tape() as tape:
        y = T.tanh(p)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_tape_inputs_are_topological():
    a = T.parameter(np.ones(3))
    with Tape() as tape:
        b = T.tanh(a) * a
        T.sum(T.l2_normalize(b + a))
    seen = {id(a)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs if i.requires_grad)
        seen.add(id(node.output))


def test_no_recording_outside_tape():
    a = T.parameter(np.ones(3))
    out = T.tanh(a)
    assert not out.requires_grad


def _ops():
    """(name, fn, shapes) for every differentiable op, each reduced to a scalar."""
    w3 = Tensor(np.array([0.3, -1.2, 0.7]))
    return [
        ("add", lambda a, b: T.dot(T.add(a, b), w3), [(3,), (3,)]),
        ("sub", lambda a, b: T.dot(T.sub(a, b), w3), [(3,), (3,)]),
        ("mul", lambda a, b: T.dot(T.mul(a, b), w3), [(3,), (3,)]),
        ("scalar_mul", lambda s, b: T.dot(T.mul(s, b), w3), [(), (3,)]),
        ("tanh", lambda a: T.dot(T.tanh(a), w3), [(3,)]),
        ("sigmoid", lambda a: T.dot(T.sigmoid(a), w3), [(3,)]),
        ("concat", lambda a, b: T.dot(T.concat([a, b]), Tensor(np.arange(5.0) - 2)), [(2,), (3,)]),
        ("stack", lambda a, b: T.sum(T.mul(T.stack([a, b]), Tensor(np.arange(6.0).reshape(2, 3)))), [(3,), (3,)]),
        ("take", lambda a: T.take(T.tanh(a), 1), [(3,)]),
        ("matvec", lambda W, v: T.dot(T.matmul(W, v), Tensor([1.0, -2.0])), [(2, 3), (3,)]),
        ("vecmat", lambda v, W: T.dot(T.matmul(v, W), w3), [(2,), (2, 3)]),
        ("bilinear", T.bilinear, [(2,), (2, 3), (3,)]),
        ("log_softmax", lambda a: T.dot(T.log_softmax(a), w3), [(3,)]),
        ("l2_normalize", lambda a: T.dot(T.l2_normalize(a), w3), [(3,)]),
        ("embedding", lambda W: T.dot(T.embedding(W, 2), w3), [(4, 3)]),
        ("add_n", lambda a, b: T.dot(T.add_n([a, b, a]), w3), [(3,), (3,)]),
    ]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name,fn,shapes", _ops(), ids=[o[0] for o in _ops()])
def test_gradients_match_finite_differences(name, fn, shapes, seed):
    rng = np.random.default_rng(seed)
    arrays_ = [rng.normal(size=s) for s in shapes]
    analytic, numeric = grads_of(fn, *arrays_)
    for an, nu in zip(analytic, numeric):
        assert rel_error(an, nu) < 1e-4


def test_dropout_is_inverted_and_identity_at_eval():
    a = Tensor(np.ones(10000))
    assert T.dropout(a, 0.5, None) is a
    out = T.dropout(a, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        W = T.parameter(rng.normal(size=(4, 4)))
        h = Tensor(rng.normal(size=4))
        with Tape():
            for _ in range(5):
                h = T.tanh(T.matmul(W, T.dropout(h, 0.3, rng)))
        return h.data.tobytes()

    assert run() == run()
