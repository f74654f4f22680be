import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentplan import numerics as nx
from latentplan.numerics import Tensor
from latentplan.numerics.tensor import divide, maximum, sqrt


def param(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


# ----------------------------------------------------------------------------- matmul


def test_matmul_identity():
    out = nx.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_vs_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(nx.matmul(Tensor(a), Tensor(b)).data - ref).max() < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        nx.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


# ----------------------------------------------------------------------------- losses


def test_xent_uniform():
    assert nx.softmax_cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-12)


def test_xent_saturated():
    logits = np.zeros(5)
    logits[3] = 30.0
    assert nx.softmax_cross_entropy(Tensor(logits), 3).item() < 1e-9


def test_xent_hand_logsumexp():
    want = math.log(math.exp(1.0) + math.exp(2.0) + math.exp(3.0)) - 1.0
    assert nx.softmax_cross_entropy(Tensor([1.0, 2.0, 3.0]), 0).item() == pytest.approx(want, abs=1e-12)


def test_xent_gradient_is_softmax_minus_onehot():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.softmax_cross_entropy(x, 1).backward()
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(x.grad, e / e.sum() - np.eye(3)[1], atol=1e-14)


@pytest.mark.parametrize("target", [-1, 3, 10])
def test_xent_target_out_of_range(target):
    with pytest.raises(IndexError):
        nx.softmax_cross_entropy(Tensor(np.zeros(3)), target)


@pytest.mark.parametrize("a,b,want", [((1.0, 0.0), (1.0, 0.0), 0.0), ((1.0, 0.0), (0.0, 1.0), 1.0), ((1.0, 0.0), (-1.0, 0.0), 2.0)])
def test_mse_examples(a, b, want):
    assert nx.mse(Tensor(a), Tensor(b)).item() == pytest.approx(want, abs=1e-15)


def test_mse_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


@pytest.mark.parametrize("a,b,want", [((0.3, -2.0), (0.3, -2.0), 1.0), ((1.0, 0.0), (0.0, 1.0), 0.0), ((1.0, 0.0), (-1.0, 0.0), -1.0)])
def test_cosine_examples(a, b, want):
    assert nx.cosine_sim(Tensor(a), Tensor(b)).item() == pytest.approx(want, abs=1e-15)


def test_cosine_zero_vector_is_finite():
    z = Tensor(np.zeros(4), requires_grad=True)
    c = nx.cosine_sim(z, Tensor(np.ones(4)))
    c.backward()
    assert abs(c.item()) < 1e-12 and np.all(np.isfinite(z.grad))


# ----------------------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    p = param(rng, 3, 4)
    p.sum().backward()
    np.testing.assert_array_equal(p.grad, np.ones((3, 4)))


def test_backward_self_mse_gives_zeros(rng):
    p = param(rng, 5)
    nx.mse(p, p).backward()
    np.testing.assert_array_equal(p.grad, np.zeros(5))


def test_backward_non_scalar_is_contract_error(rng):
    with pytest.raises(nx.ContractError):
        (param(rng, 3) * 2.0).backward()


def test_shared_node_visited_once(rng):
    # y feeds two branches; a double visit would double its gradient
    p = param(rng, 3)
    y = p * 2.0
    (y.sum() + y.sum()).backward()
    np.testing.assert_allclose(p.grad, 4.0 * np.ones(3))


def _fd(loss_fn, params):
    return nx.finite_diff_check(loss_fn, params, h=1e-5)


def _weighted(out, w):
    return (out * Tensor(w)).sum()


OPS = {
    "add": lambda r: ([param(r, 3, 4), param(r, 4)], lambda a, b: nx.add(a, b)),
    "sub": lambda r: ([param(r, 3, 4), param(r, 3, 1)], lambda a, b: nx.sub(a, b)),
    "mul": lambda r: ([param(r, 2, 3, 4), param(r, 1, 4)], lambda a, b: nx.mul(a, b)),
    "matmul_2d": lambda r: ([param(r, 3, 4), param(r, 4, 5)], lambda a, b: nx.matmul(a, b)),
    "matmul_3d_2d": lambda r: ([param(r, 2, 3, 4), param(r, 4, 5)], lambda a, b: nx.matmul(a, b)),
    "matmul_batched": lambda r: ([param(r, 2, 2, 3, 4), param(r, 2, 2, 4, 3)], lambda a, b: nx.matmul(a, b)),
    "sum_axis": lambda r: ([param(r, 3, 4)], lambda a: nx.sum_(a, axis=1, keepdims=True)),
    "mean": lambda r: ([param(r, 3, 4)], lambda a: nx.mean(a, axis=0)),
    "reshape_transpose": lambda r: ([param(r, 2, 6)], lambda a: nx.transpose(nx.reshape(a, (3, 4)), (1, 0))),
    "square": lambda r: ([param(r, 5)], lambda a: nx.square(a)),
    "sqrt": lambda r: ([param(r, 5, lo=0.5, hi=2.0)], lambda a: sqrt(a)),
    "maximum": lambda r: ([Tensor(r.choice([-1, 1], 6) * r.uniform(0.2, 1.0, 6), requires_grad=True)], lambda a: maximum(a, 0.0)),
    "divide": lambda r: ([param(r, 4), param(r, 4, lo=0.5, hi=2.0)], lambda a, b: divide(a, b)),
    "concat": lambda r: ([param(r, 2, 3), param(r, 1, 3)], lambda a, b: nx.concat([a, b], axis=0)),
    "embedding": lambda r: ([param(r, 5, 3)], lambda t: nx.embedding(t, np.array([[0, 4], [4, 2]]))),
    "take_rows": lambda r: ([param(r, 6, 3)], lambda a: nx.take_rows(a, np.array([5, 0, 5]))),
    "layer_norm": lambda r: ([param(r, 3, 8), param(r, 8), param(r, 8)], lambda x, g, b: nx.layer_norm(x, g, b)),
    "gelu": lambda r: ([param(r, 3, 5)], lambda a: nx.gelu(a)),
    "causal_softmax": lambda r: ([param(r, 2, 4, 4)], lambda a: nx.causal_softmax(a)),
    "rowwise_cosine": lambda r: ([param(r, 3, 4), param(r, 3, 4)], lambda a, b: nx.rowwise_cosine(a, b)),
    "cosine_sim": lambda r: ([param(r, 6), param(r, 6)], lambda a, b: nx.cosine_sim(a, b)),
    "mse": lambda r: ([param(r, 6), param(r, 6)], lambda a, b: nx.mse(a, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name, backend):
    rng = np.random.default_rng(7)
    inputs, op = OPS[name](rng)
    w = rng.uniform(-1, 1, size=op(*inputs).shape)
    err = _fd(lambda: _weighted(op(*inputs), w), {str(i): t for i, t in enumerate(inputs)})
    assert err < 1e-4


def test_cross_entropy_gradient(backend, rng):
    logits = param(rng, 6, 5)
    tgt = np.array([0, 4, -1, 2, 2, 1])
    assert _fd(lambda: nx.cross_entropy(logits, tgt), {"l": logits}) < 1e-4


def test_finite_diff_zero_gradient_loss(rng):
    p = param(rng, 4)
    assert nx.finite_diff_check(lambda: nx.mse(p, p), {"p": p}) == 0.0


def test_finite_diff_detects_fault(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    w = rng.uniform(-1, 1, size=(3, 2))
    with nx.inject_fault("matmul"):
        err = nx.finite_diff_check(lambda: _weighted(nx.matmul(a, b), w), {"a": a, "b": b})
    assert err > 0.3


def test_finite_diff_rejects_bad_h(rng):
    p = param(rng, 2)
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda: p.sum(), {"p": p}, h=0.0)


# ----------------------------------------------------------------------------- properties


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-10, 10)), arrays(np.float64, n, elements=st.floats(-10, 10)))))
def test_mse_and_cosine_ranges(ab):
    a, b = ab
    m = nx.mse(Tensor(a), Tensor(b)).item()
    assert m >= 0
    if np.array_equal(a, b):
        assert m == 0
    elif np.abs(a - b).max() > 1e-150:  # below that the square underflows
        assert m > 0
    c = nx.cosine_sim(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-9 <= c <= 1 + 1e-9


def test_no_grad_builds_no_graph(rng):
    p = param(rng, 3)
    with nx.no_grad():
        y = (p * 2.0).sum()
    with pytest.raises(nx.ContractError):
        y.backward()
    assert p.grad is None


# ----------------------------------------------------------------------------- adam


def test_adam_zero_gradients_leave_params():
    p = {"w": np.array([1.0, -2.0])}
    nx.adam_step(nx.AdamState(), p, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_hand_value():
    p = {"w": np.array([0.0])}
    st_ = nx.AdamState()
    nx.adam_step(st_, p, {"w": np.array([1.0])}, 0.1)
    # m_hat = v_hat = 1, update = -0.1 * 1 / (1 + 1e-8)
    assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert st_.step == 1


def test_adam_two_steps_vs_straight_line(rng):
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    w0 = rng.normal(size=3)
    g1, g2 = rng.normal(size=3), rng.normal(size=3)
    # straight-line recurrence
    m1 = (1 - b1) * g1
    v1 = (1 - b2) * g1**2
    w1 = w0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2**2
    w2 = w1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    p = {"w": w0.copy()}
    s = nx.AdamState(b1, b2, eps)
    nx.adam_step(s, p, {"w": g1}, lr)
    nx.adam_step(s, p, {"w": g2}, lr)
    np.testing.assert_allclose(p["w"], w2, rtol=1e-13)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        nx.adam_step(nx.AdamState(), {"w": np.zeros(1)}, {"w": np.zeros(1)}, 0.0)


# ----------------------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, rng):
    arrays_ = {"a": rng.normal(size=(2, 3)), "bé": np.array(4.5), "c": rng.normal(size=(1, 2, 2))}
    path = tmp_path / "x.ckpt"
    nx.save_checkpoint(path, arrays_)
    back = nx.load_checkpoint(path)
    assert list(back) == list(arrays_)
    for k in arrays_:
        np.testing.assert_array_equal(back[k], arrays_[k])


def test_checkpoint_byte_layout():
    from latentplan.numerics.checkpoint import dumps

    buf = dumps({"w": np.array([[1.0, 2.0]])})
    want = b"LPCK" + struct.pack("<III", 1, 1, 1) + b"w" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0)
    assert buf == want


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope" + bytes(20))
    with pytest.raises(nx.CheckpointError):
        nx.load_checkpoint(path)
