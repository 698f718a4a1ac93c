import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dialogxl import numerics as nx
from dialogxl.numerics import LARGE_NEG, Tape, Tensor, backward, grad_check


def central_diff(f, x, eps=1e-6):
    """Independent finite-difference gradient of a scalar numpy function."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))


def test_matmul_identity_and_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(nx.mul(nx.matmul(a, b), w))
    backward(tape, loss)
    assert rel_err(a.grad, central_diff(lambda x: np.sum((x @ b0) * w), a0.copy())) < 1e-6
    assert rel_err(b.grad, central_diff(lambda x: np.sum((a0 @ x) * w), b0.copy())) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-12)
    p = nx.softmax_rows(Tensor([LARGE_NEG, 0.0])).data
    assert p[0] < 1e-12 and abs(p[1] - 1) < 1e-12
    # direct exp-normalise evaluation
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nx.softmax_rows(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(nx.softmax_rows(Tensor([1.0, 2.0, 3.0])).data,
                               [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_degenerate_row_raises():
    with pytest.raises(nx.DegenerateRowError):
        nx.softmax_rows(Tensor([[0.0, 1.0], [LARGE_NEG, LARGE_NEG]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-30, 30)),
       st.data())
def test_softmax_rows_normalised_and_masked(x, data):
    mask = data.draw(arrays(bool, x.shape))
    mask[:, 0] = False  # keep one live entry per row
    p = nx.softmax_rows(Tensor(np.where(mask, x + LARGE_NEG, x))).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all(p[mask] < 1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(nx.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, 0.0)
    out = nx.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(2, 8))
    g0, b0, w = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(2, 8))

    def ref(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return np.sum(((x - mu) / np.sqrt(var + 1e-5) * g + b) * w)

    x, g, b = (Tensor(a.copy(), requires_grad=True) for a in (x0, g0, b0))
    with Tape() as tape:
        loss = nx.tsum(nx.mul(nx.layer_norm(x, g, b), w))
    backward(tape, loss)
    assert rel_err(x.grad, central_diff(lambda v: ref(v, g0, b0), x0.copy())) < 1e-5
    assert rel_err(g.grad, central_diff(lambda v: ref(x0, v, b0), g0.copy())) < 1e-5
    assert rel_err(b.grad, central_diff(lambda v: ref(x0, g0, v), b0.copy())) < 1e-5


def test_backward_linearity_and_product_rule():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        s = nx.tsum(x)
    backward(tape, s)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x, y = Tensor([2.0], requires_grad=True), Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(nx.mul(x, y))
    backward(tape, loss)
    assert x.grad.tolist() == [3.0] and y.grad.tolist() == [2.0]


def test_backward_accumulates_over_reuse():
    x = Tensor([1.5], requires_grad=True)
    with Tape() as tape:
        loss = nx.tsum(nx.add(nx.mul(x, x), x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [2 * 1.5 + 1])


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = nx.tsum(nx.mul(x, 2.0))
    with pytest.raises(nx.TapeError):
        backward(Tape(), loss)


def test_two_layer_toy_model_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4))
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    y = rng.integers(3, size=5)
    params = {n: Tensor(a.copy(), requires_grad=True) for n, a in
              dict(w1=w1, w2=w2, gain=gain, bias=bias).items()}

    def forward(p):
        h = nx.gelu(nx.layer_norm(nx.matmul(Tensor(x), p["w1"]), p["gain"], p["bias"]))
        return nx.cross_entropy(nx.matmul(h, p["w2"]), y)

    with Tape() as tape:
        loss = forward(params)
    backward(tape, loss)
    for name, p in params.items():
        def f(v, name=name):
            with nx.no_grad():
                q = {k: (Tensor(v) if k == name else Tensor(t.data)) for k, t in params.items()}
                return float(forward(q).data)
        assert rel_err(p.grad, central_diff(f, p.data.copy())) < 1e-4, name


def test_gather_last_and_index_rows_gradients():
    rng = np.random.default_rng(3)
    idx = rng.integers(0, 5, size=(3, 4))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.gather_last(t, idx), np.arange(12.0).reshape(3, 4))),
                      Tensor(rng.normal(size=(2, 3, 5)))) < 1e-8
    rows = np.array([0, 2, 2, 1])
    w = rng.normal(size=(4, 3))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.index_rows(t, rows), w)),
                      Tensor(rng.normal(size=(3, 3)))) < 1e-8


def test_grad_check_examples():
    rng = np.random.default_rng(4)
    assert grad_check(lambda t: nx.tsum(nx.mul(t, t)), Tensor(rng.normal(size=(3, 3)))) < 1e-8
    w = Tensor(rng.normal(size=(4, 3)))
    c = rng.normal(size=(2, 3))
    assert grad_check(lambda t: nx.tsum(nx.mul(nx.softmax_rows(nx.matmul(t, w)), c)),
                      Tensor(rng.normal(size=(2, 4)))) < 1e-6
    mask = np.array([[False, True, False], [True, True, False]])
    assert grad_check(
        lambda t: nx.tsum(nx.mul(nx.softmax_rows(nx.add(nx.matmul(t, w), np.where(mask, LARGE_NEG, 0.0))), c)),
        Tensor(rng.normal(size=(2, 4)))) < 1e-5


def test_cross_entropy_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(5)
    z = Tensor(rng.normal(size=(1, 7)), requires_grad=True)
    with Tape() as tape:
        loss = nx.cross_entropy(z, [3])
    backward(tape, loss)
    p = np.exp(z.data) / np.exp(z.data).sum()
    onehot = np.eye(7)[[3]]
    np.testing.assert_allclose(z.grad, p - onehot, atol=1e-12)
    fd = central_diff(lambda v: -np.log(np.exp(v[0, 3]) / np.exp(v).sum()), z.data.copy())
    np.testing.assert_allclose(z.grad, fd, atol=1e-8)


def test_dropout_is_deterministic_and_inverted():
    x = Tensor(np.ones((200, 50)))
    a = nx.dropout(x, 0.2, np.random.default_rng(7)).data
    b = nx.dropout(x, 0.2, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.25}
    assert abs(a.mean() - 1.0) < 0.03
    np.testing.assert_array_equal(nx.dropout(x, 0.2, None, training=False).data, x.data)


# -- AdamW -------------------------------------------------------------------

def test_adamw_zero_gradient_zero_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = nx.AdamWState(lr=0.01, weight_decay=0.0)
    nx.adamw_step(st_, {"p": p}, {"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.t == 1


def test_adamw_first_step_hand_value():
    p = Tensor(np.array([0.0]))
    st_ = nx.AdamWState(lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    nx.adamw_step(st_, {"p": p}, {"p": np.array([0.1])})
    # m_hat = 0.1, v_hat = 0.01 -> step = lr * 0.1 / (0.1 + eps)
    expected = -0.01 * 0.1 / (0.1 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-15
    assert p.data[0] == pytest.approx(-0.00999995, abs=1e-7)


def test_adamw_decay_only():
    p = Tensor(np.array([1.0]))
    nx.adamw_step(nx.AdamWState(lr=0.01, weight_decay=0.1), {"p": p}, {"p": np.zeros(1)})
    assert p.data[0] == pytest.approx(0.999, abs=1e-15)


def test_adamw_step_counter_and_nonfinite():
    p = Tensor(np.array([1.0]))
    st_ = nx.AdamWState()
    for k in range(1, 4):
        nx.adamw_step(st_, {"p": p}, {"p": np.array([0.5])})
        assert st_.t == k
    with pytest.raises(nx.NonFiniteGradientError, match="'w'"):
        nx.adamw_step(st_, {"w": p}, {"w": np.array([np.nan])})
