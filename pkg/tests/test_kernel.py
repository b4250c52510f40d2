import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avse import kernel as K
from avse.kernel import DimensionError, InputTooShortError, KernelConfigError, Tensor, gradcheck, make_rng

from conftest import rel_err


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# -- forward values -------------------------------------------------------------

def test_matmul_identity_and_orthogonal():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(K.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert K.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        K.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("T,K_,stride,expect", [(16, 16, 8, 1), (16000, 16, 8, 1999), (17, 4, 3, 5)])
def test_conv1d_length(T, K_, stride, expect):
    y = K.conv1d(Tensor(np.ones((1, 1, T))), Tensor(np.ones((2, 1, K_))), stride)
    assert y.shape == (1, 2, expect)


def test_conv1d_too_short():
    with pytest.raises(InputTooShortError):
        K.conv1d(Tensor(np.ones((1, 1, 15))), Tensor(np.ones((1, 1, 16))), 8)


def test_conv1d_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 20))
    w = np.zeros((1, 1, 5))
    w[0, 0, 0] = 1.0
    y = K.conv1d(Tensor(x), Tensor(w), 1)
    assert np.array_equal(y.data[0, 0], x[0, 0, :16])


def test_conv1d_matches_direct_sum(rng):
    x = rng.standard_normal((2, 3, 23))
    w = rng.standard_normal((4, 3, 5))
    y = K.conv1d(Tensor(x), Tensor(w), 3).data
    ref = np.zeros_like(y)
    for b in range(2):
        for o in range(4):
            for t in range(y.shape[2]):
                ref[b, o, t] = np.sum(x[b, :, 3 * t:3 * t + 5] * w[o])
    assert rel_err(y, ref) < 1e-13


@pytest.mark.parametrize("T,expect", [(1, 16), (1999, 16000)])
def test_conv_transpose_length(T, expect):
    y = K.conv_transpose1d(Tensor(np.ones((1, 3, T))), Tensor(np.ones((3, 1, 16))), 8)
    assert y.shape == (1, 1, expect)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 5))
def test_conv_adjoint_identity(seed, stride, k):
    rng = make_rng(seed)
    T = 9 + k
    a = rng.standard_normal((1, 2, T))
    w = rng.standard_normal((3, 2, k))
    ya = K.conv1d(Tensor(a), Tensor(w), stride).data
    b = rng.standard_normal(ya.shape)
    lhs = np.sum(ya * b)
    back = K.conv_transpose1d(Tensor(b), Tensor(w), stride).data
    # samples past the last full window never reach the conv output
    rhs = np.sum(a[..., :back.shape[2]] * back)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_conv_adjoint_1x2x9(rng):
    a = rng.standard_normal((1, 2, 9))
    w = rng.standard_normal((3, 2, 3))
    ya = K.conv1d(Tensor(a), Tensor(w), 2).data
    b = rng.standard_normal(ya.shape)
    back = K.conv_transpose1d(Tensor(b), Tensor(w), 2).data
    lhs, rhs = np.sum(ya * b), np.sum(a * back)
    assert abs(lhs - rhs) / abs(lhs) <= 1e-10


def test_gru_zero_params_zero_output():
    H, D = 4, 3
    z = lambda *s: Tensor(np.zeros(s))
    out = K.gru_cell(Tensor(np.ones((2, D))), z(2, H), z(3 * H, D), z(3 * H, H), z(3 * H), z(3 * H))
    assert np.array_equal(out.data, np.zeros((2, H)))


def test_gru_saturated_update_gate_keeps_state(rng):
    H, D = 5, 3
    h = np.tanh(rng.standard_normal((2, H)))
    b_ih = np.zeros(3 * H)
    b_ih[H:2 * H] = 50.0
    out = K.gru_cell(Tensor(rng.standard_normal((2, D))), Tensor(h), Tensor(rng.standard_normal((3 * H, D))),
                     Tensor(rng.standard_normal((3 * H, H))), Tensor(b_ih), Tensor(np.zeros(3 * H)))
    assert np.max(np.abs(out.data - h)) <= 1e-3


@given(st.integers(0, 2**31 - 1))
def test_gru_output_bounded(seed):
    rng = make_rng(seed)
    H, D = 4, 3
    h = np.tanh(rng.standard_normal((3, H)))
    out = K.gru_cell(*(Tensor(a) for a in (3 * rng.standard_normal((3, D)), h, rng.standard_normal((3 * H, D)),
                                           rng.standard_normal((3 * H, H)), rng.standard_normal(3 * H),
                                           rng.standard_normal(3 * H))))
    assert np.all(np.abs(out.data) < 1.0)


def test_gru_sequence_matches_chained_cells(rng):
    N, L, D, H = 2, 6, 3, 4
    x = rng.standard_normal((N, L, D))
    ws = [rng.standard_normal(s) for s in ((3 * H, D), (3 * H, H), (3 * H,), (3 * H,))]
    seq = K.gru_sequence(Tensor(x), *map(Tensor, ws)).data
    h = Tensor(np.zeros((N, H)))
    for t in range(L):
        h = K.gru_cell(Tensor(x[:, t]), h, *map(Tensor, ws))
        assert rel_err(seq[:, t], h.data) < 1e-14


def test_softmax_examples():
    assert np.allclose(K.softmax(Tensor(np.zeros(4))).data, 0.25, atol=0)
    s = K.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 1.0 and s[1] < 1e-300


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_softmax_rows_sum_to_one(seed, scale):
    x = scale * make_rng(seed).standard_normal((5, 7))
    s = K.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(axis=-1) - 1.0)) <= 1e-12


def test_relu_values():
    assert K.relu(Tensor([-3.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_dropout_eval_identity_and_p_validation(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    assert K.dropout(x, 0.3, training=False) is x
    for p in (-0.1, 1.0, 1.5):
        with pytest.raises(KernelConfigError):
            K.dropout(x, p, training=False)


def test_dropout_rate_and_scaling():
    x = Tensor(np.ones((200, 500)))
    y = K.dropout(x, 0.3, True, make_rng(0)).data
    kept = y != 0
    assert abs(kept.mean() - 0.7) < 0.01
    assert np.allclose(y[kept], 1 / 0.7)


def test_layer_norm_moments(rng):
    x = Tensor(5 + 3 * rng.standard_normal((6, 32)))
    y = K.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-10
    assert np.max(np.abs(y.var(axis=-1) - 1)) <= 1e-6


# -- backward plumbing ------------------------------------------------------------

def test_linear_loss_grad_is_input(rng):
    x = rng.standard_normal(5)
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    (w * Tensor(x)).sum().backward()
    assert np.array_equal(w.grad, x)


def test_backward_accumulates_and_fanout(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    loss = (w * w + w).sum()
    loss.backward()
    g1 = w.grad.copy()
    assert np.allclose(g1, 2 * w.data + 1)
    loss.backward()
    assert np.allclose(w.grad, 2 * g1)


def test_disconnected_grad_is_none(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    other = Tensor(rng.standard_normal(3), requires_grad=True)
    (w * 2.0).sum().backward()
    assert other.grad is None


def test_non_scalar_backward_raises(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_no_grad_records_no_tape(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    with K.no_grad():
        y = w * 2.0
    assert not y.requires_grad and y.is_leaf


def test_topological_order_visits_each_node_once(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    a = w * 2.0
    b = a + a
    c = b * a
    order = K.topological_order(c.sum())
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_kernel_determinism():
    def run():
        rng = make_rng(7, 1)
        x = Tensor(rng.standard_normal((2, 3, 40)))
        w = Tensor(rng.standard_normal((4, 3, 5)))
        y = K.dropout(K.relu(K.conv1d(x, w, 2)), 0.3, True, make_rng(7, 2))
        return y.data.tobytes()

    assert run() == run()


def test_make_rng_is_keyed():
    a = make_rng(1, 2, 3).random(4)
    assert np.array_equal(a, make_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, make_rng(1, 2, 4).random(4))


# -- finite-difference checks (double precision, eps 1e-5) ---------------------------

GRAD_TOL = 1e-4


def _weighted(out: Tensor, rng) -> Tensor:
    """Project to a scalar with fixed random weights so every output entry matters."""
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def test_grad_matmul_3x4_4x2(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    r = make_rng(9)
    wts = Tensor(r.standard_normal((3, 2)))
    assert gradcheck(lambda: (K.matmul(a, b) * wts).sum(), [a, b]) <= 1e-6


ELEMENTWISE = {
    "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (K.exp(b) + 1.0), "log": lambda a, b: K.log(K.exp(a) + 0.5),
    "exp": lambda a, b: K.exp(a), "sqrt": lambda a, b: K.sqrt(a * a + 1.0), "sigmoid": lambda a, b: K.sigmoid(a),
    "tanh": lambda a, b: K.tanh(a), "relu": lambda a, b: K.relu(a), "clip": lambda a, b: K.clip(a, -0.5, 0.5),
    "broadcast_add": lambda a, b: a + b[0:1],
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_grad_elementwise(name):
    r = make_rng(3)
    a, b = param(r, 3, 4), param(r, 3, 4)
    if name in ("relu", "clip"):
        # keep entries away from the kinks at 0 and +-0.5
        a.data = np.array([[-1.2, -0.3, 0.2, 0.9], [0.35, -0.7, 1.5, -0.1], [0.25, -2.0, 0.65, -0.4]])
    f = ELEMENTWISE[name]
    assert gradcheck(lambda: _weighted(f(a, b), make_rng(4)), [a, b]) <= GRAD_TOL


SHAPE_OPS = {
    "sum_axis": lambda a: K.tsum(a, axis=1, keepdims=True),
    "mean": lambda a: K.tmean(a, axis=0),
    "reshape": lambda a: K.reshape(a, (4, 3)),
    "transpose": lambda a: K.transpose(a, (1, 0)),
    "getitem": lambda a: a[1:, ::2],
    "pad": lambda a: K.pad(a, [(1, 0), (0, 2)]),
    "concat": lambda a: K.concat([a, a * 2.0], axis=1),
}


@pytest.mark.parametrize("name", sorted(SHAPE_OPS))
def test_grad_shape_ops(name):
    a = param(make_rng(5), 3, 4)
    assert gradcheck(lambda: _weighted(SHAPE_OPS[name](a), make_rng(6)), [a]) <= GRAD_TOL


def test_grad_batched_matmul_broadcast():
    r = make_rng(8)
    a, b = param(r, 2, 3, 4), param(r, 4, 5)
    assert gradcheck(lambda: _weighted(K.matmul(a, b), make_rng(1)), [a, b]) <= GRAD_TOL


def test_grad_linear():
    r = make_rng(10)
    x, w, b = param(r, 2, 3, 4), param(r, 5, 4), param(r, 5)
    assert gradcheck(lambda: _weighted(K.linear(x, w, b), make_rng(2)), [x, w, b]) <= GRAD_TOL


@pytest.mark.parametrize("stride", [1, 3, 8])
def test_grad_conv1d(stride):
    r = make_rng(11)
    x, w = param(r, 2, 2, 30), param(r, 3, 2, 5)
    assert gradcheck(lambda: _weighted(K.conv1d(x, w, stride), make_rng(3)), [x, w]) <= GRAD_TOL


def test_grad_conv3d_strided_padded():
    r = make_rng(12)
    x, w = param(r, 1, 2, 3, 6, 6), param(r, 2, 2, 3, 3, 3)
    f = lambda: _weighted(K.conv(x, w, (1, 2, 2), (1, 1, 1)), make_rng(4))
    assert gradcheck(f, [x, w]) <= GRAD_TOL


def test_grad_conv_transpose1d():
    r = make_rng(13)
    x, w = param(r, 2, 3, 6), param(r, 3, 2, 5)
    assert gradcheck(lambda: _weighted(K.conv_transpose1d(x, w, 2), make_rng(5)), [x, w]) <= GRAD_TOL


def test_grad_gru_cell():
    r = make_rng(14)
    H, D = 3, 2
    ts = [param(r, 2, D), param(r, 2, H, scale=0.5), param(r, 3 * H, D), param(r, 3 * H, H), param(r, 3 * H),
          param(r, 3 * H)]
    assert gradcheck(lambda: K.gru_cell(*ts).sum(), ts) <= 1e-5


def test_grad_gru_sequence():
    r = make_rng(15)
    H, D = 3, 2
    ts = [param(r, 2, 5, D), param(r, 3 * H, D), param(r, 3 * H, H), param(r, 3 * H), param(r, 3 * H)]
    assert gradcheck(lambda: _weighted(K.gru_sequence(*ts), make_rng(6)), ts) <= GRAD_TOL


def test_grad_softmax():
    x = param(make_rng(16), 3, 5)
    assert gradcheck(lambda: _weighted(K.softmax(x, axis=-1), make_rng(7)), [x]) <= 1e-6


def test_grad_layer_norm():
    r = make_rng(17)
    x, g, b = param(r, 2, 3, 6), param(r, 6), param(r, 6)
    assert gradcheck(lambda: _weighted(K.layer_norm(x, g, b), make_rng(8)), [x, g, b]) <= GRAD_TOL


def test_grad_dropout_fixed_mask():
    x = param(make_rng(18), 4, 5)
    assert gradcheck(lambda: _weighted(K.dropout(x, 0.3, True, make_rng(0)), make_rng(9)), [x]) <= GRAD_TOL


@pytest.mark.parametrize("with_bias", [False, True])
def test_grad_attention(with_bias):
    r = make_rng(19)
    q, k, v = param(r, 2, 2, 5, 3), param(r, 2, 2, 5, 3), param(r, 2, 2, 5, 3)
    bias = param(r, 2, 2, 5)
    ts = [q, k, v] + ([bias] if with_bias else [])
    f = lambda: _weighted(K.attention(q, k, v, bias if with_bias else None), make_rng(10))
    assert gradcheck(f, ts) <= GRAD_TOL


def test_fused_attention_matches_composed(rng):
    q, k, v = (rng.standard_normal((2, 3, 7, 4)) for _ in range(3))
    bias = rng.standard_normal((2, 3, 7))
    out, a = K.attention(Tensor(q), Tensor(k), Tensor(v), Tensor(bias), return_weights=True)
    s = q @ np.swapaxes(k, -1, -2) / 2.0 + bias[..., None, :]
    ref_a = np.exp(s - s.max(-1, keepdims=True))
    ref_a /= ref_a.sum(-1, keepdims=True)
    assert rel_err(a, ref_a) < 1e-13
    assert rel_err(out.data, ref_a @ v) < 1e-13


def test_attention_rejects_non_finite(rng):
    q = rng.standard_normal((1, 1, 3, 2))
    q[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        K.attention(Tensor(q), Tensor(q), Tensor(q))


def test_gradcheck_detects_wrong_gradient():
    x = param(make_rng(20), 4)
    bad = lambda: Tensor.from_op(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square").sum()
    assert gradcheck(bad, [x]) > 0.1
