import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peft_forge import autodiff as ad
from peft_forge.autodiff import Tensor
from peft_forge.errors import ContractError, NumericError, ShapeError

from conftest import fd_grad, rel_err


def T(x, trainable=True):
    return Tensor(x, trainable=trainable)


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(T(np.eye(2)), T(m)).data, m)


def test_matmul_forced_arithmetic():
    out = ad.matmul(T([[1, 2], [3, 4]]), T([[0], [1]]))
    assert np.array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 2))))


def test_matmul_grad_matches_fd(f64, rng):
    a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    f = lambda: ad.sum(ad.matmul(a, b) * w)
    ad.backward(f())
    assert rel_err(a.grad, fd_grad(f, a)) < 1e-6
    assert rel_err(b.grad, fd_grad(f, b)) < 1e-6


# -- kron ----------------------------------------------------------------------


def test_kron_identity_block_diagonal(rng):
    b = rng.normal(size=(2, 3))
    out = ad.kron(T(np.eye(2)), T(b)).data
    expected = np.zeros((4, 6))
    expected[:2, :3] = b
    expected[2:, 3:] = b
    assert np.array_equal(out, expected.astype(np.float32))


def test_kron_forced_arithmetic():
    out = ad.kron(T([[1, 2], [3, 4]]), T([[0, 1], [1, 0]])).data
    assert np.array_equal(out, [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]])


def test_kron_grad_of_sum_is_sum_of_other_factor(f64, rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(3, 2)))
    f = lambda: ad.sum(ad.kron(a, b))
    ad.backward(f())
    assert np.allclose(a.grad, b.data.sum())
    assert np.allclose(fd_grad(f, a), b.data.sum(), atol=1e-8)
    assert rel_err(b.grad, fd_grad(f, b)) < 1e-8


def test_kron_rejects_non_matrix():
    with pytest.raises(ShapeError):
        ad.kron(T(np.ones(3)), T(np.ones((2, 2))))


# -- row_scale --------------------------------------------------------------------


def test_row_scale_ones_is_identity_bitwise(f64, rng):
    x = T(rng.normal(size=(5, 7)))
    out = ad.row_scale(x, T(np.ones((5, 1))))
    assert out.data.tobytes() == x.data.tobytes()


def test_row_scale_forced_arithmetic():
    out = ad.row_scale(T([[1, 2], [3, 4]]), T([[2], [0.5]]))
    assert np.array_equal(out.data, [[2, 4], [1.5, 2]])


def test_row_scale_grads(f64, rng):
    x, s = T(rng.normal(size=(4, 3))), T(rng.normal(size=(4, 1)))
    w = rng.normal(size=(4, 3))
    f = lambda: ad.sum(ad.row_scale(x, s) * w)
    ad.backward(f())
    assert rel_err(s.grad, fd_grad(f, s)) < 1e-6
    assert rel_err(x.grad, fd_grad(f, x)) < 1e-6
    assert np.allclose(s.grad[:, 0], (w * x.data).sum(axis=1))


def test_row_scale_row_mismatch():
    with pytest.raises(ShapeError):
        ad.row_scale(T(np.ones((3, 2))), T(np.ones((2, 1))))


# -- softmax -------------------------------------------------------------------------


def test_softmax_uniform_row():
    out = ad.softmax_rows(T([[0.0, 0.0, 0.0]])).data
    assert np.allclose(out, 1 / 3)


def test_softmax_stable_for_large_logits():
    out = ad.softmax_rows(T([[1000.0, 0.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-30


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax_rows(T([[np.nan, 1.0]]))


def test_softmax_jvp(f64, rng):
    x = T(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    f = lambda: ad.sum(ad.softmax_rows(x) * w)
    ad.backward(f())
    assert rel_err(x.grad, fd_grad(f, x)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(1.0, 1e4), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(m, n, scale, seed):
    x = np.random.default_rng(seed).uniform(-scale, scale, size=(m, n))
    out = ad.softmax_rows(Tensor(x)).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# -- other primitives ---------------------------------------------------------------------


def test_concat_rows_preserves_rows(rng):
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(5, 3)))
    out = ad.concat_rows(a, b)
    assert out.shape == (7, 3)
    assert np.array_equal(out.data[:2], a.data) and np.array_equal(out.data[2:], b.data)
    assert np.array_equal(out[:2].data, a.data) and np.array_equal(out[2:].data, b.data)


def test_concat_rows_width_mismatch():
    with pytest.raises(ShapeError):
        ad.concat_rows(T(np.ones((2, 3))), T(np.ones((2, 4))))


def test_cross_entropy_limit():
    logits = np.zeros((1, 4))
    logits[0, 2] = 20.0
    assert ad.cross_entropy_from_logits(T(logits), [2]).item() < 1e-3


def test_cross_entropy_ignores_padding(f64, rng):
    logits = T(rng.normal(size=(2, 3, 5)))
    targets = np.array([[1, 2, 0], [3, 0, 0]])
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    loss = ad.cross_entropy_from_logits(logits, targets, mask)
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    expected = -(lp[0, 0, 1] + lp[0, 1, 2] + lp[1, 0, 3]) / 3
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    ad.backward(loss)
    assert np.all(logits.grad[~mask] == 0)


def test_cross_entropy_all_padding():
    with pytest.raises(ContractError):
        ad.cross_entropy_from_logits(T(np.zeros((1, 2, 3))), [[0, 0]], [[False, False]])


def test_rms_norm_unit_rms(rng):
    x = T(rng.normal(size=(6, 16)) * 3.0)
    out = ad.rms_norm(x, T(np.ones(16))).data
    assert np.allclose(np.sqrt((out.astype(np.float64) ** 2).mean(axis=-1)), 1.0, atol=1e-5)


def test_embedding_lookup_and_scatter_add(f64):
    table = T(np.arange(12.0).reshape(4, 3))
    out = ad.embedding_lookup(table, np.array([[1, 1], [3, 0]]))
    assert np.array_equal(out.data[0, 0], [3, 4, 5])
    ad.backward(ad.sum(out))
    assert np.array_equal(table.grad[:, 0], [1, 2, 0, 1])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding_lookup(T(np.zeros((4, 2))), np.array([4]))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(T(np.ones((2, 3))), T(np.ones((3, 2))))


# -- backward ---------------------------------------------------------------------------


def test_backward_sum_of_squares():
    x = T([1.0, -2.0, 3.0])
    ad.backward(ad.sum(x * x))
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])


def test_frozen_tensor_gets_no_grad():
    x, w = T([1.0, 2.0]), Tensor([3.0, 4.0])
    ad.backward(ad.sum(x * w))
    assert w.grad is None and x.grad is not None


def test_backward_accumulates():
    x = T([1.0, 2.0])
    ad.backward(ad.sum(x * 3.0))
    ad.backward(ad.sum(x * 3.0))
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_non_scalar():
    with pytest.raises(ContractError):
        ad.backward(T([1.0, 2.0]) * 2.0)


def _two_layer(rng):
    w1, w2 = T(rng.normal(size=(4, 5))), T(rng.normal(size=(5, 1)))
    x = Tensor(rng.normal(size=(3, 4)))
    return (lambda: ad.sum(ad.relu(x @ w1) @ w2 * 0.5)), [w1, w2]


def test_two_layer_chain_fp32():
    f, params = _two_layer(np.random.default_rng(0))
    ad.backward(f())
    with ad.precision("float64"):
        ref_f, ref_params = _two_layer(np.random.default_rng(0))
        for p in ref_params:
            fd = fd_grad(ref_f, p)
            got = params[ref_params.index(p)].grad
            assert rel_err(got, fd) < 1e-4


def test_two_layer_chain_fp64(f64):
    f, params = _two_layer(np.random.default_rng(0))
    ad.backward(f())
    for p in params:
        assert rel_err(p.grad, fd_grad(f, p)) < 1e-7


def test_graph_topological_order(rng):
    a = T(rng.normal(size=(2, 2)))
    b = a @ a
    c = b + a
    graph = ad.ComputationGraph(ad.sum(c))
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for p in n._parents:
            if p._needs_grad:
                assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(graph.nodes)


def test_no_grad_records_nothing():
    x = T([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# -- grad_check ---------------------------------------------------------------------------------


def test_grad_check_quadratic(f64, rng):
    x = T(rng.normal(size=(3, 3)))
    assert ad.grad_check(lambda: ad.sum(x * x), [x]) < 1e-9


def test_grad_check_attention_block(f64, rng):
    q, k, v = (T(rng.normal(size=(4, 3))) for _ in range(3))
    f = lambda: ad.sum(ad.softmax_rows(q @ k.T) @ v * Tensor(rng.normal(size=(4, 3))))
    w = rng.normal(size=(4, 3))
    f = lambda: ad.sum((ad.softmax_rows(q @ k.T) @ v) * w)
    assert ad.grad_check(f, [q, k, v], eps=1e-5) < 1e-5


def test_grad_check_detects_corrupted_rule(f64, rng, monkeypatch):
    real = ad.relu

    def bad_relu(x):
        out = real(x)
        orig = out._backward
        out._backward = lambda g: tuple(-t for t in orig(g))
        return out

    x = T(rng.normal(size=(3, 4)) + 0.5)
    w = rng.normal(size=(3, 4))
    err = ad.grad_check(lambda: ad.sum(bad_relu(x) * w), [x])
    assert err > 1e-2


def test_grad_check_non_finite(f64):
    x = T([1.0])
    with pytest.raises(NumericError):
        ad.grad_check(lambda: ad.sum(x * np.inf), [x])


# -- randomized property: every primitive vs finite differences --------------------------------

PRIMITIVES = {
    "add": lambda a, b, s: ad.add(a, b),
    "sub": lambda a, b, s: ad.sub(a, b),
    "mul": lambda a, b, s: ad.mul(a, b),
    "matmul": lambda a, b, s: ad.matmul(a, ad.transpose(b)),
    "relu": lambda a, b, s: ad.relu(a),
    "sigmoid": lambda a, b, s: ad.sigmoid(a),
    "softmax": lambda a, b, s: ad.softmax_rows(a),
    "rms_norm": lambda a, b, s: ad.rms_norm(a, b[0]),
    "concat_rows": lambda a, b, s: ad.concat_rows(a, b),
    "row_scale": lambda a, b, s: ad.row_scale(a, s),
    "kron": lambda a, b, s: ad.kron(a, b),
    "mean": lambda a, b, s: ad.mean(a, axis=0, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 8), n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_random_shapes(name, m, n, seed):
    if name == "kron":
        m, n = min(m, 3), min(n, 3)
    if name == "rms_norm":
        n = max(n, 2)  # width 1 is checked against the closed form below
    rng = np.random.default_rng(seed)
    with ad.precision("float64"):
        a = T(rng.normal(size=(m, n)) + 0.1)
        b = T(rng.normal(size=(m, n)))
        s = T(rng.normal(size=(m, 1)))
        out_shape = PRIMITIVES[name](a, b, s).shape
        w = rng.normal(size=out_shape)
        f = lambda: ad.sum(PRIMITIVES[name](a, b, s) * w)
        params = [a, s] if name == "row_scale" else [a, b]
        err = ad.grad_check(f, params, eps=1e-5)
    assert err < 1e-5


@pytest.mark.parametrize("x0", [-2.0, -0.01, 0.003, 0.7])
def test_rms_norm_width_one_closed_form(f64, x0):
    # x / sqrt(x^2 + eps) saturates; its derivative eps / (x^2 + eps)^1.5 is too small for finite differences
    x, gain = T([[x0]]), T([1.7])
    ad.backward(ad.sum(ad.rms_norm(x, gain, eps=1e-6)))
    expected = 1.7 * 1e-6 / (x0 * x0 + 1e-6) ** 1.5
    assert x.grad[0, 0] == pytest.approx(expected, rel=1e-8)
    assert gain.grad[0] == pytest.approx(x0 / np.sqrt(x0 * x0 + 1e-6), rel=1e-12)


def test_embedding_and_cross_entropy_gradients(f64, rng):
    table = T(rng.normal(size=(6, 4)))
    ids = np.array([[0, 3, 3], [5, 1, 2]])
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    proj = T(rng.normal(size=(4, 6)))
    f = lambda: ad.cross_entropy_from_logits(ad.embedding_lookup(table, ids) @ proj, [[1, 2, 0], [4, 4, 5]], mask)
    assert ad.grad_check(f, [table, proj]) < 1e-5
