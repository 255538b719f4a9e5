import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arcnet import numerics as nx
from arcnet.numerics import Tape, Tensor
from oracles import central_diff, conv2d_loops, matmul_loops


def T64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# --- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    out = nx.conv2d(T64([[[1, 2, 3]]]), T64(np.ones((1, 1, 1, 1))), T64([0]), (1, 1))
    np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])


def test_conv_box_filter_stride():
    out = nx.conv2d(T64(np.ones((1, 1, 4))), T64(np.ones((1, 1, 1, 2))), T64([0]), (1, 2))
    np.testing.assert_array_equal(out.data, [[[2, 2]]])


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((6, 6, 16))
    k = rng.standard_normal((4, 6, 3, 5))
    b = rng.standard_normal(4)
    out = nx.conv2d(T64(x), T64(k), T64(b), (3, 4))
    assert out.shape == (4, 2, 3)
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, (3, 4)), atol=1e-6)


def test_conv_float32_close_to_oracle(rng):
    x = rng.standard_normal((6, 6, 16))
    k = rng.standard_normal((4, 6, 3, 5))
    b = rng.standard_normal(4)
    out = nx.conv2d(Tensor(x), Tensor(k), Tensor(b), (3, 4))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, (3, 4)), atol=1e-4)


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 5, 11))
    k, b = rng.standard_normal((4, 2, 2, 3)), rng.standard_normal(4)
    batched = nx.conv2d(T64(x), T64(k), T64(b), (1, 2)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], nx.conv2d(T64(x[i]), T64(k), T64(b), (1, 2)).data)


def test_conv_channel_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.conv2d(T64(np.zeros((2, 4, 4))), T64(np.zeros((1, 3, 2, 2))), T64([0]), (1, 1))


def test_conv_kernel_larger_than_input():
    with pytest.raises(nx.DimensionError):
        nx.conv2d(T64(np.zeros((1, 2, 2))), T64(np.zeros((1, 1, 3, 1))), T64([0]), (1, 1))


@settings(max_examples=60, deadline=None)
@given(H=st.integers(1, 12), W=st.integers(1, 30), kh=st.integers(1, 4), kw=st.integers(1, 9),
       sh=st.integers(1, 4), sw=st.integers(1, 5))
def test_conv_output_shape_rule(H, W, kh, kw, sh, sw):
    if kh > H or kw > W:
        return
    out = nx.conv2d(T64(np.zeros((2, H, W))), T64(np.zeros((3, 2, kh, kw))), T64(np.zeros(3)), (sh, sw))
    assert out.shape == (3, (H - kh) // sh + 1, (W - kw) // sw + 1)


# --- conv2d backward ----------------------------------------------------------

def test_conv_backward_identity():
    x = T64([[[1, 2, 3]]])
    with Tape() as tape:
        out = nx.conv2d(x, T64(np.ones((1, 1, 1, 1))), T64([0]), (1, 1))
    (gx,) = tape.gradient(out, [x], seed=np.ones((1, 1, 3)))
    np.testing.assert_array_equal(gx, [[[1, 1, 1]]])


def test_conv_backward_zero_grad(rng):
    x, k = rng.standard_normal((1, 2, 5, 9)), rng.standard_normal((3, 2, 2, 4))
    gx, gk, gb = nx.conv2d_backward(np.zeros((1, 3, 4, 3)), (x, k, (1, 2)))
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv_backward_requires_saved():
    with pytest.raises(ValueError):
        nx.conv2d_backward(np.zeros((1, 1, 1, 1)), None)


def test_conv_backward_shape_check(rng):
    x, k = rng.standard_normal((1, 2, 5, 9)), rng.standard_normal((3, 2, 2, 4))
    with pytest.raises(nx.DimensionError):
        nx.conv2d_backward(np.zeros((1, 3, 4, 4)), (x, k, (1, 2)))


def test_conv_backward_against_finite_differences(rng):
    x = rng.standard_normal((2, 3, 7, 11))
    k = rng.standard_normal((2, 3, 3, 4))
    b = rng.standard_normal(2)
    stride = (2, 3)
    g = rng.standard_normal((2, 2, 3, 3))
    gx, gk, gb = nx.conv2d_backward(g, (x, k, stride))

    def f_x(xx):
        return float((nx.conv2d(T64(xx), T64(k), T64(b), stride).data * g).sum())

    def f_k(kk):
        return float((nx.conv2d(T64(x), T64(kk), T64(b), stride).data * g).sum())

    def f_b(bb):
        return float((nx.conv2d(T64(x), T64(k), T64(bb), stride).data * g).sum())

    for analytic, numeric in ((gx, central_diff(f_x, x)), (gk, central_diff(f_k, k)), (gb, central_diff(f_b, b))):
        assert nx.relative_error(analytic, numeric) < 1e-4


# --- matmul -------------------------------------------------------------------

def test_matmul_identity(rng):
    a = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(nx.matmul(T64(np.eye(2)), T64(a)).data, a)


def test_matmul_hand_sum():
    np.testing.assert_array_equal(nx.matmul(T64([[1, 2], [3, 4]]), T64([[1], [1]])).data, [[3], [7]])


def test_matmul_oracle(rng):
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(nx.matmul(T64(a), T64(b)).data, matmul_loops(a, b), atol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(nx.DimensionError):
        nx.matmul(T64(np.zeros((2, 3))), T64(np.zeros((2, 3))))


# --- relu ---------------------------------------------------------------------

def test_relu_values_and_zero_subgradient():
    x = T64([-1.0, 0.0, 2.0])
    with Tape() as tape:
        y = nx.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    (g,) = tape.gradient(y, [x], seed=np.ones(3))
    np.testing.assert_array_equal(g, [0, 0, 1])


def test_relu_all_negative_passes_no_gradient(rng):
    x = T64(-rng.uniform(0.1, 2, (3, 4)))
    with Tape() as tape:
        y = nx.relu(x)
    assert not y.data.any()
    assert not tape.gradient(nx.sum_all(y), [x])[0].any()


# --- softmax ------------------------------------------------------------------

def test_softmax_uniform_and_analytic():
    np.testing.assert_allclose(nx.softmax_rows(T64(np.zeros((1, 4)))).data, [[0.25] * 4])
    np.testing.assert_allclose(nx.softmax_rows(T64([[0.0, np.log(3)]])).data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_extreme_logits_stable():
    b = np.array([[1000.0, -1000.0, 999.0], [-1000.0, -1000.0, -999.5]])
    p = nx.softmax_rows(Tensor(b)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    ref = np.exp(b - b.max(axis=1, keepdims=True))
    np.testing.assert_allclose(p, ref / ref.sum(axis=1, keepdims=True), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_row_properties(row, shift):
    b = np.array([row])
    p = nx.softmax_rows(T64(b)).data
    assert abs(p.sum() - 1) < 1e-6
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(nx.softmax_rows(T64(b + shift)).data, p, atol=1e-6)


def test_softmax_entries_strictly_inside_unit_interval(rng):
    p = nx.softmax_rows(T64(rng.uniform(-5, 5, (20, 6)))).data
    assert np.all((p > 0) & (p < 1))


# --- gradients of every op over many random instances ---------------------------

def _instances(make, n=100, seed=0):
    rng = np.random.default_rng(seed)
    return [make(rng) for _ in range(n)]


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * 0.01


def _unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


OP_FACTORIES = {
    "conv2d": lambda r: (lambda x, k, b: nx.conv2d(x, k, b, (2, 3)),
                         [r.standard_normal((1, 2, 5, 8)), r.standard_normal((2, 2, 2, 3)), r.standard_normal(2)]),
    "matmul": lambda r: (nx.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "relu": lambda r: (lambda x, w: nx.contract("ij,ij->ij", nx.relu(x), w),
                       [_away_from_zero(r, (3, 4)), r.standard_normal((3, 4))]),
    "softmax_rows": lambda r: (lambda b, w: nx.contract("ij,ij->ij", nx.softmax_rows(b), w),
                               [r.standard_normal((3, 4)) * 2, r.standard_normal((3, 4))]),
    # vectors kept at norm >= ~0.5: nearer the origin the 1e-3 central difference
    # itself is off by O(h^2/|v|^2); see test_squash_gradient_near_origin
    "squash": lambda r: (lambda v, w: nx.contract("ij,ij->ij", nx.squash(v), w),
                         [_unit_rows(r, (3, 5)) * r.uniform(0.5, 3, (3, 1)), r.standard_normal((3, 5))]),
    "norm": lambda r: (lambda v, w: nx.contract("i,i->i", nx.norm(v), w),
                       [r.standard_normal((4, 3)), r.standard_normal(4)]),
    "contract": lambda r: (lambda a, b: nx.contract("bij,bijd->bjd", a, b),
                           [r.standard_normal((2, 3, 2)), r.standard_normal((2, 3, 2, 4))]),
    "add_scale": lambda r: (lambda a, b: nx.add(nx.scale(a, 1.7), b),
                            [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "expand_transpose_reshape": lambda r: (
        lambda a, w: nx.contract("ij,ij->ij", nx.reshape(nx.transpose(nx.expand(a, 2), (1, 0, 2)), (3, 8)), w),
        [r.standard_normal((3, 4)), r.standard_normal((3, 8))]),
}


@pytest.mark.parametrize("op", sorted(OP_FACTORIES))
def test_op_gradients_random_instances(op):
    worst = 0.0
    for fn, inputs in _instances(OP_FACTORIES[op]):
        report = nx.grad_check(fn, inputs, tol=1e-4, step=1e-3)
        worst = max(worst, report.max_error)
    assert worst < 1e-4, f"{op}: worst relative error {worst:.2e}"


def test_squash_gradient_near_origin():
    worst = 0.0
    for fn, (v, w) in _instances(OP_FACTORIES["squash"], n=30, seed=1):
        report = nx.grad_check(fn, [v * 0.05, w], tol=1e-4, step=1e-6)
        worst = max(worst, report.max_error)
    assert worst < 1e-4


# --- grad_check itself ----------------------------------------------------------

def test_grad_check_linear_is_exact(rng):
    a = rng.standard_normal((3, 4))
    report = nx.grad_check(lambda x: nx.scale(x, 2.5), [a], tol=1e-10)
    assert report.passed and report.max_error < 1e-9


def test_grad_check_catches_corrupted_rule(rng):
    def bad_square(x):
        # backward rule off by a factor of 2
        return nx.record("bad_square", x.data ** 2, (x,), lambda g: (g * x.data,))

    report = nx.grad_check(bad_square, [rng.uniform(0.5, 1.5, (3,))], tol=1e-3)
    assert not report.passed
    assert report.max_error > 1e-3


def test_grad_check_reports_nonfinite_location():
    def blowup(x):
        with np.errstate(divide="ignore"):
            out = np.log(x.data * 0)
        return nx.record("log_zero", out, (x,), lambda g: (g,))

    with pytest.raises(nx.NonFiniteError) as info:
        nx.grad_check(blowup, [np.ones(2)])
    assert info.value.op == "log_zero"


def test_tape_gradient_of_reused_tensor():
    x = T64([1.0, 2.0])
    with Tape() as tape:
        y = nx.sum_all(nx.add(x, x))
    np.testing.assert_array_equal(tape.gradient(y, [x])[0], [2, 2])


def test_no_tape_no_recording():
    x = T64([1.0])
    with Tape() as tape:
        pass
    nx.relu(x)
    assert tape.entries == []
