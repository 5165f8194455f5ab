import numpy as np
import pytest

from plasm.gradcheck import check_gradients
from plasm.tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    leaky_relu,
    masked_fill,
    matmul,
    mul,
    no_grad,
    permute,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    set_debug,
    slice_,
    softmax,
    sqrt,
    square,
    sub,
)


def f64(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_leaky_relu_slope():
    out = leaky_relu(Tensor(np.array([-1.0, 2.0])))
    assert out.data[0] == pytest.approx(-0.01)
    assert out.data[1] == 2.0


def test_add_zeros_identity(rng):
    x = f64(rng, 3, 4, grad=False)
    assert np.array_equal(add(x, Tensor(np.zeros((3, 4)))).data, x.data)


def test_mul_gradient_scalar_case():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(3.0), requires_grad=True)
    mul(a, b).backward()
    assert a.grad == pytest.approx(3.0, abs=1e-12)
    assert b.grad == pytest.approx(2.0, abs=1e-12)
    eps = 1e-6
    fd = ((2.0 + eps) * 3.0 - (2.0 - eps) * 3.0) / (2 * eps)
    assert abs(a.grad - fd) < 1e-6


def test_broadcast_gradients_sum_over_expanded_axes(rng):
    a = f64(rng, 2, 3, 4)
    b = f64(rng, 4)
    errs = check_gradients(lambda a, b: mul(add(a, b), b), [a, b])
    assert max(errs.values()) < 1e-6


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_matmul_hand_case():
    out = matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[1.0], [1.0]])))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_identity(rng):
    x = f64(rng, 4, 3, grad=False)
    assert np.array_equal(matmul(Tensor(np.eye(4)), x).data, x.data)


def test_matmul_gradient(rng):
    a, b = f64(rng, 4, 5), f64(rng, 5, 3)
    errs = check_gradients(matmul, [a, b])
    assert max(errs.values()) < 1e-6


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_examples():
    assert np.allclose(softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    out = softmax(Tensor(np.array([0.0, -np.inf]))).data
    assert out[0] == 1.0 and out[1] == 0.0


def test_softmax_all_masked_row_is_zero():
    out = softmax(Tensor(np.full((2, 3), -np.inf)), axis=1).data
    assert np.array_equal(out, np.zeros((2, 3)))


def test_softmax_sums_to_one(rng):
    out = softmax(Tensor(rng.standard_normal(7))).data
    assert abs(out.sum() - 1) < 1e-6
    assert np.all((out >= 0) & (out <= 1))


def test_softmax_gradient(rng):
    x = f64(rng, 3, 5)
    assert max(check_gradients(lambda x: softmax(x, axis=1), [x]).values()) < 1e-6


def test_masked_softmax_gradient_flows_only_to_unmasked(rng):
    x = f64(rng, 2, 4)
    mask = np.array([[True, False, False, True], [False, False, False, False]])
    errs = check_gradients(lambda x: softmax(masked_fill(x, mask, -np.inf), axis=1), [x])
    assert max(errs.values()) < 1e-6
    x.grad = None
    (softmax(masked_fill(x, mask, -np.inf), axis=1) * Tensor(rng.standard_normal((2, 4)))).sum().backward()
    assert np.all(x.grad[mask] == 0)


def test_reductions(rng):
    c = Tensor(np.full((3, 4), 2.5))
    assert reduce_mean(c).data == 2.5
    x = f64(rng, 3, 4, 5)
    for fn in (lambda t: reduce_sum(t, axis=1), lambda t: reduce_mean(t, axis=(0, 2)),
               lambda t: reduce_max(t, axis=2)):
        assert max(check_gradients(fn, [x]).values()) < 1e-6


def test_reshape_preserves_order(rng):
    x = Tensor(rng.standard_normal((2, 10, 1, 64, 64)).astype(np.float32))
    y = reshape(x, (20, 1, 64, 64))
    assert np.array_equal(y.data.reshape(-1), x.data.reshape(-1))


def test_concat_and_slice(rng):
    a, b = f64(rng, 1, 3), f64(rng, 1, 3)
    assert concat([a, b], axis=0).shape == (2, 3)
    assert max(check_gradients(lambda a, b: concat([a, b], axis=0), [a, b]).values()) < 1e-6
    x = f64(rng, 4, 5)
    assert max(check_gradients(lambda x: slice_(x, (slice(1, 3), slice(None, None, 2))), [x]).values()) < 1e-6


def test_permute_gradient(rng):
    x = f64(rng, 2, 3, 4)
    assert max(check_gradients(lambda x: permute(x, (2, 0, 1)), [x]).values()) < 1e-6


def test_elementwise_gradients(rng):
    a, b = f64(rng, 3, 4), f64(rng, 3, 4)
    for fn in (add, sub, mul):
        assert max(check_gradients(fn, [a, b]).values()) < 1e-6
    assert max(check_gradients(lambda a: scale(a, -2.5), [a]).values()) < 1e-6
    assert max(check_gradients(square, [a]).values()) < 1e-6
    pos = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    assert max(check_gradients(sqrt, [pos]).values()) < 1e-6
    # keep clear of the kink at zero
    x = Tensor(np.where(np.abs(a.data) < 0.05, 0.3, a.data), requires_grad=True)
    assert max(check_gradients(leaky_relu, [x]).values()) < 1e-6


def test_backward_examples():
    w = Tensor(np.zeros(3), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, [1, 1, 1])
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    square(w).sum().backward()
    assert np.array_equal(w.grad, [2, 4])
    square(w).sum().backward()
    assert np.array_equal(w.grad, [4, 8])


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        scale(w, 2.0).backward()


def test_shared_subexpression_accumulates():
    w = Tensor(np.array([3.0]), requires_grad=True)
    y = mul(w, w)
    add(y, y).sum().backward()
    assert w.grad[0] == pytest.approx(12.0)


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = mul(w, w)
    assert not y.requires_grad and y._parents == ()


@pytest.mark.filterwarnings("ignore:invalid value")
def test_debug_mode_flags_nan():
    set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            sqrt(Tensor(np.array([-1.0])))
    finally:
        set_debug(False)


def test_float32_default_and_float64_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_ops_deterministic(rng):
    a = rng.standard_normal((64, 64)).astype(np.float32)
    out1 = softmax(matmul(Tensor(a), Tensor(a)), axis=1).data
    out2 = softmax(matmul(Tensor(a), Tensor(a)), axis=1).data
    assert out1.tobytes() == out2.tobytes()
