import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ndgrad import (
    AxisError,
    Graph,
    NonScalarRootError,
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    grad_check,
    log,
    losses,
    matmul,
    maxpool2,
    mul,
    per_sample_task_loss,
    reduce,
    relu,
    reshape,
    sigmoid,
    sub,
    tanh,
    upsample2,
)


def away_from_zero(rng, shape, low=0.2, high=1.5):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def test_ops_outside_graph_are_not_recorded():
    x = Tensor(np.ones(3), requires_grad=True)
    y = mul(x, 2.0)
    assert not y.requires_grad
    assert y.is_leaf


def test_backward_broadcast_add():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    with Graph() as tape:
        out = reduce("sum", mul(add(a, b), 2.0))
    tape.backward(out)
    assert_array_equal(a.grad, np.full((2, 3), 2.0))
    assert_array_equal(b.grad, np.full(3, 4.0))


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Graph() as tape:
            out = reduce("sum", mul(x, x))
        tape.backward(out)
    assert_allclose(x.grad, 2 * 2 * np.array([1.0, 2.0]))
    x.zero_grad()
    assert_array_equal(x.grad, np.zeros(2))


def test_shared_subexpression_gradients_add_up():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Graph() as tape:
        y = mul(x, x)
        out = add(y, y)
    tape.backward(out)
    assert x.grad == pytest.approx(12.0)


def test_nonscalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as tape:
        y = mul(x, 2.0)
    with pytest.raises(NonScalarRootError):
        tape.backward(y)


def test_shape_errors():
    with pytest.raises(ShapeMismatchError):
        add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeMismatchError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatchError):
        reshape(np.ones(6), (4, 2))
    with pytest.raises(AxisError):
        reduce("sum", np.ones((2, 2)), axis=2)
    with pytest.raises(ShapeMismatchError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)))
    with pytest.raises(ShapeMismatchError):
        maxpool2(np.ones((1, 1, 3, 4)))


def test_log_of_nonpositive_is_flagged_not_raised():
    out = log(np.array([1.0, -1.0]))
    assert out.domain_error
    assert np.isnan(out.data[1])
    assert not log(np.array([1.0])).domain_error


def test_grad_check_reports_nan_as_infinite():
    assert grad_check(lambda x: reduce("sum", log(x)), np.array([-1.0, 2.0])) == float("inf")


@pytest.mark.parametrize("kind", ["neg", "sigmoid", "exp", "tanh", "relu"])
def test_unary_gradients(kind, rng):
    for _ in range(5):
        point = away_from_zero(rng, (3, 4))
        assert grad_check(lambda x: reduce("sum", mul(elementwise(kind, x), x)), point) < 1e-4


def test_log_gradient(rng):
    point = rng.uniform(0.5, 2.0, size=(5,))
    assert grad_check(lambda x: reduce("sum", log(x)), point) < 1e-4


@pytest.mark.parametrize("op", [add, sub, mul, div])
def test_binary_gradients_with_broadcast(op, rng):
    other = Tensor(rng.uniform(0.5, 1.5, size=(4,)))
    point = rng.uniform(0.5, 1.5, size=(3, 4))
    assert grad_check(lambda x: reduce("sum", op(x, other)), point) < 1e-4
    assert grad_check(lambda y: reduce("sum", op(Tensor(point), y)), other.data) < 1e-4


def test_matmul_gradients(rng):
    b = Tensor(rng.normal(size=(4, 2)))
    a = rng.normal(size=(3, 4))
    assert grad_check(lambda x: reduce("sum", mul(matmul(x, b), matmul(x, b))), a) < 1e-4
    assert grad_check(lambda y: reduce("mean", matmul(Tensor(a), y)), b.data) < 1e-4


@pytest.mark.parametrize("kind,axis", [("sum", None), ("mean", None), ("max", None), ("sum", 0), ("mean", 1),
                                       ("max", 1)])
def test_reduce_gradients(kind, axis, rng):
    point = rng.normal(size=(4, 3))

    def fn(x):
        r = reduce(kind, x, axis=axis)
        return reduce("sum", mul(r, r))

    assert grad_check(fn, point) < 1e-4


def test_reduce_max_splits_gradient_between_ties():
    x = Tensor(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    with Graph() as tape:
        out = reduce("max", x)
    tape.backward(out)
    assert_allclose(x.grad, [0.0, 0.5, 0.5])


def test_reshape_and_concat_gradients(rng):
    other = Tensor(rng.normal(size=(2, 2)))
    point = rng.normal(size=(2, 3))

    def fn(x):
        joined = concat([x, other], axis=1)
        flat = reshape(joined, (10,))
        return reduce("sum", mul(flat, flat))

    assert grad_check(fn, point) < 1e-4


def test_conv2d_gradients(rng):
    kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
    point = rng.normal(size=(2, 2, 5, 4))
    weights = Tensor(rng.normal(size=(2, 3, 5, 4)))
    assert grad_check(lambda x: reduce("sum", mul(conv2d(x, kernel), weights)), point) < 1e-4
    assert grad_check(lambda k: reduce("sum", mul(conv2d(Tensor(point), k), weights)), kernel.data) < 1e-4


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    k = rng.normal(size=(1, 1, 3, 3))
    out = conv2d(x, k).data
    padded = np.pad(x[0, 0], 1)
    expected = np.array([[np.sum(padded[i:i + 3, j:j + 3] * k[0, 0]) for j in range(4)] for i in range(4)])
    assert_allclose(out[0, 0], expected)


def test_pool_and_upsample_gradients(rng):
    point = away_from_zero(rng, (2, 3, 4, 4))
    weights = Tensor(rng.normal(size=(2, 3, 2, 2)))
    assert grad_check(lambda x: reduce("sum", mul(maxpool2(x), weights)), point) < 1e-4
    up_weights = Tensor(rng.normal(size=(2, 3, 8, 8)))
    assert grad_check(lambda x: reduce("sum", mul(upsample2(x), up_weights)), point) < 1e-4


def test_upsample_then_pool_is_identity(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    assert_array_equal(maxpool2(upsample2(x)).data, x)


@pytest.mark.parametrize("trial", range(4))
def test_loss_gradients(trial):
    rng = np.random.default_rng(trial)
    logits = rng.normal(size=(4, 3))
    labels = Tensor(rng.integers(0, 3, size=4).astype(float))
    assert grad_check(lambda x: losses("softmax-cross-entropy", x, labels), logits) < 1e-4

    targets = Tensor((rng.random((4, 3)) > 0.5).astype(float))
    assert grad_check(lambda x: losses("binary-cross-entropy-with-logits", x, targets), logits) < 1e-4
    assert grad_check(lambda x: losses("mse", x, targets), logits) < 1e-4
    assert grad_check(lambda x: losses("soft-dice", sigmoid(x), targets), logits) < 1e-4

    pixels = rng.normal(size=(2, 1, 4, 4))
    mask = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(float))
    assert grad_check(lambda x: losses("pixelwise-bce-with-logits", x, mask), pixels) < 1e-4


def test_loss_values():
    assert losses("mse", np.array([1.0, 3.0]), np.array([0.0, 0.0])).item() == pytest.approx(5.0)
    uniform = losses("softmax-cross-entropy", np.zeros((2, 4)), np.array([0.0, 3.0])).item()
    assert uniform == pytest.approx(np.log(4.0))
    bce = losses("binary-cross-entropy-with-logits", np.zeros(3), np.ones(3)).item()
    assert bce == pytest.approx(np.log(2.0))
    perfect = losses("soft-dice", np.array([1.0, 0.0, 1.0]), np.array([1.0, 0.0, 1.0])).item()
    assert perfect == pytest.approx(0.0, abs=1e-6)


def test_bce_is_stable_for_large_logits():
    value = losses("binary-cross-entropy-with-logits", np.array([1000.0, -1000.0]), np.array([0.0, 1.0])).item()
    assert value == pytest.approx(1000.0)


def test_unknown_loss_and_shape_mismatch():
    with pytest.raises(ValueError):
        losses("hinge", np.zeros(2), np.zeros(2))
    with pytest.raises(ShapeMismatchError):
        losses("mse", np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeMismatchError):
        losses("pixelwise-bce-with-logits", np.zeros((2, 4)), np.zeros((2, 4)))


def test_per_sample_task_loss_averages_to_batch_loss(rng):
    logits = rng.normal(size=(5, 2))
    labels = rng.integers(0, 2, size=5)
    per_sample = per_sample_task_loss("classification", logits, labels)
    assert per_sample.shape == (5,)
    assert per_sample.mean() == pytest.approx(losses("softmax-cross-entropy", logits, labels.astype(float)).item())

    pixels = rng.normal(size=(3, 1, 4, 4))
    mask = (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
    per_image = per_sample_task_loss("segmentation", pixels, mask)
    assert per_image.mean() == pytest.approx(losses("pixelwise-bce-with-logits", pixels, mask).item())


def test_conv2d_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    xt = torch.tensor(x, requires_grad=True)
    kt = torch.tensor(k, requires_grad=True)
    torch.nn.functional.conv2d(xt, kt, padding=1).square().sum().backward()

    xn, kn = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
    with Graph() as tape:
        out = conv2d(xn, kn)
        loss = reduce("sum", mul(out, out))
    tape.backward(loss)
    assert_allclose(xn.grad, xt.grad.numpy(), rtol=1e-9, atol=1e-9)
    assert_allclose(kn.grad, kt.grad.numpy(), rtol=1e-9, atol=1e-9)


def test_sigmoid_and_tanh_values():
    assert_allclose(sigmoid(np.array([0.0])).data, [0.5])
    assert_allclose(tanh(np.array([0.0])).data, [0.0])
    assert_allclose(exp(np.array([0.0])).data, [1.0])
    assert_allclose(relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
