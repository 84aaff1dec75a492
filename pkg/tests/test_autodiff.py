import numpy as np
import pytest

from routeflow import autodiff as ad
from routeflow.autodiff import Tensor, finite_diff_check, parameter, zero_grads


def fd_scalar(fn, w, eps=1e-6):
    """Plain central differences on a flat parameter vector."""
    out = np.zeros_like(w.value.reshape(-1))
    flat = w.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().value)
        flat[i] = orig - eps
        fm = float(fn().value)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(w.value.shape)


@pytest.mark.parametrize(
    "build",
    [
        lambda w: (w * 3.0 + 1.0).sum(),
        lambda w: (w * w).sum(),
        lambda w: (w / (w + 10.0)).sum(),
        lambda w: ad.exp(w).sum(),
        lambda w: ad.log(w + 10.0).sum(),
        lambda w: ad.sqrt(w + 10.0).sum(),
        lambda w: ad.sigmoid(w).sum(),
        lambda w: ad.silu(w).sum(),
        lambda w: (w ** 3.0).sum(),
        lambda w: ad.tmean(w),
        lambda w: ad.cumsum(w).sum() * 0.5 + ad.cumsum(w)[2],
        lambda w: ad.index_select(w, np.array([0, 2, 2, 1])).sum(),
        lambda w: w[1:3].sum() + w[0] * 2.0,
        lambda w: ad.logsumexp(w),
        lambda w: ad.stack([w[0] * 2.0, w[3], w[1] + w[2]]).sum(),
        lambda w: ad.concat([w[:2] * 3.0, w[2:]]).sum(),
    ],
)
def test_elementwise_op_gradients(build):
    w = parameter(np.array([0.3, -0.7, 1.2, 2.5]))
    zero_grads({"w": w})
    loss = build(w)
    loss.backward()
    numeric = fd_scalar(lambda: build(w), w)
    assert np.allclose(w.grad, numeric, rtol=1e-6, atol=1e-8)


def test_matmul_and_broadcast_gradients():
    rng = np.random.default_rng(0)
    W = parameter(rng.normal(size=(3, 2)))
    b = parameter(rng.normal(size=(2,)))
    x = ad.constant(rng.normal(size=(5, 3)))

    def loss_fn():
        return ad.silu(x @ W + b).sum()

    zero_grads({"W": W, "b": b})
    loss_fn().backward()
    assert np.allclose(W.grad, fd_scalar(loss_fn, W), rtol=1e-6, atol=1e-8)
    assert np.allclose(b.grad, fd_scalar(loss_fn, b), rtol=1e-6, atol=1e-8)


def test_reshape_mean_axis_gradients():
    w = parameter(np.arange(12, dtype=float).reshape(6, 2) / 7.0)

    def loss_fn():
        return (ad.tmean(ad.reshape(w, (2, 3, 2)), axis=1) ** 2.0).sum()

    zero_grads({"w": w})
    loss_fn().backward()
    assert np.allclose(w.grad, fd_scalar(loss_fn, w), rtol=1e-6, atol=1e-9)


def test_sum_of_squares_gradient_exact():
    w = parameter(np.array([1.0, -2.0, 3.5]))
    (w * w).sum().backward()
    assert np.array_equal(w.grad, 2 * w.value)


def test_constant_loss_zero_gradient():
    w = parameter(np.array([1.0, 2.0]))
    loss = w.sum() * 0.0 + 5.0
    grads = ad.backprop(loss, {"w": w})
    assert np.array_equal(grads["w"], np.zeros(2))


def test_repeated_backward_accumulates():
    w = parameter(np.array([2.0]))
    (w * w).sum().backward()
    first = w.grad.copy()
    (w * w).sum().backward()
    assert np.array_equal(w.grad, 2 * first)


def test_diamond_graph_gradient():
    w = parameter(np.array([3.0]))
    y = w * w + w  # w feeds two paths
    y.sum().backward()
    assert np.allclose(w.grad, 2 * w.value + 1)


def test_backward_requires_scalar():
    w = parameter(np.array([1.0, 2.0]))
    with pytest.raises(Exception):
        (w * 2.0).backward()


def test_two_layer_mlp_finite_difference():
    rng = np.random.default_rng(7)
    params = {
        "W1": parameter(rng.normal(size=(4, 8)) * 0.3),
        "b1": parameter(np.zeros(8)),
        "W2": parameter(rng.normal(size=(8, 1)) * 0.3),
    }
    x = ad.constant(rng.normal(size=(6, 4)))
    target = rng.normal(size=(6, 1))

    def loss_fn():
        pred = ad.silu(x @ params["W1"] + params["b1"]) @ params["W2"]
        diff = pred - target
        return (diff * diff).sum()

    report = finite_diff_check(loss_fn, params, epsilon=1e-4, num_coords=50)
    assert report.max_rel_err < 1e-4


def test_quadratic_finite_difference_tiny_error():
    params = {"w": parameter(np.array([0.5, -1.5, 2.0]))}

    def loss_fn():
        return (params["w"] * params["w"]).sum()

    report = finite_diff_check(loss_fn, params, epsilon=1e-4)
    assert report.max_rel_err < 1e-9


def test_relu_kink_coordinate_excluded():
    params = {"w": parameter(np.array([0.0, 1.0, -1.0]))}

    def loss_fn():
        return ad.relu(params["w"]).sum()

    report = finite_diff_check(loss_fn, params, epsilon=1e-4)
    assert ("w", 0) in report.excluded
    assert report.n_checked == 2
    assert report.max_rel_err < 1e-9


def test_value_only_path_builds_no_graph():
    a = ad.constant(np.ones(3))
    out = ad.silu(a * 2.0 + 1.0)
    assert not out.requires_grad and out._parents == ()
