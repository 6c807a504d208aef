from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
import pytest

from lesionstack import autodiff as ad
from lesionstack.exceptions import GraphError

INSTANCES = 50


def numeric_grad(
    f: Callable[[], float],
    array: np.ndarray,
    eps: float = 1e-6,
) -> np.ndarray:
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + eps
        upper = f()
        array[index] = saved - eps
        lower = f()
        array[index] = saved
        grad[index] = (upper - lower) / (2 * eps)
    return grad


def assert_gradients(
    build: Callable[[Sequence[ad.Tensor]], ad.Tensor],
    arrays: Sequence[np.ndarray],
    rtol: float = 1e-4,
) -> None:
    """Compare backward() against central differences for every input."""
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()

    def value() -> float:
        with ad.no_grad():
            return build([ad.Tensor(leaf.data) for leaf in leaves]).item()

    for leaf in leaves:
        expected = numeric_grad(value, leaf.data)
        actual = leaf.grad if leaf.grad is not None else np.zeros_like(expected)
        scale = max(np.abs(expected).max(), np.abs(actual).max(), 1e-8)
        assert np.abs(actual - expected).max() / scale <= rtol


def weighted_sum(out: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    return ad.tensor_sum(ad.mul(out, ad.Tensor(weights)))


@pytest.mark.parametrize("padding", ["same", "none"])
def test_conv3d_gradients(rng: np.random.Generator, padding: str) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((2, 2, 3, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out_shape = ad.conv3d(
            ad.Tensor(x),
            ad.Tensor(k),
            ad.Tensor(b),
            padding=padding,  # type: ignore[arg-type]
        ).shape
        weights = rng.standard_normal(out_shape)
        assert_gradients(
            lambda t, w=weights: weighted_sum(
                ad.conv3d(
                    t[0],
                    t[1],
                    t[2],
                    padding=padding,  # type: ignore[arg-type]
                ),
                w,
            ),
            [x, k, b],
        )


def test_conv3d_stride_and_shape() -> None:
    x = ad.Tensor(np.ones((1, 1, 4, 6, 6)))
    k = ad.Tensor(np.ones((2, 1, 1, 3, 3)))
    out = ad.conv3d(x, k, stride=(1, 2, 2))
    assert out.shape == (1, 2, 4, 3, 3)
    # Interior voxels see the full 3x3 window of ones.
    assert out.data[0, 0, 0, 1, 1] == pytest.approx(9.0)


def test_conv3d_rejects_channel_mismatch() -> None:
    with pytest.raises(GraphError):
        ad.conv3d(
            ad.Tensor(np.zeros((1, 2, 3, 3, 3))),
            ad.Tensor(np.zeros((1, 3, 1, 1, 1))),
        )


def test_maxpool_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((2, 2, 2, 4, 4))
        weights = rng.standard_normal((2, 2, 1, 2, 2))
        assert_gradients(
            lambda t, w=weights: weighted_sum(ad.maxpool3d(t[0], 2), w),
            [x],
        )


def test_maxpool_floor_extent_and_window_check() -> None:
    out = ad.maxpool3d(ad.Tensor(np.zeros((1, 1, 3, 5, 5))), (1, 2, 2))
    assert out.shape == (1, 1, 3, 2, 2)
    with pytest.raises(GraphError):
        ad.maxpool3d(ad.Tensor(np.zeros((1, 1, 1, 4, 4))), (2, 2, 2))


def test_avgpool_global_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((3, 2, 2, 3, 3))
        weights = rng.standard_normal((3, 2))
        assert_gradients(
            lambda t, w=weights: weighted_sum(ad.avgpool_global(t[0]), w),
            [x],
        )


def test_batchnorm_train_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((4, 3, 2, 2, 2))
        scale = rng.uniform(0.5, 1.5, 3)
        shift = rng.standard_normal(3)
        weights = rng.standard_normal(x.shape)

        def build(t: Sequence[ad.Tensor], w: np.ndarray = weights) -> ad.Tensor:
            state = ad.BatchNormState.create(3, np.float64)
            out = ad.batchnorm(t[0], t[1], t[2], state, "train")
            return weighted_sum(out, w)

        assert_gradients(build, [x, scale, shift])


def test_batchnorm_eval_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((2, 2, 1, 2, 2))
        scale = rng.uniform(0.5, 1.5, 2)
        shift = rng.standard_normal(2)
        weights = rng.standard_normal(x.shape)
        state = ad.BatchNormState(
            running_mean=rng.standard_normal(2),
            running_var=rng.uniform(0.5, 2.0, 2),
            steps=1,
        )
        assert_gradients(
            lambda t, w=weights, s=state: weighted_sum(
                ad.batchnorm(t[0], t[1], t[2], s, "eval"),
                w,
            ),
            [x, scale, shift],
        )


def test_batchnorm_running_stats_and_eval_guard(
    rng: np.random.Generator,
) -> None:
    x = rng.standard_normal((8, 2, 1, 3, 3)) * 2.0 + 1.0
    state = ad.BatchNormState.create(2, np.float64)
    ones, zeros = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    with pytest.raises(GraphError):
        ad.batchnorm(ad.Tensor(x), ones, zeros, state, "eval")

    out = ad.batchnorm(ad.Tensor(x), ones, zeros, state, "train")
    axes = (0, 2, 3, 4)
    np.testing.assert_allclose(out.data.mean(axis=axes), 0.0, atol=1e-10)
    np.testing.assert_allclose(
        state.running_mean,
        0.1 * x.mean(axis=axes),
        rtol=1e-12,
    )
    np.testing.assert_allclose(
        state.running_var,
        0.9 + 0.1 * x.var(axis=axes),
        rtol=1e-12,
    )
    assert state.steps == 1


def test_relu_sigmoid_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        weights = rng.standard_normal(x.shape)
        assert_gradients(
            lambda t, w=weights: weighted_sum(ad.sigmoid(ad.relu(t[0])), w),
            [x],
        )


def test_relu_subgradient_at_zero() -> None:
    x = ad.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ad.tensor_sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_fully_connected_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        b = rng.standard_normal(2)
        weights = rng.standard_normal((3, 2))
        assert_gradients(
            lambda t, r=weights: weighted_sum(
                ad.fully_connected(t[0], t[1], t[2]),
                r,
            ),
            [x, w, b],
        )


def test_concat_gradients(rng: np.random.Generator) -> None:
    for _ in range(INSTANCES):
        a = rng.standard_normal((2, 1, 2, 2, 2))
        b = rng.standard_normal((2, 3, 2, 2, 2))
        weights = rng.standard_normal((2, 4, 2, 2, 2))
        assert_gradients(
            lambda t, w=weights: weighted_sum(ad.concat_channels(t), w),
            [a, b],
        )


def test_concat_rejects_spatial_mismatch() -> None:
    with pytest.raises(GraphError):
        ad.concat_channels(
            [
                ad.Tensor(np.zeros((1, 1, 2, 2, 2))),
                ad.Tensor(np.zeros((1, 1, 2, 3, 2))),
            ],
        )


def test_dropout_modes(rng: np.random.Generator) -> None:
    x = ad.Tensor(rng.standard_normal((200, 50)), requires_grad=True)
    assert ad.dropout(x, 0.5, "eval") is x

    out = ad.dropout(x, 0.25, "train", rng=7)
    kept = out.data != 0
    assert 0.7 < kept.mean() < 0.8
    np.testing.assert_allclose(out.data[kept], x.data[kept] / 0.75)
    ad.tensor_sum(out).backward()
    np.testing.assert_allclose(x.grad, kept / 0.75)


def test_gradients_accumulate_across_paths() -> None:
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, 3.0), ad.mul(x, x))
    ad.tensor_sum(y).backward()
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_backward_guards() -> None:
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.mul(x, 2.0).backward()

    loss = ad.tensor_sum(x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()

    with pytest.raises(GraphError):
        ad.tensor_sum(ad.Tensor(np.ones(3))).backward()


def test_no_grad_records_nothing() -> None:
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad
    assert ad.mul(x, 2.0).requires_grad


def test_frozen_parameter_gets_no_gradient() -> None:
    frozen = ad.Parameter("frozen", np.ones(2))
    frozen.freeze()
    live = ad.Parameter("live", np.ones(2))
    ad.tensor_sum(ad.mul(frozen, live)).backward()
    assert frozen.grad is None
    np.testing.assert_allclose(live.grad, [1.0, 1.0])
