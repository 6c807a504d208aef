"""Dense tensors with reverse-mode differentiation.

Only the operators the stream and meta networks need are provided. Arrays
are laid out ``(batch, channel, z, y, x)`` for volumes and
``(batch, features)`` after flattening. Convolution is cross-correlation
(no kernel flip). ReLU has subgradient 0 at exactly 0 and max pooling
routes gradients to the lowest linear index among tied maxima.

Every op records its parents and a backward rule only when some input
requires a gradient, so frozen parameters produce no graph.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import special

from lesionstack.constants import BN_EPSILON, BN_MOMENTUM
from lesionstack.exceptions import GraphError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

Mode = Literal["train", "eval"]
Padding = Literal["none", "same"]
BackwardFn = Callable[["NDArray[np.floating]"], Sequence["NDArray | None"]]

_grad_enabled = True


class Tensor:
    """An array node in a differentiation graph."""

    __slots__ = (
        "_backward",
        "_consumed",
        "_parents",
        "data",
        "grad",
        "op",
        "requires_grad",
    )

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        dtype: np.dtype | type | None = None,
    ) -> None:
        """Wrap an array.

        Args:
            data: Values; integer input is promoted to float64.
            requires_grad: Whether gradients should flow into this tensor.
            dtype: Optional float precision (float32 or float64).
        """
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: NDArray[np.floating] = array
        self.grad: NDArray[np.floating] | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    def __repr__(self) -> str:
        """Short description."""
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """Array precision."""
        return self.data.dtype

    @property
    def ndim(self) -> int:
        """Number of axes."""
        return self.data.ndim

    def item(self) -> float:
        """Value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Back-propagate from this scalar; see :func:`backward`."""
        backward(self)

    def __add__(self, other: Tensor | float) -> Tensor:
        """Elementwise sum."""
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Tensor | float) -> Tensor:
        """Elementwise product."""
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        """Negation."""
        return mul(self, -1.0)

    def __sub__(self, other: Tensor | float) -> Tensor:
        """Elementwise difference."""
        return add(self, -other if isinstance(other, Tensor) else -other)

    def sum(self) -> Tensor:
        """Sum of all elements."""
        return tensor_sum(self)

    def mean(self) -> Tensor:
        """Mean of all elements."""
        return mul(tensor_sum(self), 1.0 / self.data.size)


class Parameter(Tensor):
    """A named trainable tensor with its momentum buffer."""

    __slots__ = ("name", "velocity")

    def __init__(self, name: str, data: ArrayLike) -> None:
        """Create a trainable parameter.

        Args:
            name: Layer path, unique within a model.
            data: Initial values.
        """
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.velocity: NDArray[np.floating] = np.zeros_like(self.data)

    def __repr__(self) -> str:
        """Short description."""
        return f"Parameter({self.name}, shape={self.shape})"

    def freeze(self) -> None:
        """Stop gradients from reaching this parameter."""
        self.requires_grad = False
        self.grad = None


def as_tensor(value: Tensor | ArrayLike, dtype: np.dtype | None = None) -> Tensor:
    """Wrap constants; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@contextmanager
def no_grad() -> Iterator[None]:
    """Record no graph inside the block (inference passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def make_node(
    data: NDArray[np.floating],
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Create an op output, recording the graph only when needed.

    Args:
        data: Forward values.
        parents: Input tensors, in the order ``backward_fn`` returns grads.
        backward_fn: Maps the output gradient to one gradient per parent
            (``None`` for parents that take no gradient).
        op: Operator name for diagnostics.
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend(
            (parent, False)
            for parent in node._parents
            if parent.requires_grad and id(parent) not in visited
        )
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable tensor that requires one.

    Gradients add up across graph paths and onto existing ``.grad`` values
    of leaves. The graph is released afterwards.

    Raises:
        GraphError: If the loss is not a scalar or its graph was consumed.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError(
            "graph already back-propagated; run the forward pass again",
        )
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any trainable tensor")

    order = _topological_order(loss)
    grads: dict[int, NDArray[np.floating]] = {
        id(loss): np.ones_like(loss.data),
    }
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._backward(grad)
        for parent, parent_grad in zip(
            node._parents,
            parent_grads,
            strict=True,
        ):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
    for node in order:
        node._backward = None
        node._parents = ()
    loss._consumed = True


def _unbroadcast(
    grad: NDArray[np.floating],
    shape: tuple[int, ...],
) -> NDArray[np.floating]:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise sum with scalar/trailing broadcasting."""
    ta, tb = as_tensor(a), as_tensor(b)
    ta, tb = _match_precision(ta, tb)

    def _backward(g: NDArray) -> tuple[NDArray, NDArray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return make_node(ta.data + tb.data, (ta, tb), _backward, "add")


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise product with scalar/trailing broadcasting."""
    ta, tb = as_tensor(a), as_tensor(b)
    ta, tb = _match_precision(ta, tb)

    def _backward(g: NDArray) -> tuple[NDArray, NDArray]:
        return (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        )

    return make_node(ta.data * tb.data, (ta, tb), _backward, "mul")


def _match_precision(ta: Tensor, tb: Tensor) -> tuple[Tensor, Tensor]:
    # Constants follow the precision of the tensor they combine with.
    if not ta.requires_grad and ta._parents == () and ta.data.ndim == 0:
        ta = Tensor(ta.data.astype(tb.dtype))
    if not tb.requires_grad and tb._parents == () and tb.data.ndim == 0:
        tb = Tensor(tb.data.astype(ta.dtype))
    return ta, tb


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.data.sum()), (x,), _backward, "sum")


def _triple(value: int | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(value, int):
        return value, value, value
    z, y, x = value
    return int(z), int(y), int(x)


def _out_extent(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int | Sequence[int] = 1,
    padding: Padding = "same",
) -> Tensor:
    """3D cross-correlation over (z, y, x).

    Args:
        x: Input of shape (N, C, D, H, W).
        kernel: Weights of shape (O, C, kz, ky, kx).
        bias: Optional per-output-channel bias of shape (O,).
        stride: Step per axis.
        padding: ``"same"`` pads ``k // 2`` zeros per side, ``"none"`` none.

    Raises:
        GraphError: On rank, channel or extent mismatch.
    """
    if x.ndim != 5 or kernel.ndim != 5:
        raise GraphError(
            f"conv3d expects 5-axis input and kernel, got {x.shape} and "
            f"{kernel.shape}",
        )
    n, c, *spatial = x.shape
    o, kc, *ksize = kernel.shape
    if c != kc:
        raise GraphError(
            f"conv3d channel mismatch: input axis 1 has {c}, kernel axis 1 "
            f"has {kc}",
        )
    if bias is not None and bias.shape != (o,):
        raise GraphError(
            f"conv3d bias shape {bias.shape} does not match {o} output "
            "channels",
        )
    strides = _triple(stride)
    if padding not in {"none", "same"}:
        raise GraphError(f"unsupported padding {padding!r}")
    pads = tuple(k // 2 if padding == "same" else 0 for k in ksize)
    out_dims = tuple(
        _out_extent(s, k, p, st)
        for s, k, p, st in zip(spatial, ksize, pads, strides, strict=True)
    )
    if min(out_dims) < 1:
        axes = ("z", "y", "x")
        bad = [a for a, d in zip(axes, out_dims, strict=True) if d < 1]
        raise GraphError(
            f"conv3d kernel {tuple(ksize)} exceeds input extent on axes {bad}",
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), *((p, p) for p in pads)))
    do, ho, wo = out_dims
    sz, sy, sx = strides
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def _window(array: NDArray, i: int, j: int, k: int) -> NDArray:
        return array[
            :,
            :,
            i : i + sz * (do - 1) + 1 : sz,
            j : j + sy * (ho - 1) + 1 : sy,
            k : k + sx * (wo - 1) + 1 : sx,
        ]

    w = kernel.data
    acc = np.zeros((n, do, ho, wo, o), dtype=np.result_type(x.data, w))
    for i, j, k in offsets:
        acc += np.tensordot(_window(xp, i, j, k), w[:, :, i, j, k], ([1], [1]))
    out = np.moveaxis(acc, -1, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g: NDArray) -> tuple[NDArray, NDArray, NDArray | None]:
        g_last = np.moveaxis(g, 1, -1)
        grad_w = np.zeros_like(w)
        grad_xp = np.zeros_like(xp)
        for i, j, k in offsets:
            grad_w[:, :, i, j, k] = np.tensordot(
                g_last,
                _window(xp, i, j, k),
                ([0, 1, 2, 3], [0, 2, 3, 4]),
            )
            _window(grad_xp, i, j, k)[...] += np.moveaxis(
                np.tensordot(g_last, w[:, :, i, j, k], ([4], [0])),
                -1,
                1,
            )
        pz, py, px = pads
        grad_x = grad_xp[
            :,
            :,
            pz : pz + spatial[0],
            py : py + spatial[1],
            px : px + spatial[2],
        ]
        grad_b = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return np.ascontiguousarray(grad_x), grad_w, grad_b

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _backward_parents(g: NDArray) -> Sequence[NDArray | None]:
        grads = _backward(g)
        return grads if bias is not None else grads[:2]

    return make_node(out, parents, _backward_parents, "conv3d")


def maxpool3d(
    x: Tensor,
    window: int | Sequence[int],
    stride: int | Sequence[int] | None = None,
) -> Tensor:
    """Max pooling over (z, y, x) windows, floor-sized output.

    Raises:
        GraphError: If a window is larger than the input extent.
    """
    win = _triple(window)
    strides = win if stride is None else _triple(stride)
    spatial = x.shape[2:]
    if len(spatial) != 3 or any(
        w > s for w, s in zip(win, spatial, strict=True)
    ):
        raise GraphError(f"pool window {win} does not fit input {x.shape}")
    out_dims = tuple(
        (s - w) // st + 1 for s, w, st in zip(spatial, win, strides, strict=True)
    )
    do, ho, wo = out_dims
    sz, sy, sx = strides
    offsets = list(itertools.product(*(range(w) for w in win)))

    def _window(array: NDArray, i: int, j: int, k: int) -> NDArray:
        return array[
            :,
            :,
            i : i + sz * (do - 1) + 1 : sz,
            j : j + sy * (ho - 1) + 1 : sy,
            k : k + sx * (wo - 1) + 1 : sx,
        ]

    best = _window(x.data, *offsets[0]).copy()
    argmax = np.zeros(best.shape, dtype=np.int32)
    for linear, (i, j, k) in enumerate(offsets[1:], start=1):
        candidate = _window(x.data, i, j, k)
        better = candidate > best
        best = np.where(better, candidate, best)
        argmax[better] = linear

    def _backward(g: NDArray) -> tuple[NDArray]:
        grad_x = np.zeros_like(x.data)
        for linear, (i, j, k) in enumerate(offsets):
            _window(grad_x, i, j, k)[...] += np.where(argmax == linear, g, 0)
        return (grad_x,)

    return make_node(best, (x,), _backward, "maxpool3d")


def avgpool_global(x: Tensor) -> Tensor:
    """Average over every spatial axis: (N, C, ...) -> (N, C)."""
    axes = tuple(range(2, x.ndim))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def _backward(g: NDArray) -> tuple[NDArray]:
        expanded = g.reshape(g.shape + (1,) * len(axes)) / count
        return (np.broadcast_to(expanded, x.shape).astype(x.dtype),)

    return make_node(x.data.mean(axis=axes), (x,), _backward, "avgpool")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: NDArray[np.floating]
    running_var: NDArray[np.floating]
    steps: int = 0
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, dtype: np.dtype | type) -> BatchNormState:
        """Fresh stats (mean 0, var 1, no steps taken)."""
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: BatchNormState,
    mode: Mode,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel normalization over batch and space.

    Train mode normalizes by the batch mean and biased variance and
    updates the running stats as ``r <- m * r + (1 - m) * batch``. Eval mode
    normalizes by the running stats.

    Raises:
        GraphError: In eval mode before any train step.
    """
    axes = (0, *range(2, x.ndim))
    channels = x.shape[1]
    param_shape = (1, channels) + (1,) * (x.ndim - 2)
    gamma = scale.data.reshape(param_shape)
    beta = shift.data.reshape(param_shape)

    if mode == "eval":
        if state.steps == 0:
            raise GraphError(
                "batch norm running statistics are uninitialized; "
                "run at least one train step first",
            )
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(param_shape) + eps)
        x_hat = (x.data - state.running_mean.reshape(param_shape)) * inv_std

        def _backward_eval(g: NDArray) -> tuple[NDArray, NDArray, NDArray]:
            return (
                g * gamma * inv_std,
                (g * x_hat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return make_node(
            gamma * x_hat + beta,
            (x, scale, shift),
            _backward_eval,
            "batchnorm",
        )

    if mode != "train":
        raise GraphError(f"unknown mode {mode!r}")
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    m = state.momentum
    state.running_mean = (
        m * state.running_mean + (1 - m) * mean.reshape(channels)
    ).astype(state.running_mean.dtype)
    state.running_var = (
        m * state.running_var + (1 - m) * var.reshape(channels)
    ).astype(state.running_var.dtype)
    state.steps += 1
    count = x.data.size // channels

    def _backward_train(g: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        g_hat = g * gamma
        grad_x = (
            inv_std
            / count
            * (
                count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        )
        return grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return make_node(
        gamma * x_hat + beta,
        (x, scale, shift),
        _backward_train,
        "batchnorm",
    )


def relu(x: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at exactly 0."""
    positive = x.data > 0

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (g * positive,)

    return make_node(np.where(positive, x.data, 0), (x,), _backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function."""
    s = special.expit(x.data)

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (g * s * (1 - s),)

    return make_node(s, (x,), _backward, "sigmoid")


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map (N, F) @ (F, O) + (O,).

    Raises:
        GraphError: On feature-width mismatch.
    """
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise GraphError(
            f"fully_connected cannot map input {x.shape} with weights "
            f"{weights.shape}",
        )

    def _backward(g: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return make_node(
        x.data @ weights.data + bias.data,
        (x, weights, bias),
        _backward,
        "fully_connected",
    )


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, in order.

    Raises:
        GraphError: If batch or spatial extents differ.
    """
    if not tensors:
        raise GraphError("concat_channels needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or (
            t.shape[0] != reference[0] or t.shape[2:] != reference[2:]
        ):
            raise GraphError(
                f"concat_channels shape mismatch: {reference} vs {t.shape}",
            )
    bounds = np.cumsum([0, *(t.shape[1] for t in tensors)])

    def _backward(g: NDArray) -> list[NDArray]:
        return [
            g[:, int(lo) : int(hi)]
            for lo, hi in itertools.pairwise(bounds)
        ]

    return make_node(
        np.concatenate([t.data for t in tensors], axis=1),
        tuple(tensors),
        _backward,
        "concat",
    )


def dropout(
    x: Tensor,
    rate: float,
    mode: Mode,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors.

    Eval mode (or rate 0) is the identity.
    """
    if mode == "eval" or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise GraphError(f"dropout rate must be in [0, 1), got {rate}")
    generator = (
        rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    )
    keep = (generator.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (g * keep,)

    return make_node(x.data * keep, (x,), _backward, "dropout")


def flatten(x: Tensor) -> Tensor:
    """Collapse every non-batch axis."""

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (g.reshape(x.shape),)

    return make_node(x.data.reshape(x.shape[0], -1), (x,), _backward, "flatten")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Same values in a new shape."""

    def _backward(g: NDArray) -> tuple[NDArray]:
        return (g.reshape(x.shape),)

    return make_node(x.data.reshape(shape), (x,), _backward, "reshape")
