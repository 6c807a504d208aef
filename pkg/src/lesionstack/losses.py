"""Sigmoid focal loss for binary labels in {+1, -1}.

With ``Xt = y * X`` and the softplus ``sp(z) = log(1 + e^z)`` the loss is

    loss = alpha * exp(-gamma * sp(Xt)) * sp(-Xt)

which is ``-alpha * (1 - p_t)**gamma * log(p_t)`` for ``p_t = sigmoid(Xt)``
because ``1 - p_t = exp(-sp(Xt))`` and ``-log(p_t) = sp(-Xt)``. Its
derivative with respect to ``Xt`` is

    -alpha * exp(-gamma * sp(Xt)) * (gamma * sigmoid(Xt) * sp(-Xt) + sigmoid(-Xt))

and the derivative with respect to ``X`` is ``y`` times that.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import special

from lesionstack.autodiff import Tensor, make_node
from lesionstack.constants import FOCAL_ALPHA, FOCAL_GAMMA
from lesionstack.exceptions import ConfigurationError, DataError, NumericError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True)
class FocalParams:
    """Focal-loss hyperparameters.

    With ``class_balanced`` off, ``alpha`` scales both classes. With it on,
    positives are weighted by ``alpha`` and negatives by ``1 - alpha``.
    """

    alpha: float = FOCAL_ALPHA
    gamma: float = FOCAL_GAMMA
    class_balanced: bool = False

    def __post_init__(self) -> None:
        """Validate the ranges."""
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(
                f"focal alpha must be in (0, 1], got {self.alpha}",
            )
        if self.gamma < 0.0:
            raise ConfigurationError(
                f"focal gamma must be >= 0, got {self.gamma}",
            )

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FocalParams:
        """Build from a JSON document; omitted fields keep defaults."""
        return cls(**data)


CROSS_ENTROPY = FocalParams(alpha=1.0, gamma=0.0)


def softplus(z: NDArray[np.floating]) -> NDArray[np.floating]:
    """log(1 + e^z) without overflow."""
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _checked(
    logits: ArrayLike,
    labels: ArrayLike,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("focal loss received non-finite logits")
    if not np.all(np.abs(y) == 1.0):
        raise DataError("focal loss labels must be +1 or -1")
    if x.shape != y.shape:
        x, y = np.broadcast_arrays(x, y)
    return x, y


def _weights(y: NDArray[np.float64], params: FocalParams) -> NDArray[np.float64]:
    if params.class_balanced:
        return np.where(y > 0, params.alpha, 1.0 - params.alpha)
    return np.full_like(y, params.alpha)


def focal_loss(
    logits: ArrayLike,
    labels: ArrayLike,
    params: FocalParams,
) -> Any:
    """Per-sample focal loss of logits against labels in {+1, -1}.

    Scalar inputs give a scalar; arrays give an array of the same shape.

    Raises:
        NumericError: If a logit is not finite.
        DataError: If a label is not +1 or -1.
    """
    x, y = _checked(logits, labels)
    xt = y * x
    loss = (
        _weights(y, params)
        * np.exp(-params.gamma * softplus(xt))
        * softplus(-xt)
    )
    return loss[()]


def focal_loss_grad(
    logits: ArrayLike,
    labels: ArrayLike,
    params: FocalParams,
) -> Any:
    """Derivative of :func:`focal_loss` with respect to the logits."""
    x, y = _checked(logits, labels)
    xt = y * x
    d_xt = (
        -_weights(y, params)
        * np.exp(-params.gamma * softplus(xt))
        * (
            params.gamma * special.expit(xt) * softplus(-xt)
            + special.expit(-xt)
        )
    )
    return (y * d_xt)[()]


def batch_loss(
    logits: ArrayLike,
    labels: ArrayLike,
    params: FocalParams,
) -> float:
    """Arithmetic mean of the per-sample focal losses.

    Raises:
        DataError: On an empty batch or unequal lengths.
    """
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DataError("cannot compute the loss of an empty batch")
    if x.size != y.size:
        raise DataError(
            f"{x.size} logits do not match {y.size} labels",
        )
    return float(np.mean(focal_loss(x, y, params)))


def labels_to_signed(labels: ArrayLike) -> NDArray[np.float64]:
    """Map patch labels {1, 0} to loss labels {+1, -1}.

    Raises:
        DataError: If a label is unknown (any value other than 0 or 1).
    """
    codes = np.asarray(labels)
    if not np.all((codes == 0) | (codes == 1)):
        raise DataError("only labelled (0/1) patches can enter the loss")
    return np.where(codes == 1, 1.0, -1.0)


def focal_loss_tensor(
    logits: Tensor,
    labels: ArrayLike,
    params: FocalParams,
) -> Tensor:
    """Mean focal loss as a differentiable graph node."""
    x = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DataError("cannot compute the loss of an empty batch")
    if x.size != y.size:
        raise DataError(f"{x.size} logits do not match {y.size} labels")
    per_sample = focal_loss(x, y, params)
    grad = np.asarray(focal_loss_grad(x, y, params)) / x.size

    def _backward(g: NDArray) -> tuple[NDArray]:
        return ((g * grad).reshape(logits.shape).astype(logits.dtype),)

    return make_node(
        np.asarray(np.mean(per_sample), dtype=logits.dtype),
        (logits,),
        _backward,
        "focal_loss",
    )
