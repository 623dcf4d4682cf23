"""Training loss: binary cross-entropy plus soft dice, unit weights."""

from .errors import ShapeError
from .tensor import Tensor, add, clip, div, log, mul, neg, reduce_mean, reduce_sum

BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of -[y*ln(p) + (1-y)*ln(1-p)] with p clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {target.shape}")
    p = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    not_target = Tensor(1.0 - target.data)
    term = add(mul(target, log(p)), mul(not_target, log(1.0 - p)))
    return neg(reduce_mean(term))


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth), per image
    then averaged over the batch. No thresholding, so the loss stays
    differentiable in pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} vs target {target.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = reduce_sum(mul(pred, target), axes)
    denom = add(reduce_sum(pred, axes), reduce_sum(target, axes))
    coeff = div(inter * 2.0 + smooth, denom + smooth)
    return reduce_mean(1.0 - coeff)


def combined_loss(pred: Tensor, target: Tensor) -> Tensor:
    """bce_loss + dice_loss."""
    return add(bce_loss(pred, target), dice_loss(pred, target))
