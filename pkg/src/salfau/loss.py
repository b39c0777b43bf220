"""Pixel-summed binary cross-entropy and the deep-supervision total."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .network import SaliencyOutputs
from .tensor import ShapeError, Tensor

CLAMP = 1e-7


@dataclass
class LossWeights:
    w_side: tuple[float, ...] = field(default=(1.0, 1.0, 1.0, 1.0))
    w_fuse: float = 1.0

    def __post_init__(self):
        self.w_side = tuple(float(w) for w in self.w_side)
        if len(self.w_side) != 4:
            raise ValueError(f"expected 4 side weights, got {len(self.w_side)}")
        if min(self.w_side) < 0 or self.w_fuse < 0:
            raise ValueError("loss weights must be nonnegative")

    def scaled(self, k: float) -> LossWeights:
        return LossWeights(tuple(k * w for w in self.w_side), k * self.w_fuse)


def bce_sum(pred: Tensor, target: Tensor) -> Tensor:
    """-sum(G log P + (1 - G) log(1 - P)) over every pixel in the batch.

    ``pred`` is clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {list(pred.shape)} and target {list(target.shape)} differ")
    p = T.clip(pred, CLAMP, 1 - CLAMP)
    pos = target * T.log(p)
    neg = (1.0 - target) * T.log(1.0 - p)
    return -T.sum_all(pos + neg)


def total_loss(outputs: SaliencyOutputs, target: Tensor, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    terms = [bce_sum(side, target) for side in outputs.side] + [bce_sum(outputs.fused, target)]
    return T.weighted_sum(terms, [*w.w_side, w.w_fuse])
