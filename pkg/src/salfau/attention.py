"""Additive attention gate for encoder skip features."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, init_he
from .tensor import ShapeError, Tensor


class AttentionGate(Module):
    """Gate a skip feature with a spatial map computed from a gating signal.

    ``conv_q``/``conv_k`` project the gating signal and the skip feature to
    ``f_int`` channels; ``conv_psi`` squeezes their rectified sum to a single
    coefficient channel.
    """

    def __init__(self, f_g: int, f_l: int, f_int: int | None = None, dtype=None):
        self.f_g = f_g
        self.f_l = f_l
        self.f_int = f_int if f_int is not None else max(1, f_l // 2)
        if self.f_int < 1:
            raise ValueError(f"f_int must be >= 1, got {self.f_int}")
        self.conv_q = Conv2d(f_g, self.f_int, 1, dtype=dtype)
        self.bn_q = BatchNorm2d(self.f_int, dtype=dtype)
        self.conv_k = Conv2d(f_l, self.f_int, 1, dtype=dtype)
        self.bn_k = BatchNorm2d(self.f_int, dtype=dtype)
        self.conv_psi = Conv2d(self.f_int, 1, 1, dtype=dtype)
        self.bn_psi = BatchNorm2d(1, dtype=dtype)

    def init(self, rng: np.random.Generator) -> None:
        for conv in (self.conv_q, self.conv_k, self.conv_psi):
            init_he(conv, rng)

    def coefficients(self, f_g: Tensor, f_s: Tensor) -> Tensor:
        """Attention map V in (0, 1) with shape [N, 1, H, W]."""
        if f_g.data.ndim != 4 or f_s.data.ndim != 4:
            raise ShapeError(f"attention gate expects rank-4 inputs, got {list(f_g.shape)} and {list(f_s.shape)}")
        if (f_g.shape[0], *f_g.shape[2:]) != (f_s.shape[0], *f_s.shape[2:]):
            raise ShapeError(f"gating signal {list(f_g.shape)} and skip feature {list(f_s.shape)} "
                             "must share batch and spatial dims")
        q = T.relu(self.bn_q(self.conv_q(f_g)))
        k = T.relu(self.bn_k(self.conv_k(f_s)))
        alpha = T.relu(q + k)
        return T.sigmoid(self.bn_psi(self.conv_psi(alpha)))

    def forward(self, f_g: Tensor, f_s: Tensor) -> Tensor:
        return self.coefficients(f_g, f_s) * f_s


def ag_forward(gate: AttentionGate, f_g: Tensor, f_s: Tensor) -> Tensor:
    return gate(f_g, f_s)
