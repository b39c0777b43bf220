"""Attention U-Net with a saliency fusion head and deep supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionGate
from .nn import BatchNorm2d, Conv2d, Module, init_he, maxpool2d, upsample_bilinear
from .tensor import ShapeError, Tensor, get_default_dtype

DEPTH = 5


class ConfigError(ValueError):
    """Invalid architecture configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    base_channels: int = 8
    input_size: int = 64

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class SaliencyOutputs:
    side: list[Tensor]
    fused: Tensor

    def maps(self) -> list[Tensor]:
        return [*self.side, self.fused]


class ConvBlock(Module):
    """Two conv3x3 -> batch norm -> ReLU stages."""

    def __init__(self, in_channels: int, out_channels: int, dtype=None):
        self.conv1 = Conv2d(in_channels, out_channels, 3, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class DecoderBlock(Module):
    """Upsample the deeper feature, gate the skip with it, concat, convolve."""

    def __init__(self, deep_channels: int, skip_channels: int, dtype=None):
        self.gate = AttentionGate(deep_channels, skip_channels, dtype=dtype)
        self.block = ConvBlock(skip_channels + deep_channels, skip_channels, dtype=dtype)

    def forward(self, deep: Tensor, skip: Tensor) -> Tensor:
        up = upsample_bilinear(deep, skip.shape[2], skip.shape[3])
        gated = self.gate(up, skip)
        return self.block(T.concat_channels([gated, up]))


class SalFAUNet(Module):
    """Five encoder levels, four gated decoders, four side heads and a fuse conv.

    Decoder ``m`` (1..4) consumes the skip of encoder level ``4 - m``; side map
    ``m`` is predicted from decoder ``m``'s output.
    """

    def __init__(self, cfg: NetworkConfig, dtype=None):
        self.cfg = cfg
        dtype = dtype or get_default_dtype()
        ch = [cfg.channels(i) for i in range(DEPTH)]
        prev = cfg.in_channels
        for i in range(DEPTH):
            setattr(self, f"enc{i}", ConvBlock(prev, ch[i], dtype=dtype))
            prev = ch[i]
        for m in range(1, 5):
            setattr(self, f"dec{m}", DecoderBlock(ch[5 - m], ch[4 - m], dtype=dtype))
        for m in range(1, 5):
            setattr(self, f"side{m}", Conv2d(ch[4 - m], 1, 3, dtype=dtype))
        self.fuse = Conv2d(4, 1, 1, dtype=dtype)

    def forward(self, x: Tensor, features: dict | None = None) -> SaliencyOutputs:
        cfg = self.cfg
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input [N,{cfg.in_channels},S,S], got {list(x.shape)}")
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input spatial size must be divisible by 16, got {h}x{w}")
        if self.training and (h, w) != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"training input must be {cfg.input_size}x{cfg.input_size}, got {h}x{w}")

        skips = []
        feat = x
        for i in range(DEPTH):
            if i:
                feat = maxpool2d(feat)
            feat = getattr(self, f"enc{i}")(feat)
            skips.append(feat)
            if features is not None:
                features[f"enc{i}"] = feat.shape

        logits = []
        for m in range(1, 5):
            feat = getattr(self, f"dec{m}")(feat, skips[4 - m])
            if features is not None:
                features[f"dec{m}"] = feat.shape
            side = getattr(self, f"side{m}")(feat)
            logits.append(upsample_bilinear(side, h, w))

        side_maps = [T.sigmoid(z) for z in logits]
        fused = T.sigmoid(self.fuse(T.concat_channels(logits)))
        if features is not None:
            for m, s in enumerate(side_maps, 1):
                features[f"side{m}"] = s.shape
            features["fuse"] = fused.shape
        return SaliencyOutputs(side_maps, fused)


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=None) -> SalFAUNet:
    """Construct the network and He-initialize every convolution from ``seed``."""
    net = SalFAUNet(cfg, dtype=dtype)
    rng = np.random.default_rng(seed)
    for module in net.modules():
        if isinstance(module, Conv2d):
            init_he(module, rng)
    return net


def forward(net: SalFAUNet, x: Tensor, mode: str = "eval") -> SaliencyOutputs:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    net.train(mode == "train")
    if mode == "eval":
        with T.no_grad():
            return net(x)
    return net(x)


def shape_plan(cfg: NetworkConfig, batch: int = 1) -> list[tuple[str, int, int, int]]:
    """(stage, channels, height, width) for every stage, computed symbolically."""
    s = cfg.input_size
    rows = []
    shape = (batch, cfg.in_channels, s, s)
    enc_shapes = []
    for i in range(DEPTH):
        if i:
            shape = T.infer_shape("maxpool2d", shape)
        shape = T.infer_shape("conv2d", shape, in_channels=shape[1], out_channels=cfg.channels(i))
        enc_shapes.append(shape)
        rows.append((f"enc{i}", *shape[1:]))
    for m in range(1, 5):
        skip = enc_shapes[4 - m]
        up = T.infer_shape("upsample_bilinear", shape, out_h=skip[2], out_w=skip[3])
        cat = T.infer_shape("concat_channels", skip, up)
        shape = T.infer_shape("conv2d", cat, in_channels=cat[1], out_channels=skip[1])
        rows.append((f"dec{m}", *shape[1:]))
    for m in range(1, 5):
        rows.append((f"side{m}", 1, s, s))
    rows.append(("fuse", 1, s, s))
    return rows


def format_plan(rows) -> str:
    return "\n".join(f"{name}: {c}×{h}×{w}" for name, c, h, w in rows)


def network_from_state(state: dict[str, np.ndarray], input_size: int | None = None) -> SalFAUNet:
    """Rebuild a network from checkpoint tensors; width is read from ``enc0.conv1.weight``."""
    try:
        first = state["enc0.conv1.weight"]
    except KeyError:
        raise ShapeError("checkpoint has no enc0.conv1.weight tensor") from None
    base, in_channels = int(first.shape[0]), int(first.shape[1])
    net = SalFAUNet(NetworkConfig(in_channels, base, input_size or 288), dtype=np.float32)
    net.load_state_dict(state)
    return net
