"""Convolution, batch norm, pooling and bilinear resampling on :class:`Tensor`.

All layouts are N,C,H,W. Convolutions are stride 1 with same padding, so the
only ops that change spatial size are :func:`maxpool2d` and
:func:`upsample_bilinear`.
"""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from .tensor import (
    SHAPE_RULES,
    ShapeError,
    Tensor,
    _check_precision,
    _record,
    get_default_dtype,
    is_grad_enabled,
)


class Module:
    """Minimal parameter container with dotted, insertion-ordered names."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name, in registration order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, value in state.items():
            target = own[name]
            if tuple(value.shape) != target.shape:
                raise ShapeError(f"{name}: expected shape {list(target.shape)}, got {list(value.shape)}")
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, dtype=None):
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        dtype = dtype or get_default_dtype()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = kernel // 2
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel, kernel), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(self, x)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=None):
        dtype = dtype or get_default_dtype()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(self, x)


def init_he(layer: Conv2d, rng: np.random.Generator) -> None:
    """He-normal weights with std sqrt(2 / fan_in); zero bias."""
    fan_in = layer.in_channels * layer.kernel * layer.kernel
    std = np.sqrt(2.0 / fan_in)
    w = layer.weight.data
    w[...] = rng.normal(0.0, std, size=w.shape).astype(w.dtype)
    layer.bias.data[...] = 0


def _check_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects an N,C,H,W tensor, got shape {list(x.shape)}")


def conv2d(layer: Conv2d, x: Tensor) -> Tensor:
    """Stride-1, zero-padded 2-D convolution (cross-correlation).

    Computed as one matrix product per kernel offset in a fixed order, which
    keeps memory proportional to the input and the summation order
    independent of any BLAS threading of the individual products.
    """
    _check_rank4(x, "conv2d")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeError(f"conv2d expected {layer.in_channels} input channels, got {c} (shape {list(x.shape)})")
    weight, bias = layer.weight, layer.bias
    _check_precision(x, weight, bias)
    k, p, o = layer.kernel, layer.padding, layer.out_channels
    wd = weight.data
    # (k, k, O, C): each offset's weight matrix contiguous so matmul hits BLAS
    wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))

    # channel-major view: (C, N*H*W) columns
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
    out_t = np.zeros((o, n * h * w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols = xt[:, :, u:u + h, v:v + w].reshape(c, -1)
            out_t += wk[u, v] @ cols
    out_t += bias.data[:, None]
    out = np.ascontiguousarray(out_t.reshape(o, n, h, w).transpose(1, 0, 2, 3))

    def backward_fn(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = np.zeros((k, k, o, c), dtype=wd.dtype)
        gx = np.zeros_like(xt)
        for u in range(k):
            for v in range(k):
                cols = xt[:, :, u:u + h, v:v + w].reshape(c, -1)
                gw[u, v] = gt @ cols.T
                gx[:, :, u:u + h, v:v + w] += (wk[u, v].T @ gt).reshape(c, n, h, w)
        if p:
            gx = gx[:, :, p:p + h, p:p + w]
        return gx.transpose(1, 0, 2, 3), gw.transpose(2, 3, 0, 1), gt.sum(axis=1)

    return _record(out, (x, weight, bias), backward_fn, "conv2d")


def batchnorm2d(layer: BatchNorm2d, x: Tensor) -> Tensor:
    _check_rank4(x, "batchnorm2d")
    if x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm2d expected {layer.channels} channels, got {x.shape[1]}")
    gamma, beta = layer.gamma, layer.beta
    _check_precision(x, gamma, beta)
    g4 = gamma.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)

    if layer.training:
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        xhat = centered * inv_std
        mom = layer.momentum
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        layer.running_mean[...] = (1 - mom) * layer.running_mean + mom * mu.reshape(-1)
        layer.running_var[...] = (1 - mom) * layer.running_var + mom * unbiased

        def backward_fn(g):
            dxhat = g * g4
            sum_d = dxhat.sum(axis=axes, keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = (1.0 / np.sqrt(layer.running_var + layer.eps)).astype(x.dtype).reshape(1, -1, 1, 1)
        xhat = (x.data - layer.running_mean.reshape(1, -1, 1, 1)) * inv_std

        def backward_fn(g):
            return g * g4 * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * g4 + beta.data.reshape(1, -1, 1, 1)).astype(x.dtype)
    return _record(out, (x, gamma, beta), backward_fn, "batchnorm2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    _check_rank4(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even H and W, got shape {list(x.shape)}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(np.ascontiguousarray(out), (x,), backward_fn, "maxpool2d")


def _interp_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source indices and blend weights for one axis."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of the half-pixel linear blend along one axis."""
    i0, i1, t = _interp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # a + t*(b-a) reproduces constants exactly; the clamp removes rounding overshoot
    out = a + t * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def resize_bilinear_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of an array (half-pixel centers)."""
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    if (out_h, out_w) == (h, w):
        return x.copy()
    i0, i1, t = _interp_axis(h, out_h)
    rows = _lerp(x[..., i0, :], x[..., i1, :], t.astype(dtype)[:, None])
    j0, j1, s = _interp_axis(w, out_w)
    return _lerp(rows[..., j0], rows[..., j1], s.astype(dtype))


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_rank4(x, "upsample_bilinear")
    h, w = x.shape[2:]
    out = resize_bilinear_array(x.data, out_h, out_w)
    if not is_grad_enabled():
        return _record(out, (x,), None, "upsample_bilinear")
    ry = interp_matrix(h, out_h).astype(x.dtype)
    rx = interp_matrix(w, out_w).astype(x.dtype)

    def backward_fn(g):
        return (ry.T @ g @ rx,)

    return _record(out, (x,), backward_fn, "upsample_bilinear")


def _same(shape, *_, **__):
    return tuple(shape)


def _conv_shape(shape, in_channels, out_channels, kernel=3):
    if len(shape) != 4 or shape[1] != in_channels:
        raise ShapeError(f"conv2d expected {in_channels} input channels, got shape {list(shape)}")
    return shape[0], out_channels, shape[2], shape[3]


def _pool_shape(shape):
    if shape[2] % 2 or shape[3] % 2:
        raise ShapeError(f"maxpool2d needs even H and W, got shape {list(shape)}")
    return shape[0], shape[1], shape[2] // 2, shape[3] // 2


SHAPE_RULES.update({
    "conv2d": _conv_shape,
    "batchnorm2d": _same,
    "maxpool2d": _pool_shape,
    "upsample_bilinear": lambda s, out_h, out_w: (s[0], s[1], out_h, out_w),
})
