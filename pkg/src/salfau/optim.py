"""Adam and the deep-supervision training loop."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np

from . import checkpoint
from .data import Sample, preprocess_train
from .loss import LossWeights, total_loss
from .network import SalFAUNet
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; defaults lr=1e-3, betas=(0.9, 0.999), eps=1e-8."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (self.lr / bc1) * m / denom

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        state["step"] = np.array([self.t], dtype=np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            for slot, store in (("m", self.m), ("v", self.v)):
                name = f"{slot}.{k}"
                if name not in state:
                    raise KeyError(f"optimizer state missing {name!r}")
                store[k][...] = state[name]
        self.t = int(state["step"].reshape(-1)[0])


def adam_step(state: Adam, params=None, grads=None) -> None:
    """Functional form: optionally install ``grads`` (name -> array) then step."""
    if grads is not None:
        for k, g in grads.items():
            state.params[k].grad = np.asarray(g, dtype=state.params[k].dtype)
    state.step()


def batch_indices(n: int, batch: int, iters: int, rng: np.random.Generator):
    """Yield ``iters`` index batches from epoch-wise seeded shuffles, wrapping across epochs."""
    order = np.empty(0, dtype=np.intp)
    for _ in range(iters):
        while order.size < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def train_loop(net: SalFAUNet, dataset: Sequence[Sample], w: LossWeights | None = None, iters: int = 500,
               batch: int = 12, seed: int = 0, optimizer: Adam | None = None,
               checkpoint_every: int = 0, checkpoint_path=None,
               on_iter: Callable[[int, float], None] | None = None) -> list[float]:
    """Train ``net`` in place and return the per-iteration total loss."""
    if not dataset:
        raise ValueError("dataset is empty")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    w = w or LossWeights()
    opt = optimizer or Adam(net.named_parameters())
    rng = np.random.default_rng(seed)
    size = net.cfg.input_size
    dtype = net.enc0.conv1.weight.dtype
    net.train()
    history: list[float] = []
    for it, idx in enumerate(batch_indices(len(dataset), batch, iters, rng), 1):
        opt.zero_grad()
        samples = [preprocess_train(dataset[i], rng, size) for i in idx]
        x = Tensor(np.stack([s.image for s in samples]).astype(dtype))
        g = Tensor(np.stack([s.mask for s in samples]).astype(dtype))
        loss = total_loss(net(x), g, w)
        backward(loss)
        opt.step()
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at iteration {it}")
        history.append(value)
        if on_iter is not None:
            on_iter(it, value)
        if checkpoint_every and checkpoint_path and it % checkpoint_every == 0:
            checkpoint.save(checkpoint_path, net.state_dict(), opt.state_dict())
            logger.info("iteration %d: checkpoint written to %s", it, checkpoint_path)
    return history
