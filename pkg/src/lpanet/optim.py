"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


def sgd_step(params: Iterable[Tensor], buffers: dict, lr: float, momentum: float,
             weight_decay: float, names: Iterable[str] | None = None) -> None:
    """One in-place update: buf = momentum*buf + (grad + wd*w); w -= lr*buf.

    ``buffers`` maps a parameter key (its name, or ``id`` when no names are
    given) to its momentum buffer and is created lazily. Parameters without a
    gradient are left untouched.
    """
    params = list(params)
    keys = list(names) if names is not None else [id(p) for p in params]
    for key, p in zip(keys, params):
        if p.grad is None:
            continue
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        buf = buffers.get(key)
        if buf is None or momentum == 0:
            buf = d.copy()
        else:
            buf = momentum * buf + d
        buffers[key] = buf.astype(p.dtype, copy=False)
        p.data = (p.data - lr * buf).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, named_params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = named_params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params.values(), self.buffers, self.lr, self.momentum,
                 self.weight_decay, names=self.params.keys())
