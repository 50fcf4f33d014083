"""Parameter containers and seeded initialization."""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, get_default_dtype


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, module name) so shared modules get identical inits."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> Tensor:
    """He-style uniform init: variance ``gain / fan_in``."""
    bound = np.sqrt(3.0 * gain / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Anything holding parameters as attributes (Tensors) or sub-modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Conv(Module):
    """Square convolution with bias (He-uniform weights, fan-in uniform bias; all zero if ``zero``)."""

    def __init__(self, c_in: int, c_out: int, k: int, seed: int, name: str,
                 stride: int = 1, pad: int = 0, zero: bool = False):
        self.stride, self.pad = stride, pad
        if zero:
            self.weight = zeros((c_out, c_in, k, k))
            self.bias = zeros((c_out,))
        else:
            rng = init_rng(seed, name)
            fan_in = c_in * k * k
            self.weight = uniform(rng, (c_out, c_in, k, k), fan_in)
            self.bias = uniform(rng, (c_out,), fan_in, gain=1.0 / 3.0)

    def __call__(self, x: Tensor) -> Tensor:
        from .functional import conv2d
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
