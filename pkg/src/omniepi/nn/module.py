"""Parameter containers and the basic layers."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Parameter, Tensor, get_dtype
from ..errors import CheckpointError


class Module:
    """Holds parameters and sub-modules as attributes, in definition order."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr                   # in place: optimisers hold references to p.data

    def to(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        dtype = get_dtype()
        self.weight = Parameter(_uniform(rng, (fan_out, fan_in), fan_in), dtype=dtype)
        self.bias = Parameter(np.zeros(fan_out), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, ops.permute(self.weight, (1, 0)))
        return y + self.bias if self.bias is not None else y


class Conv(Module):
    """Zero-padded 'same' convolution over the trailing len(kernel) axes."""

    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator,
                 dilation=1, depthwise: bool = False, bias: bool = True):
        kernel = tuple(kernel)
        dtype = get_dtype()
        cw = 1 if depthwise else cin
        fan_in = cw * math.prod(kernel)
        self.weight = Parameter(_uniform(rng, (cout, cw) + kernel, fan_in), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype) if bias else None
        self.dilation = dilation
        self.depthwise = depthwise

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv(x, self.weight, self.bias, dilation=self.dilation, depthwise=self.depthwise)


class LayerNorm(Module):
    def __init__(self, channels: int):
        dtype = get_dtype()
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, axis=axis)
