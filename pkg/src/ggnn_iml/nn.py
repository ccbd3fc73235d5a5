"""Parameter containers shared by every network component."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, layer_norm


def param(arr, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Module:
    """Walks instance attributes (in assignment order) to find parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, rng=None, bias=True, dtype=np.float32, gain=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        if gain is not None:  # variance-scaled normal; gain sqrt(2) ahead of a relu
            w = rng.normal(0.0, gain / np.sqrt(fan_in), (cout, cin, k, k))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (cout, cin, k, k))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(cout), dtype) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng=None, bias=True, std=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if std is None:
            bound = 1.0 / np.sqrt(din)
            w = rng.uniform(-bound, bound, (din, dout))
        else:
            w = rng.normal(0.0, std, (din, dout))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(dout), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32):
        self.gamma = param(np.ones(d), dtype)
        self.beta = param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)
