"""Tiny module system: named parameters, init helpers, checkpoint checksum."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def eye_param(n: int, dtype) -> Tensor:
    return Tensor(np.eye(n, dtype=dtype), requires_grad=True)


def _walk(name, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


class Module:
    """Parameters are Tensor attributes; submodules are Module attributes or
    (arbitrarily nested) lists of them. Iteration order follows attribute
    insertion order, so checkpoint layouts are stable."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            from .errors import ConfigurationError
            raise ConfigurationError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                from .errors import DimensionError
                raise DimensionError(f"param {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype, bias: bool = True):
        self.W = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.b = zeros_param((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gamma = ones_param((d,), dtype)
        self.beta = zeros_param((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def params_checksum(module: Module) -> str:
    """Order-independent digest of every named parameter's bytes."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
