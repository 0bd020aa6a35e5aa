"""Layer containers on top of :mod:`ndtplace.autodiff`.

Feature axis is always last; every other axis is treated as batch.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            value = np.asarray(value)
            if name in own:
                p = own[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.astype(p.dtype).copy()
            elif name in bufs:
                bufs[name][...] = value

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.momentum, self.eps = momentum, eps
        self._buffers = {"running_mean": np.zeros(dim), "running_var": np.ones(dim)}

    def forward(self, x: Tensor) -> Tensor:
        y = ad.batchnorm(
            x, self._buffers["running_mean"], self._buffers["running_var"], self.training, self.momentum, self.eps
        )
        return y * self.gamma + self.beta


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, -1, self.eps) * self.gamma + self.beta


class Dropout(Module):
    """Dropout whose mask is a pure function of (seed, op_id, step)."""

    def __init__(self, p: float, op_id: int = 0):
        super().__init__()
        self.p = p
        self.op_id = op_id
        self.seed = 0
        self.step = 0

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.training, (self.seed, self.op_id, self.step))


class LinearStack(Module):
    """Linear -> BatchNorm -> ReLU, repeated for each width."""

    def __init__(self, n_in: int, widths, rng: np.random.Generator, momentum: float = 0.9):
        super().__init__()
        self.layers = []
        self.norms = []
        for w in widths:
            # BatchNorm re-centres each channel, so a bias here would be dead weight
            self.layers.append(Linear(n_in, w, rng, bias=False))
            self.norms.append(BatchNorm(w, momentum))
            n_in = w

    def forward(self, x: Tensor) -> Tensor:
        for lin, bn in zip(self.layers, self.norms):
            x = ad.relu(bn(lin(x)))
        return x


def assign_dropout_ids(model: Module, seed: int) -> None:
    """Give every Dropout in ``model`` a stable op id (traversal order) and the run seed."""
    for i, m in enumerate(m for m in model.modules() if isinstance(m, Dropout)):
        m.op_id = i
        m.seed = seed


def set_step(model: Module, step: int) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.step = step
