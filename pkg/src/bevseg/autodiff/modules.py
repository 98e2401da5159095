"""Layer containers built on the op library.

``Module`` discovers parameters and persistent state by walking instance
attributes (tensors, sub-modules, and lists of sub-modules), so composite
models get checkpointing and optimizer wiring for free.
"""

from __future__ import annotations

import numpy as np

from bevseg.autodiff import ops
from bevseg.autodiff.tensor import Tensor


class Module:
    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def __call__(self, x, training: bool = False):
        return self.forward(x, training=training)

    # -- traversal ----------------------------------------------------------
    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        """Non-learnable persistent arrays (e.g. batchnorm running stats)."""
        for name, arr in self._own_state().items():
            yield prefix + name, arr
        for name, child in self._children():
            yield from child.named_state(prefix=f"{prefix}{name}.")

    def _own_state(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(rng.normal(0.0, std, (out_channels, in_channels, kernel_size, kernel_size)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x, training: bool = False):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 2, bias: bool = True, *, rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(rng.normal(0.0, std, (in_channels, out_channels, kernel_size, kernel_size)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype) if bias else None
        self.stride = stride
        self.output_padding = 0  # adjusted per call site when skip extents are odd

    def forward(self, x, training: bool = False):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                    output_padding=self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, *, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _own_state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training: bool = False):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *,
                 rng: np.random.Generator, dtype=np.float32):
        std = float(np.sqrt(1.0 / in_features))
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x, training: bool = False):
        return ops.linear(x, self.weight, self.bias)


class ConvBnRelu(Module):
    """conv -> batchnorm -> relu, the workhorse block of both heads."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: int = 1, *, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, padding=padding,
                           bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x, training: bool = False):
        return ops.relu(self.bn(self.conv(x, training), training))
