"""Module/parameter plumbing and the small layer set the network needs."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that is always tracked and registered by its module."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: Optional[float] = 0.02,
                 fan_in: Optional[int] = None) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling.

    ``std=None`` scales by fan-in instead: ``std = 1 / sqrt(fan_in)``.
    """
    if std is None:
        if not fan_in:
            raise ValueError("fan-in scaled init needs fan_in")
        std = 1.0 / np.sqrt(fan_in)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Container that discovers parameters, buffers and children by attribute.

    Attribute order is insertion order, but the public registry
    (:meth:`named_parameters`) is sorted by dotted name so that it is stable
    across construction order.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _walk_params(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value._walk_params(full + ".")

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return sorted(self._walk_params(), key=lambda kv: kv[0])

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, value in vars(self).items():
            if name.startswith("buf_") and isinstance(value, np.ndarray):
                out.append((f"{prefix}{name[4:]}", value))
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{name}."))
        return sorted(out, key=lambda kv: kv[0])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return dict(sorted(state.items()))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unknown = set(state) - expected
        if missing or unknown:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (e.g. float64 for gradchecks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name, value in list(vars(self).items()):
            if name.startswith("buf_") and isinstance(value, np.ndarray):
                setattr(self, name, value.astype(dtype))
        for _, child in self._children():
            if isinstance(child, Module):
                child._cast_buffers(dtype)


class Identity(Module):
    def forward(self, x):
        return x


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        groups: int = 1,
        bias: bool = True,
        zero_init: bool = False,
        std: Optional[float] = 0.02,
    ):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        shape = (out_ch, in_ch // groups, kernel_size, kernel_size)
        w = np.zeros(shape) if zero_init else trunc_normal(rng, shape, std, fan_in=shape[1] * kernel_size ** 2)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.buf_running_mean = np.zeros(channels, dtype=np.float32)
        self.buf_running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(
            x, self.weight, self.bias, self.buf_running_mean, self.buf_running_var,
            training=self.training, eps=self.eps, momentum=self.momentum,
        )


class LayerNorm2d(Module):
    """Channel-wise layer norm applied at every spatial position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.weight, self.bias, self.eps)
