"""Parameter containers and the layer set used by the encoders and classifiers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamModule:
    """A differentiable function with named parameters and buffers.

    Parameters are leaf :class:`Tensor` objects whose ``grad`` buffer always has
    the parameter's shape.  ``trainable`` toggles gradient recording for every
    parameter of the module and its children; ``training`` selects batch or
    running statistics in batch norm.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, ParamModule] = {}
        self.training = True
        self._trainable = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=self._trainable, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_module(self, name: str, module: "ParamModule") -> "ParamModule":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        for p in self._params.values():
            p.requires_grad = self._trainable
        for child in self._children.values():
            child.trainable = flag

    def train(self, mode: bool = True) -> "ParamModule":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "ParamModule":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.grad is None or p.grad.shape != p.data.shape or p.grad.dtype != p.data.dtype:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad[...] = 0.0

    def astype(self, dtype) -> "ParamModule":
        """Cast parameters and buffers in place; gradients are reset."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for mod in self._walk():
            for k in mod._buffers:
                mod._buffers[k] = mod._buffers[k].astype(dtype)
        return self

    def _walk(self) -> Iterator["ParamModule"]:
        yield self
        for child in self._children.values():
            yield from child._walk()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{k}": p.data.copy() for k, p in self.named_parameters()}
        state.update({f"buffer:{k}": b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = {f"param:{k}" for k in params}
        for mod_prefix, mod in self._prefixed_modules():
            expected |= {f"buffer:{mod_prefix}{k}" for k in mod._buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, p in params.items():
            value = state[f"param:{k}"]
            if value.shape != p.data.shape:
                raise T.ShapeError(f"{k}: stored shape {value.shape} != {p.data.shape}")
            p.data = np.array(value, dtype=value.dtype)
            p.grad = np.zeros_like(p.data)
        for mod_prefix, mod in self._prefixed_modules():
            for k in list(mod._buffers):
                mod._buffers[k] = np.array(state[f"buffer:{mod_prefix}{k}"])

    def _prefixed_modules(self, prefix: str = "") -> Iterator[tuple[str, "ParamModule"]]:
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._prefixed_modules(f"{prefix}{cname}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(ParamModule):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1, bias: bool = False):
        super().__init__()
        self.stride = stride
        fan_in = in_ch * 9
        self.weight = self.add_param("weight", kaiming_uniform(rng, (out_ch, in_ch, 3, 3), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)


class Linear(ParamModule):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        super().__init__()
        w = np.zeros((out_f, in_f)) if zero_init else kaiming_uniform(rng, (out_f, in_f), in_f)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(out_f)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(ParamModule):
    """Batch norm over channels of a (N, C, H, W) map or features of (N, C)."""

    def __init__(self, num: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(num))
        self.beta = self.add_param("beta", np.zeros(num))
        self.add_buffer("running_mean", np.zeros(num))
        self.add_buffer("running_var", np.ones(num))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBlock(ParamModule):
    """conv3x3 -> BN -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 2):
        super().__init__()
        self.conv = self.add_module("conv", Conv2d(in_ch, out_ch, rng, stride=stride))
        self.bn = self.add_module("bn", BatchNorm(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
