"""Stateful layers wrapping the kernels in :mod:`fastwave.nn.functional`.

Each layer caches what its backward pass needs during ``forward``;
``backward(grad)`` accumulates into ``Parameter.grad`` and returns the
gradient with respect to the layer input. A layer may be run forward any
number of times, but ``backward`` always refers to the most recent call.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F


class Parameter:
    """Dense array with a same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


class Module:
    """Container that registers parameters, buffers and sub-modules in
    assignment order, so parameter iteration is deterministic."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        object.__setattr__(self, name, self._buffers[name])

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if head not in self._buffers:
                raise KeyError(dotted)
            self.register_buffer(head, value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def flops(self, t: int) -> int:
        """Forward FLOPs on a length-``t`` input (one multiply-add = 2)."""
        return sum(child.flops(t) for child in self._children.values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_params(net: Module) -> int:
    return sum(p.size for p in net.parameters())


def count_flops(net: Module, input_length: int) -> int:
    return int(net.flops(input_length))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng=None, zero_init: bool = False):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        shape = (c_out, c_in, k)
        w = np.zeros(shape) if zero_init or rng is None else _uniform(rng, shape, c_in * k)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        self._x = x
        return F.conv1d(x, self.weight.data, self.bias.data)

    def backward(self, gy):
        gx, gw, gb = F.conv1d_backward(gy, self._x, self.weight.data)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def flops(self, t):
        return 2 * self.c_in * self.c_out * self.k * t


class DWConv1d(Module):
    def __init__(self, channels: int, k: int, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.channels, self.k = channels, k
        shape = (channels, 1, k)
        self.weight = Parameter(np.zeros(shape) if rng is None else _uniform(rng, shape, k))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        self._x = x
        return F.dwconv1d(x, self.weight.data, self.bias.data)

    def backward(self, gy):
        gx, gw, gb = F.dwconv1d_backward(gy, self._x, self.weight.data)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def flops(self, t):
        return 2 * self.channels * self.k * t


class PWConv1d(Module):
    def __init__(self, c_in: int, c_out: int, rng=None, zero_init: bool = False, bias_init: float = 0.0):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        shape = (c_out, c_in)
        w = np.zeros(shape) if zero_init or rng is None else _uniform(rng, shape, c_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.full(c_out, float(bias_init)))

    def forward(self, x):
        self._x = x
        return F.pwconv1d(x, self.weight.data, self.bias.data)

    def backward(self, gy):
        gx, gw, gb = F.pwconv1d_backward(gy, self._x, self.weight.data)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def flops(self, t):
        return 2 * self.c_in * self.c_out * t


class DepthwiseSeparableConv1d(Module):
    """``DWConv1d(C_in, k)`` followed by ``PWConv1d(C_in, C_out)``."""

    def __init__(self, c_in: int, c_out: int, k: int, rng=None):
        super().__init__()
        self.dw = DWConv1d(c_in, k, rng)
        self.pw = PWConv1d(c_in, c_out, rng)

    def forward(self, x):
        return self.pw(self.dw(x))

    def backward(self, gy):
        return self.dw.backward(self.pw.backward(gy))


class GRN(Module):
    # 4 element-wise passes: square, scale by n, affine, residual add
    FLOPS_PER_ELEMENT = 4

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.channels, self.eps = channels, eps
        self.gamma = Parameter(np.zeros(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        self._x = x
        return F.grn(x, self.gamma.data, self.beta.data, self.eps)

    def backward(self, gy):
        gx, gg, gb = F.grn_backward(gy, self._x, self.gamma.data, self.eps)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx

    def flops(self, t):
        return self.FLOPS_PER_ELEMENT * self.channels * t


class GELU(Module):
    def __init__(self, channels: int = 0):
        super().__init__()
        self.channels = channels

    def forward(self, x):
        self._x = x
        return F.gelu(x)

    def backward(self, gy):
        return F.gelu_backward(gy, self._x)

    def flops(self, t):
        return self.channels * t


class Linear(Module):
    """Affine map on (B, n_in) vectors."""

    def __init__(self, n_in: int, n_out: int, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_out, n_in)) if rng is None else _uniform(rng, (n_out, n_in), n_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x):
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, gy):
        self.weight.grad += gy.T @ self._x
        self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.data

    def flops(self, t):
        # applied once per evaluation, independent of length
        return 2 * self.n_in * self.n_out


class SigmaEmbedding(Module):
    """Frozen random Fourier features of the noise-conditioning scalar."""

    def __init__(self, dim: int, rng: np.random.Generator, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise ValueError("embedding dim must be even")
        self.dim = dim
        self.register_buffer("freqs", rng.standard_normal(dim // 2) * scale)

    def forward(self, c_noise):
        return F.sigma_embedding(c_noise, self.freqs)

    def flops(self, t):
        return 2 * self.dim


def fft_flops(t: int, channels: int) -> int:
    return int(5 * t * math.log2(t)) * channels
