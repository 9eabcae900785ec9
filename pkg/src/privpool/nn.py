"""Conv and linear layers with Glorot-uniform init.

Kernels are uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)),
fan_in = kh*kw*cin and fan_out = kh*kw*cout for convs; biases start
at zero. Init is deterministic given the generator passed in.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_conv_kernel(kh: int, kw: int, cin: int, cout: int,
                     rng: np.random.Generator) -> np.ndarray:
    b = glorot_bound(kh * kw * cin, kh * kw * cout)
    return rng.uniform(-b, b, size=(kh, kw, cin, cout))


def init_linear_weight(din: int, dout: int, rng: np.random.Generator) -> np.ndarray:
    b = glorot_bound(din, dout)
    return rng.uniform(-b, b, size=(din, dout))


class Conv2dLayer:
    """3x3-style conv over NHWC input; holds kernel[kh,kw,ci,co] and bias[co]."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, *,
                 stride: int = 1, padding: int | str = "same",
                 rng: np.random.Generator | None = None):
        k = int(kernel_size)
        if k % 2 == 0:
            raise ValueError(f"Conv2dLayer: kernel size must be odd, got {k}")
        if padding == "same":
            if stride != 1:
                raise ValueError("Conv2dLayer: 'same' padding requires stride 1")
            padding = k // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = int(stride)
        self.padding = int(padding)
        self.kernel = Tensor(init_conv_kernel(k, k, cin, cout, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias,
                        stride=self.stride, padding=self.padding)

    def parameters(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


class LinearLayer:
    """y = x @ weight + bias with weight[din,dout]."""

    def __init__(self, din: int, dout: int, *, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(init_linear_weight(din, dout, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"LinearLayer: input {x.shape} does not match "
                             f"weight {self.weight.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}
