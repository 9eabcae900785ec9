"""Pooling operators over attention-expanded feature maps.

expand multiplies each attention map into the feature channels,
giving a five-axis map [N,H,W,M,D]. First-order pooling takes the
per-slice mean (and max); second-order pooling builds a channel
covariance over the S = H*W*M expanded samples, adds a ridge, and
takes its Newton-Schulz square root.

The plain variants (avg_pool on F, cov_pool on F) share code with
the expanded ones so that a single all-ones attention map reproduces
them bit for bit.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionStack
from .linalg import add_ridge, ns_sqrt
from .nn import init_linear_weight
from .tensor import Tensor

RIDGE_SCALE = 1e-5


def expand(features: Tensor, stack: AttentionStack) -> Tensor:
    """F'[n,h,w,m,d] = F[n,h,w,d] * a[n,h,w,m] -> [N,H,W,M,D]."""
    if features.ndim != 4:
        raise ValueError(f"expand: features must be [N,H,W,D], got {features.shape}")
    n, h, w, d = features.shape
    if stack.maps.shape[:3] != (n, h, w):
        raise ValueError(f"expand: spatial mismatch, features {features.shape} "
                         f"vs maps {stack.maps.shape}")
    f5 = T.reshape(features, (n, h, w, 1, d))
    a5 = T.reshape(stack.maps, (n, h, w, stack.maps.shape[3], 1))
    return T.mul(f5, a5)


def avg_pool(features: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,H,W,D] -> [N,D]."""
    if features.ndim != 4:
        raise ValueError(f"avg_pool: expected [N,H,W,D], got {features.shape}")
    return T.tmean(features, axis=(1, 2))


def avg_pr_pool(expanded: Tensor) -> Tensor:
    """Per-slice mean and max over (h,w): [N,H,W,M,D] -> [N,2MD].

    Slice order follows the attention maps; within a slice the mean
    block precedes the max block.
    """
    if expanded.ndim != 5:
        raise ValueError(f"avg_pr_pool: expected [N,H,W,M,D], got {expanded.shape}")
    n, h, w, m, d = expanded.shape
    blocks = []
    for i in range(m):
        # contiguous [N,H,W,D] slice keeps the reduction order identical
        # to avg_pool, so an all-ones map reproduces it bitwise
        sl = T.reshape(T.take(expanded, [i], axis=3), (n, h, w, d))
        blocks.append(T.tmean(sl, axis=(1, 2)))
        blocks.append(T.tmax(sl, axis=(1, 2)))
    return T.concat(blocks, axis=1)


class ReduceLayer:
    """Learned 1x1 channel reduction D -> reduced dim, shared across maps."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator | None = None):
        if out_channels > in_channels:
            raise ValueError(f"ReduceLayer: reduced dim {out_channels} exceeds "
                             f"channel count {in_channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Tensor(init_linear_weight(in_channels, out_channels, rng),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=T.default_dtype()),
                           requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim not in (4, 5) or x.shape[-1] != self.in_channels:
            raise ValueError(f"ReduceLayer: expected [...,{self.in_channels}] "
                             f"with 4 or 5 axes, got {x.shape}")
        lead = x.shape[:-1]
        flat = T.reshape(x, (int(np.prod(lead)), self.in_channels))
        out = T.add(T.matmul(flat, self.weight), self.bias)
        return T.reshape(out, lead + (self.out_channels,))

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def cov_pool(x: Tensor, with_sqrt: bool = True, ridge_scale: float = RIDGE_SCALE,
             ns_iters: int = 5) -> Tensor:
    """Channel covariance over spatial (and map) samples -> [N, D*D].

    Accepts [N,H,W,D] (S = HW) or [N,H,W,M,D] (S = HWM). Each sample's
    covariance gets a trace-scaled ridge, then the Newton-Schulz square
    root; the symmetric matrix is flattened row-major.
    """
    if x.ndim == 4:
        n, h, w, d = x.shape
        s = h * w
    elif x.ndim == 5:
        n, h, w, m, d = x.shape
        s = h * w * m
    else:
        raise ValueError(f"cov_pool: expected 4 or 5 axes, got {x.shape}")
    if s < 2:
        raise ValueError(f"cov_pool: need at least 2 samples, got S={s}")

    xs = T.reshape(x, (n, s, d))
    centered = T.sub(xs, T.tmean(xs, axis=1, keepdims=True))
    sigma = T.mul(T.matmul(T.transpose(centered, (0, 2, 1)), centered), 1.0 / s)
    # gemm output is not exactly symmetric; the sqrt iteration needs it to be
    sigma = T.mul(T.add(sigma, T.transpose(sigma, (0, 2, 1))), 0.5)

    rows = []
    for i in range(n):
        si = T.reshape(T.take(sigma, [i], axis=0), (d, d))
        si = add_ridge(si, ridge_scale)
        if with_sqrt:
            si = ns_sqrt(si, iters=ns_iters)
        rows.append(T.reshape(si, (1, d * d)))
    return T.concat(rows, axis=0)
