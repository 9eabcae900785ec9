"""Attention head and the attention losses.

The head maps backbone features to M = K + Q sigmoid maps: K of them
are trained against rasterized keypoint targets with a multi-scale
BCE, the remaining Q only by the classification loss plus a variance
regularizer that pushes each map's mean activation toward 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2dLayer
from .tensor import Tensor

CLAMP_EPS = 1e-7
DEFAULT_SCALES = (1, 3, 7)


@dataclass
class AttentionStack:
    """M attention maps in (0,1): first K supervised, last Q complementary."""

    maps: Tensor  # [N, H, W, M]
    num_supervised: int
    num_complementary: int

    def __post_init__(self):
        k, q = self.num_supervised, self.num_complementary
        if k < 0 or q < 0 or k + q < 1:
            raise ValueError(f"AttentionStack: need K, Q >= 0 with K+Q >= 1, got {k}/{q}")
        if self.maps.ndim != 4 or self.maps.shape[3] != k + q:
            raise ValueError(f"AttentionStack: maps {self.maps.shape} "
                             f"inconsistent with K+Q = {k + q}")

    def supervised(self) -> Tensor:
        if self.num_supervised == 0:
            raise ValueError("AttentionStack: no supervised maps")
        return T.take(self.maps, range(self.num_supervised), axis=3)

    def complementary(self) -> Tensor:
        k, q = self.num_supervised, self.num_complementary
        if q == 0:
            raise ValueError("AttentionStack: no complementary maps")
        return T.take(self.maps, range(k, k + q), axis=3)


@dataclass
class KeypointTargets:
    """Binary target maps at feature resolution.

    maps[n,:,:,k] is all-zero whenever visible[n,k] is false.
    annotated[n] marks samples that carry keypoint records at all;
    unannotated samples are excluded from the attention loss.
    """

    maps: np.ndarray      # [N, Hf, Wf, K], values in {0,1}
    visible: np.ndarray   # [N, K] bool
    annotated: np.ndarray  # [N] bool

    def __post_init__(self):
        if self.maps.ndim != 4:
            raise ValueError(f"KeypointTargets: maps must be [N,H,W,K], got {self.maps.shape}")
        n, _, _, k = self.maps.shape
        if self.visible.shape != (n, k) or self.annotated.shape != (n,):
            raise ValueError("KeypointTargets: visible/annotated shapes do not match maps")
        # invisible keypoints must have all-zero target planes
        masked = np.moveaxis(self.maps, 3, 1)[~self.visible]
        if masked.size and np.any(masked != 0):
            raise ValueError("KeypointTargets: nonzero map for an invisible keypoint")


class AttentionHead:
    """Two same-pad 3x3 convs (D -> D//4 with ReLU, then D//4 -> M) + sigmoid."""

    def __init__(self, in_channels: int, num_supervised: int, num_complementary: int,
                 rng: np.random.Generator | None = None):
        if num_supervised < 1 or num_complementary < 1:
            raise ValueError("AttentionHead: need K >= 1 supervised and "
                             "Q >= 1 complementary maps")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(in_channels // 4, 1)
        m = num_supervised + num_complementary
        self.num_supervised = num_supervised
        self.num_complementary = num_complementary
        self.conv1 = Conv2dLayer(in_channels, hidden, 3, rng=rng)
        self.conv2 = Conv2dLayer(hidden, m, 3, rng=rng)

    def __call__(self, features: Tensor) -> AttentionStack:
        h = T.relu(self.conv1(features))
        maps = T.sigmoid(self.conv2(h))
        return AttentionStack(maps, self.num_supervised, self.num_complementary)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in (("conv1", self.conv1), ("conv2", self.conv2)):
            for k, v in layer.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


def bce_loss(a, target):
    """Mean binary cross-entropy; a clamped to [1e-7, 1-1e-7]."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if a.shape != target.shape:
        raise ValueError(f"bce_loss: shape mismatch {a.shape} vs {target.shape}")
    ac = T.clip(a, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = T.mul(target, T.log(ac))
    negt = T.sub(1.0, target)
    neg = T.mul(negt, T.log(T.sub(1.0, ac)))
    return T.neg(T.tmean(T.add(pos, neg)))


def _as_nhwc(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        h, w = t.shape
        return T.reshape(t, (1, h, w, 1)), True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"expected [H,W] or [N,H,W,C] map, got {t.shape}")


def multiscale_attention_loss(a, target, scales=DEFAULT_SCALES):
    """Sum of BCE terms after stride-1 same-pad max-pools of both maps."""
    for k in scales:
        if k % 2 == 0 or k < 1:
            raise ValueError(f"multiscale_attention_loss: kernels must be odd, got {scales}")
    a = a if isinstance(a, Tensor) else Tensor(a)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if a.shape != target.shape:
        raise ValueError(f"multiscale_attention_loss: shape mismatch "
                         f"{a.shape} vs {target.shape}")
    a4, _ = _as_nhwc(a)
    t4, _ = _as_nhwc(target)
    total = None
    for k in scales:
        ap = T.maxpool2d(a4, k, stride=1, same_pad=True)
        tp = T.maxpool2d(t4, k, stride=1, same_pad=True)
        term = bce_loss(ap, tp)
        total = term if total is None else T.add(total, term)
    return total


def variance_regularizer(a):
    """abar*(1-abar) for abar = mean activation; in [0, 0.25]."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    abar = T.tmean(a)
    return T.mul(abar, T.sub(1.0, abar))


@dataclass
class LossTerms:
    """total is the scalar loss tensor; the floats are for logging."""

    total: Tensor
    ce: float
    attn: float
    reg: float


def total_loss(class_logits: Tensor, labels, stack: AttentionStack | None,
               targets: KeypointTargets | None, scales=DEFAULT_SCALES,
               reg_all_maps: bool = False) -> LossTerms:
    """CE + (1/K)*sum_k multiscale BCE - (1/Q)*sum_q regularizer.

    The attention term averages over annotated samples only; the
    regularizer averages over the whole batch. With stack None (plain
    pooling modes) the loss is CE alone. reg_all_maps drops the BCE
    term and regularizes all M maps (supervision ablation).
    """
    ce = T.cross_entropy(class_logits, labels)
    if stack is None:
        return LossTerms(ce, float(ce.data), 0.0, 0.0)

    n, h, w, m = stack.maps.shape
    total = ce
    attn_val = 0.0

    if not reg_all_maps:
        if targets is None:
            raise ValueError("total_loss: supervised maps need targets "
                             "(pass reg_all_maps=True to train without)")
        if targets.maps.shape != (n, h, w, stack.num_supervised):
            raise ValueError(f"total_loss: target maps {targets.maps.shape} do not "
                             f"match stack {(n, h, w, stack.num_supervised)}")
        ann = np.flatnonzero(targets.annotated)
        if ann.size > 0:
            a_sup = stack.supervised()
            a_ann = T.take(a_sup, ann, axis=0)
            t_ann = Tensor(targets.maps[ann])
            # joint mean over (sample, h, w, keypoint) = per-map BCE
            # averaged over K and over annotated samples
            attn = multiscale_attention_loss(a_ann, t_ann, scales=scales)
            total = T.add(total, attn)
            attn_val = float(attn.data)
        reg_maps = stack.complementary()
        q = stack.num_complementary
    else:
        reg_maps = stack.maps
        q = m

    abar = T.tmean(reg_maps, axis=(1, 2))          # [N, q]
    per_map = T.mul(abar, T.sub(1.0, abar))        # abar*(1-abar)
    reg = T.tmean(per_map)                          # mean over batch and maps
    total = T.sub(total, reg)
    return LossTerms(total, float(ce.data), attn_val, float(reg.data))
