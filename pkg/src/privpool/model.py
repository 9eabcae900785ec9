"""Classifier assembly: conv backbone, attention head, pooling, linear head.

Four pooling modes share one backbone:
  avg     per-channel spatial mean of the feature map
  avg_pr  attention-expanded mean+max pooling
  cov     square-rooted channel covariance of the (reduced) feature map
  cov_pr  covariance over the attention-expanded, reduced feature map
Attention parameters exist only in the *_pr modes; the 1x1 channel
reduction only in the covariance modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionHead, AttentionStack
from .nn import Conv2dLayer, LinearLayer
from .pooling import ReduceLayer, avg_pool, avg_pr_pool, cov_pool, expand
from .tensor import Tensor, load_tensor, save_tensor

POOL_MODES = ("avg", "avg_pr", "cov", "cov_pr")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    num_classes: int = 8
    input_size: int = 64
    backbone_widths: tuple = (16, 32, 64, 128)
    block_strides: tuple = (2, 2, 2, 2)
    pool_mode: str = "cov_pr"
    num_keypoints: int = 3      # K supervised attention maps
    num_complementary: int = 1  # Q unsupervised attention maps
    reduced_dim: int = 64       # channel count fed to the covariance
    ns_iters: int = 5

    def __post_init__(self):
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}, "
                             f"got {self.pool_mode!r}")
        if len(self.backbone_widths) != len(self.block_strides):
            raise ValueError("backbone_widths and block_strides lengths differ")
        stride_prod = math.prod(self.block_strides)
        if self.input_size % stride_prod != 0:
            raise ValueError(f"input size {self.input_size} not divisible by "
                             f"stride product {stride_prod}")
        if self.uses_covariance and self.reduced_dim > self.backbone_widths[-1]:
            raise ValueError("reduced_dim exceeds backbone output width")

    @property
    def uses_attention(self) -> bool:
        return self.pool_mode in ("avg_pr", "cov_pr")

    @property
    def uses_covariance(self) -> bool:
        return self.pool_mode in ("cov", "cov_pr")

    @property
    def feature_hw(self) -> int:
        return self.input_size // math.prod(self.block_strides)

    @property
    def num_maps(self) -> int:
        return self.num_keypoints + self.num_complementary

    @property
    def pooled_dim(self) -> int:
        d = self.backbone_widths[-1]
        if self.pool_mode == "avg":
            return d
        if self.pool_mode == "avg_pr":
            return 2 * self.num_maps * d
        return self.reduced_dim * self.reduced_dim


@dataclass
class ModelOutput:
    logits: Tensor               # [N, C]
    stack: AttentionStack | None
    feature_map: Tensor          # [N, Hf, Wf, D]
    pooled: Tensor               # [N, P]


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.blocks: list[Conv2dLayer] = []
        cin = 3
        for width in config.backbone_widths:
            self.blocks.append(Conv2dLayer(cin, width, 3, rng=rng))
            cin = width
        self.attention = (AttentionHead(cin, config.num_keypoints,
                                        config.num_complementary, rng=rng)
                          if config.uses_attention else None)
        self.reduce = (ReduceLayer(cin, config.reduced_dim, rng=rng)
                       if config.uses_covariance else None)
        self.classifier = LinearLayer(config.pooled_dim, config.num_classes, rng=rng)

    def features(self, x: Tensor) -> Tensor:
        h = x
        for block, stride in zip(self.blocks, self.config.block_strides):
            h = T.relu(block(h))
            h = T.maxpool2d(h, stride, stride=stride)
        return h

    def forward(self, x: Tensor, train_mode: bool = False) -> ModelOutput:
        del train_mode  # no train-only layers; kept for interface stability
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != s or x.shape[2] != s or x.shape[3] != 3:
            raise ValueError(f"forward: expected [N,{s},{s},3] input, got {x.shape}")
        feats = self.features(x)
        mode = self.config.pool_mode
        stack = self.attention(feats) if self.attention is not None else None
        if mode == "avg":
            pooled = avg_pool(feats)
        elif mode == "avg_pr":
            pooled = avg_pr_pool(expand(feats, stack))
        elif mode == "cov":
            pooled = cov_pool(self.reduce(feats), ns_iters=self.config.ns_iters)
        else:  # cov_pr
            pooled = cov_pool(self.reduce(expand(feats, stack)),
                              ns_iters=self.config.ns_iters)
        logits = self.classifier(pooled)
        return ModelOutput(logits, stack, feats, pooled)

    def __call__(self, x, train_mode: bool = False) -> ModelOutput:
        return self.forward(x, train_mode=train_mode)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                out[f"backbone.block{i}.{k}"] = v
        if self.attention is not None:
            for k, v in self.attention.parameters().items():
                out[f"attention.{k}"] = v
        if self.reduce is not None:
            for k, v in self.reduce.parameters().items():
                out[f"reduce.{k}"] = v
        for k, v in self.classifier.parameters().items():
            out[f"classifier.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """Split for per-group learning rates: backbone vs everything else."""
        backbone, head = {}, {}
        for name, p in self.named_parameters().items():
            (backbone if name.startswith("backbone.") else head)[name] = p
        return {"backbone": backbone, "head": head}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def predict_proba(model: Model, x) -> np.ndarray:
    """Softmax class probabilities, no tape recorded."""
    with T.no_grad():
        out = model.forward(x)
        probs = T.softmax(out.logits, axis=1)
    return probs.data


def save_model(directory, model: Model) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "parameters": sorted(params),
    }
    with open(directory / "config.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, p in params.items():
        save_tensor(directory / f"{name}.ptns", p)


def load_model(directory) -> Model:
    directory = Path(directory)
    with open(directory / "config.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg_dict = dict(manifest["config"])
    for key in ("backbone_widths", "block_strides"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = ModelConfig(**cfg_dict)
    model = Model(config, seed=0)
    params = model.named_parameters()
    if sorted(params) != sorted(manifest["parameters"]):
        raise ValueError("checkpoint parameter list does not match model config")
    for name, p in params.items():
        loaded = load_tensor(directory / f"{name}.ptns")
        if loaded.shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {loaded.shape}, "
                             f"expected {p.shape}")
        p.data = loaded.data
    return model
