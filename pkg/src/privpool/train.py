"""SGD with momentum and the training loop.

Update rule per parameter group (backbone vs head):
  v <- momentum * v + (g + weight_decay * p)
  p <- p - lr_group * v
with lr_group = lr * decay_factor^floor(it / decay_every), times the
backbone multiplier for backbone parameters.

Batches mix annotated and unannotated samples; the attention loss
averages over annotated samples only, CE over everything.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import DEFAULT_SCALES, KeypointTargets, LossTerms, total_loss
from .data import Dataset, LabeledSample, augment, batch_targets
from .model import Model, save_model
from .tensor import Tape, Tensor

SUPERVISION_MODES = ("full", "reg_only")
METRIC_FIELDS = ("iteration", "lr", "ce", "attn", "reg", "total", "wall_ms")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 10
    backbone_lr_multiplier: float = 1.0  # no pretrained backbone at this scale
    decay_factor: float = 0.9
    decay_every: int = 1000
    epochs: int = 10
    seed: int = 0
    supervision: str = "full"
    augment: bool = True
    checkpoint_every: int = 0  # epochs between extra checkpoints; 0 = final only

    def __post_init__(self):
        for name in ("lr", "momentum", "weight_decay", "batch",
                     "backbone_lr_multiplier", "decay_factor", "epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be non-negative")
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ValueError("TrainConfig: lr must be positive, batch and epochs >= 1")
        if self.decay_every < 1:
            raise ValueError("TrainConfig.decay_every must be >= 1")
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")


@dataclass
class TrainState:
    iteration: int = 0
    velocity: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    history: list = field(default_factory=list)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def sgd_step(params: dict, grads: dict, state: TrainState, cfg: TrainConfig,
             backbone_names=()) -> None:
    """One momentum step over named parameters; mutates params and state."""
    base_lr = lr_at(cfg, state.iteration)
    backbone_names = set(backbone_names)
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise RuntimeError(f"sgd_step: missing gradient for {name} "
                               f"at iteration {state.iteration}")
        if not np.isfinite(g).all():
            raise RuntimeError(f"sgd_step: non-finite gradient in {name} "
                               f"at iteration {state.iteration}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + (g + cfg.weight_decay * p.data)
        state.velocity[name] = v
        lr = base_lr * (cfg.backbone_lr_multiplier if name in backbone_names else 1.0)
        p.data = p.data - lr * v
    state.iteration += 1


def make_batch(samples, model: Model, rng: np.random.Generator | None = None,
               do_augment: bool = False):
    """Stack images/labels and rasterize targets at feature resolution."""
    if do_augment:
        samples = [augment(s, rng) for s in samples]
    dtype = T.default_dtype()
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.array([s.label for s in samples], dtype=np.int64)
    targets = batch_targets(samples, model.config.feature_hw)
    targets = KeypointTargets(targets.maps.astype(dtype), targets.visible,
                              targets.annotated)
    return x, y, targets


def train_loop(model: Model, dataset: Dataset, cfg: TrainConfig, out_dir) -> TrainState:
    """Train on the train split; write metrics.csv and checkpoint/ under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = dataset.split("train")
    if not samples:
        raise ValueError("train split is empty")

    state = TrainState(rng=np.random.default_rng(cfg.seed))
    params = model.named_parameters()
    backbone_names = set(model.parameter_groups()["backbone"])
    reg_only = cfg.supervision == "reg_only"
    n = len(samples)

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for epoch in range(cfg.epochs):
            order = state.rng.permutation(n)
            for start in range(0, n, cfg.batch):
                t0 = time.perf_counter()
                batch = [samples[i] for i in order[start:start + cfg.batch]]
                x, y, targets = make_batch(batch, model, state.rng,
                                           do_augment=cfg.augment)
                model.zero_grad()
                with Tape():
                    outp = model.forward(Tensor(x), train_mode=True)
                    terms = total_loss(outp.logits, y, outp.stack,
                                       None if reg_only else targets,
                                       reg_all_maps=reg_only and outp.stack is not None)
                    T.backward(terms.total)
                grads = {name: p.grad for name, p in params.items()}
                lr = lr_at(cfg, state.iteration)
                it = state.iteration
                sgd_step(params, grads, state, cfg, backbone_names)
                wall_ms = (time.perf_counter() - t0) * 1e3
                row = (it, lr, terms.ce, terms.attn, terms.reg,
                       float(terms.total.data), wall_ms)
                state.history.append(row)
                writer.writerow(_format_row(row))
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and epoch + 1 < cfg.epochs:
                save_model(out / f"checkpoint_ep{epoch + 1}", model)

    save_model(out / "checkpoint", model)
    return state


def _format_row(row) -> list[str]:
    it, *floats = row
    return [str(it)] + [f"{v:.12g}" for v in floats]
