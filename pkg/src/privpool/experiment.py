"""Seed-averaged bias-shift benchmark over the four pooling modes.

One synthetic biased dataset is generated once; every pooling mode is then
trained from scratch with an identical epoch budget, once per seed, and
scored on the cis (seen contexts) and trans (unseen contexts) test splits.
Optionally adds a supervision ablation: avg_pr retrained with the keypoint
loss disabled (map regularizer only).  The summary feeds two directional
comparisons: attention-gated pooling vs its plain counterpart, and full
keypoint supervision vs regularizer-only supervision.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, GenConfig, generate
from .eval import evaluate
from .model import Model, ModelConfig
from .train import SUPERVISION_MODES, TrainConfig, train_loop

DEFAULT_MODES = ("avg", "avg_pr", "cov", "cov_pr")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ExperimentConfig:
    """Shared settings for every run in the sweep.

    All modes share one dataset, one architecture family, and one training
    recipe; only the pooling mode, the supervision variant, and the model
    seed vary between runs, so the comparison isolates the pooling choice.
    """

    modes: tuple = DEFAULT_MODES
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 30
    ablate_supervision: bool = True  # add avg_pr regularizer-only runs
    backbone_widths: tuple = (8, 16, 32)
    block_strides: tuple = (2, 2, 2)
    reduced_dim: int = 16
    lr: float = 0.01
    batch_size: int = 10
    bias: float = 0.9
    data_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        unknown = [m for m in self.modes if m not in DEFAULT_MODES]
        if unknown:
            raise ValueError(f"unknown pooling modes: {unknown}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def model_config(self, mode: str) -> ModelConfig:
        return ModelConfig(pool_mode=mode,
                           backbone_widths=self.backbone_widths,
                           block_strides=self.block_strides,
                           reduced_dim=self.reduced_dim)

    def train_config(self, seed: int, supervision: str) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, seed=seed, lr=self.lr,
                           batch=self.batch_size, supervision=supervision)


@dataclass
class RunResult:
    mode: str
    supervision: str
    seed: int
    cis_top1: float
    trans_top1: float
    wall_s: float

    @property
    def key(self) -> str:
        base = self.mode
        if self.supervision != "full":
            base += f"_{self.supervision}"
        return base


def _single_run(cfg: ExperimentConfig, dataset: Dataset, mode: str,
                supervision: str, seed: int, out_dir: Path) -> RunResult:
    assert supervision in SUPERVISION_MODES
    t0 = time.perf_counter()
    model = Model(cfg.model_config(mode), seed=seed)
    train_loop(model, dataset, cfg.train_config(seed, supervision), out_dir)
    num_classes = model.config.num_classes
    cis = evaluate(model, dataset.split("test_cis"), num_classes, "test_cis")
    trans = evaluate(model, dataset.split("test_trans"), num_classes,
                     "test_trans")
    return RunResult(mode, supervision, seed, cis.top1, trans.top1,
                     time.perf_counter() - t0)


def summarize(results: list[RunResult]) -> dict:
    """Aggregate per-seed rows into per-variant means and directional gaps."""
    groups: dict[str, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.key, []).append(r)
    means = {}
    for key, rows in groups.items():
        means[key] = {
            "cis_top1": float(np.mean([r.cis_top1 for r in rows])),
            "trans_top1": float(np.mean([r.trans_top1 for r in rows])),
            "seeds": sorted(r.seed for r in rows),
        }
    gaps = {}
    if "avg" in means and "avg_pr" in means:
        gaps["avg_pr_minus_avg_trans"] = (means["avg_pr"]["trans_top1"]
                                          - means["avg"]["trans_top1"])
    if "cov" in means and "cov_pr" in means:
        gaps["cov_pr_minus_cov_trans"] = (means["cov_pr"]["trans_top1"]
                                          - means["cov"]["trans_top1"])
    if "avg_pr" in means and "avg_pr_reg_only" in means:
        gaps["full_minus_reg_only_trans"] = (
            means["avg_pr"]["trans_top1"]
            - means["avg_pr_reg_only"]["trans_top1"])
    return {
        "runs": [asdict(r) for r in results],
        "means": means,
        "gaps": gaps,
        "total_wall_s": float(sum(r.wall_s for r in results)),
    }


def run_bias_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the full sweep; writes summary.json and per-run artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(mode, "full", seed) for mode in cfg.modes for seed in cfg.seeds]
    if cfg.ablate_supervision:
        jobs += [("avg_pr", "reg_only", seed) for seed in cfg.seeds]

    with T.using_dtype(DTYPES[cfg.dtype]):
        data_dir = out / "data"
        if not (data_dir / "manifest.json").exists():
            generate(GenConfig(seed=cfg.data_seed, bias=cfg.bias), data_dir)
        dataset = Dataset.load(data_dir)
        results = []
        for mode, supervision, seed in jobs:
            run_dir = out / "runs" / f"{mode}_{supervision}_s{seed}"
            results.append(_single_run(cfg, dataset, mode, supervision, seed,
                                       run_dir))

    summary = summarize(results)
    summary["config"] = asdict(cfg)
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def format_summary(summary: dict) -> str:
    """Plain-text table of per-variant means and the directional gaps."""
    lines = [f"{'variant':18s} {'cis':>7s} {'trans':>7s}"]
    for key in sorted(summary["means"]):
        m = summary["means"][key]
        lines.append(f"{key:18s} {m['cis_top1']:7.4f} {m['trans_top1']:7.4f}")
    for name, value in sorted(summary["gaps"].items()):
        lines.append(f"{name}: {value:+.4f}")
    lines.append(f"total wall: {summary['total_wall_s']:.0f}s")
    return "\n".join(lines)
