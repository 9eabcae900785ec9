"""Command-line interface: gen-data, train, eval, check, export-attention.

Settings resolve as defaults < JSON config file < explicit flags, and
every data-producing command echoes its fully resolved configuration
into the output directory as resolved_config.json. Exit codes: 0
success, 1 runtime failure, 2 usage error. The PRIVPOOL_THREADS
environment variable caps worker threads during generation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .checks import SUITES, run_suites
from .data import Dataset, GenConfig, generate
from .eval import evaluate, export_attention
from .model import Model, ModelConfig, POOL_MODES, load_model
from .train import SUPERVISION_MODES, TrainConfig, train_loop

DTYPES = {"float32": np.float32, "float64": np.float64}


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must contain a JSON object")
    return cfg


def _merge(dataclass_type, file_section: dict, overrides: dict):
    merged = dict(file_section)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    for key in ("backbone_widths", "block_strides", "keypoint_names"):
        if key in merged and isinstance(merged[key], list):
            merged[key] = tuple(merged[key])
    return dataclass_type(**merged)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise RuntimeError(f"output directory {out} is not empty "
                           f"(use --force to overwrite)")
    file_cfg = _load_config_file(args.config)
    cfg = _merge(GenConfig, file_cfg.get("data", {}), {
        "num_classes": args.classes,
        "n_per_class": args.per_class,
        "bias": args.bias,
        "seed": args.seed,
        "keypoint_fraction": args.kp_frac,
        "image_size": args.image_size,
    })
    manifest = generate(cfg, out)
    _echo_config(out, {"command": "gen-data", "data": asdict(cfg)})
    print(f"wrote {sum(manifest['splits'].values())} samples across "
          f"{len(manifest['splits'])} splits to {out}")
    return 0


def cmd_train(args) -> int:
    dtype = DTYPES[args.dtype]
    T.set_default_dtype(dtype)
    file_cfg = _load_config_file(args.config)
    model_cfg = _merge(ModelConfig, file_cfg.get("model", {}),
                       {"pool_mode": args.pool})
    train_cfg = _merge(TrainConfig, file_cfg.get("train", {}), {
        "epochs": args.epochs,
        "seed": args.seed,
        "lr": args.lr,
        "batch": args.batch,
        "supervision": args.supervision,
        "augment": False if args.no_augment else None,
    })
    dataset = Dataset.load(args.data)
    if len(dataset.keypoint_names) != model_cfg.num_keypoints:
        raise RuntimeError(f"model expects {model_cfg.num_keypoints} keypoints "
                           f"but dataset has {len(dataset.keypoint_names)}")
    out = Path(args.out)
    _echo_config(out, {
        "command": "train",
        "data": str(args.data),
        "dtype": args.dtype,
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
    })
    model = Model(model_cfg, seed=train_cfg.seed)
    state = train_loop(model, dataset, train_cfg, out)
    final = state.history[-1]
    print(f"finished {state.iteration} iterations; final total loss "
          f"{final[5]:.4f}; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    if not (ckpt / "config.json").exists():
        raise RuntimeError(f"no checkpoint at {ckpt}")
    dtype = DTYPES[args.dtype]
    T.set_default_dtype(dtype)
    model = load_model(ckpt)
    dataset = Dataset.load(args.data)
    samples = dataset.split(args.split)
    report = evaluate(model, samples, len(dataset.classes), args.split,
                      crop_refeed=args.crop_refeed)
    suffix = f"eval_{args.split}" + ("_refeed" if args.crop_refeed else "")
    out = Path(args.out) if args.out else ckpt / suffix
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.save_confusion_csv(out / "confusion.csv")
    _echo_config(out, {
        "command": "eval",
        "ckpt": str(ckpt),
        "data": str(args.data),
        "split": args.split,
        "crop_refeed": args.crop_refeed,
        "dtype": args.dtype,
    })
    print(f"{args.split}: top1 {report.top1:.4f} "
          f"mean-per-class {report.mean_per_class:.4f} (n={report.n}) -> {out}")
    return 0


def cmd_check(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    print(json.dumps({"command": "check", "suites": names}))
    results, ok = run_suites(names)
    for r in results:
        print(r.line())
    print("all checks passed" if ok else "CHECK FAILURES", file=sys.stderr)
    return 0 if ok else 1


def cmd_export_attention(args) -> int:
    ckpt = Path(args.ckpt)
    if not (ckpt / "config.json").exists():
        raise RuntimeError(f"no checkpoint at {ckpt}")
    dtype = DTYPES[args.dtype]
    T.set_default_dtype(dtype)
    model = load_model(ckpt)
    dataset = Dataset.load(args.data)
    samples = dataset.split(args.split)
    n = args.n
    if n > len(samples):
        print(f"warning: --n {n} exceeds split size {len(samples)}; clamping",
              file=sys.stderr)
        n = len(samples)
    rng = np.random.default_rng(args.seed)
    chosen = [samples[i] for i in rng.permutation(len(samples))[:n]]
    files = export_attention(model, chosen, args.out, dataset.keypoint_names)
    _echo_config(Path(args.out), {
        "command": "export-attention",
        "ckpt": str(ckpt),
        "data": str(args.data),
        "split": args.split,
        "n": n,
        "seed": args.seed,
        "dtype": args.dtype,
    })
    print(f"wrote {len(files)} files for {n} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privpool",
        description="Keypoint-supervised attention pooling: data generation, "
                    "training, evaluation, and property checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic biased dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--bias", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kp-frac", type=float, default=None,
                   help="fraction of train samples keeping keypoint annotations")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", choices=POOL_MODES, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--supervision", choices=SUPERVISION_MODES, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="float64")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--crop-refeed", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="float64")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run property suites")
    p.add_argument("--suite", choices=sorted(SUITES) + ["all"], default="all")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("export-attention", help="export attention map images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="float64")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures exit 1; usage errors exit 2 above
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
