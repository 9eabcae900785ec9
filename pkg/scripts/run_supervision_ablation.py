#!/usr/bin/env python3
"""Compare full keypoint supervision against regularizer-only supervision.

Trains avg_pr twice per seed (keypoint loss on, keypoint loss off) with an
identical budget and reports the mean trans-split accuracy drop when the
keypoint loss is removed.
"""

import argparse
import sys

from privpool.experiment import (ExperimentConfig, format_summary,
                                 run_bias_experiment)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/supervision_ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=None,
                    help="epoch budget per run (default: experiment default)")
    args = ap.parse_args(argv)

    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    cfg = ExperimentConfig(modes=("avg_pr",), seeds=tuple(args.seeds),
                           ablate_supervision=True, **overrides)
    summary = run_bias_experiment(cfg, args.out)
    print(format_summary(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
