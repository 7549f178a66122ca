"""Synthetic desk experiment: synth -> train -> infer -> eval -> ablate.

    python3 scripts/desk_experiment.py --root /tmp/desk --epochs 60

Training and held-out frames come from disjoint seed ranges. Every stage
goes through the same functions the command line uses, so the output
directory can be inspected with ``panograph eval`` afterwards.
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from panograph.cli import cmd_ablate, cmd_eval, cmd_infer, cmd_synth, cmd_train
from panograph.config import PipelineConfig, load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", required=True, help="empty working directory")
    ap.add_argument("--config", help="optional key = value config file")
    ap.add_argument("--train-frames", type=int, default=200)
    ap.add_argument("--test-frames", type=int, default=50)
    ap.add_argument("--test-seed", type=int, default=100_000)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--skip-ablation", action="store_true", help="mean shift makes the ablation slow")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = cfg.replace(epochs=args.epochs)
    root = Path(args.root)
    timings = {}

    t = time.perf_counter()
    cmd_synth(cfg.replace(n_frames=args.train_frames), root / "train", jobs=args.jobs)
    cmd_synth(cfg.replace(n_frames=args.test_frames, seed=args.test_seed), root / "test", jobs=args.jobs)
    timings["synth"] = time.perf_counter() - t

    t = time.perf_counter()
    cmd_train(cfg, root / "train", root / "run", jobs=args.jobs)
    timings["train"] = time.perf_counter() - t

    ckpt = cfg.replace(checkpoint=str(root / "run" / "last.ckpt"))
    t = time.perf_counter()
    cmd_infer(ckpt, root / "test", root / "pred", jobs=args.jobs)
    timings["infer"] = time.perf_counter() - t

    _, text = cmd_eval(cfg, root / "pred", root / "test", root / "report")
    print(text)
    if not args.skip_ablation:
        t = time.perf_counter()
        _, table = cmd_ablate(ckpt, root / "test", root / "ablation", jobs=args.jobs)
        timings["ablate"] = time.perf_counter() - t
        print(table)
    print("  ".join(f"{k} {v:.0f}s" for k, v in timings.items()))


if __name__ == "__main__":
    main()
