"""Reduced-scale end-to-end run: build phantoms, train one model, compare with interpolation.

    python scripts/smoke_train.py runs/smoke --set optim.epochs=20
"""

import argparse
import logging
import time
from pathlib import Path

from clsr.config import load_config
from clsr.data import Dataset, build_dataset
from clsr.experiment import evaluate, train_run

SMOKE = [
    "network.base_channels=8", "network.n_rcab_blocks=2", "patch.lr_patch=[12,12,12]",
    "optim.epochs=10", "optim.steps_per_epoch=30",
]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", type=Path)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config, SMOKE + [f"data_dir={args.out / 'data'}", f"out_dir={args.out}"] + args.set)
    build_dataset(cfg)
    ds = Dataset(cfg.data_dir)
    t0 = time.perf_counter()
    run = train_run(cfg, ds, args.out / "train")
    report = evaluate(run.trainer.nets, ds, "evaluation", cfg.network.factors, fingerprint=cfg.fingerprint())
    report.save(args.out / "eval")
    print("\n".join(report.summary_lines()))
    print(f"{run.trainer.step_count} steps in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
