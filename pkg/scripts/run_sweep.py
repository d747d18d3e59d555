"""HR-fraction x contrastive-loss sweep with plots, resumable.

    python scripts/run_sweep.py runs/sweep --config configs/smoke.yaml --workers 2
"""

import argparse
import logging
import runpy
import sys
from pathlib import Path

from clsr.config import load_config
from clsr.data import build_dataset
from clsr.experiment import run_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", type=Path)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-plot", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config, [f"data_dir={args.out / 'data'}", f"out_dir={args.out}"] + args.set)
    if not (Path(cfg.data_dir) / "splits.json").is_file():
        build_dataset(cfg)
    csv_path = run_sweep(cfg, args.out / "sweep", workers=args.workers)
    print(csv_path.read_text(), end="")
    if not args.no_plot:
        sys.argv = [str(csv_path.parent / "plot_sweep.py"), str(csv_path.parent)]
        runpy.run_path(sys.argv[0], run_name="__main__")


if __name__ == "__main__":
    main()
