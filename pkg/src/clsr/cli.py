"""Command-line entry point: ``clsr <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration/input error, 3 training divergence.
Environment: ``CLSR_OUT_DIR`` overrides ``out_dir``; ``CLSR_WORKERS`` sets the
number of parallel sweep workers.
"""

from __future__ import annotations

import argparse
import logging
import os
import runpy
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import Dataset, build_dataset, read_spacing, read_volume, write_volume
from .engine import DivergenceError
from .experiment import evaluate, reload_for_eval, run_sweep, save_error_maps, train_run
from .kspace import kspace_truncate

log = logging.getLogger("clsr")

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    if os.environ.get("CLSR_OUT_DIR"):
        cfg = cfg.replace(out_dir=os.environ["CLSR_OUT_DIR"])
    return cfg


def _dataset(cfg: ExperimentConfig) -> Dataset:
    try:
        return Dataset(cfg.data_dir)
    except FileNotFoundError as e:
        raise ConfigError(f"{e}; run build-dataset first") from e


def cmd_build_dataset(args) -> int:
    cfg = _config(args)
    root = build_dataset(cfg)
    save_config(cfg, root / "config.json")
    (root / "fingerprint.txt").write_text(cfg.fingerprint() + "\n")
    print(f"dataset written to {root} (fingerprint {cfg.fingerprint()})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    out = Path(cfg.out_dir) / "train"
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    run = train_run(cfg, ds, out)
    print(f"trained {run.trainer.step_count} steps; best validation PSNR {run.best_val_psnr:.4f} dB")
    print(f"checkpoint: {run.best_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint or Path(cfg.out_dir) / "train" / "best.pt")
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    nets, ckpt_cfg = reload_for_eval(ckpt)
    if tuple(ckpt_cfg.network.factors) != tuple(cfg.network.factors):
        raise ConfigError(f"checkpoint factors {ckpt_cfg.network.factors} != config {cfg.network.factors}")
    ds = _dataset(cfg)
    report = evaluate(nets, ds, args.group, cfg.network.factors, ssim_mode=cfg.ssim_mode,
                      fingerprint=ckpt_cfg.fingerprint())
    report.param_counts = nets.param_counts()
    report.settings = {"checkpoint": str(ckpt), "group": args.group, "ssim_mode": cfg.ssim_mode}
    out = Path(cfg.out_dir) / "eval"
    report.save(out)
    save_error_maps(nets, ds, args.group, out / "error_maps")
    print("\n".join(report.summary_lines()))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _dataset(cfg)
    workers = int(os.environ.get("CLSR_WORKERS", args.workers))
    path = run_sweep(cfg, Path(cfg.out_dir) / "sweep", workers=workers)
    print(path.read_text(), end="")
    return 0


def cmd_degrade(args) -> int:
    factors = tuple(int(f) for f in args.factors.split(","))
    vol = read_volume(args.input)
    lr = kspace_truncate(vol.astype(np.float64), factors)
    spacing = [s * f for s, f in zip(read_spacing(args.input), factors)]
    out = write_volume(args.output, lr, spacing=spacing)
    print(f"{vol.shape} -> {lr.shape}: {out}")
    return 0


def cmd_plot(args) -> int:
    sweep_dir = Path(args.sweep_dir)
    script = sweep_dir / "plot_sweep.py"
    if not script.is_file():
        raise ConfigError(f"no plot script in {sweep_dir}; run sweep first")
    sys_argv = sys.argv
    try:
        sys.argv = [str(script), str(sweep_dir)]
        runpy.run_path(str(script), run_name="__main__")
    finally:
        sys.argv = sys_argv
    print(f"plots written to {sweep_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. optim.epochs=5 (repeatable)")
        return sp

    with_config(sub.add_parser("build-dataset", help="generate phantoms, degraded targets and splits"))
    with_config(sub.add_parser("train", help="train one model"))
    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint against baselines"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--group", default="evaluation", choices=["validation", "evaluation"])
    sp = with_config(sub.add_parser("sweep", help="HR-fraction x contrastive-loss ablation grid"))
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("degrade", help="k-space truncate one volume file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--factors", default="2,2,2")
    sp = sub.add_parser("plot", help="render sweep plots from sweep.csv")
    sp.add_argument("sweep_dir")
    return p


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "degrade": cmd_degrade,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
