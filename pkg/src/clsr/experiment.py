"""Training runs, evaluation against interpolation baselines, and the fraction x CL sweep."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .config import ExperimentConfig
from .data import Dataset, batch_iterator, subset_source
from .engine import Trainer, infer, load_checkpoint, save_checkpoint
from .metrics import MetricsReport, error_map, psnr, ssim

log = logging.getLogger(__name__)


def interpolate_baseline(lr: np.ndarray, factors, order: int = 1) -> np.ndarray:
    """Spline interpolation to the HR grid (order 1 = trilinear, 3 = tricubic).

    LR voxel ``i`` sits on HR voxel ``i * f``, the sampling grid produced by
    k-space truncation, so HR coordinate ``x`` maps to LR coordinate ``x / f``.
    """
    lr = np.asarray(lr, dtype=np.float64)
    hr_shape = tuple(n * f for n, f in zip(lr.shape, factors))
    coords = np.meshgrid(*[np.arange(n) / f for n, f in zip(hr_shape, factors)], indexing="ij")
    return ndimage.map_coordinates(lr, coords, order=order, mode="nearest")


BASELINES = {"trilinear": 1, "tricubic": 3}


def evaluate(nets, dataset: Dataset, group: str, factors, ssim_mode: str = "volume",
             baselines: bool = True, fingerprint: str = "") -> MetricsReport:
    """Per-volume SSIM/PSNR of the model (and baselines) on one split group."""
    report = MetricsReport(fingerprint=fingerprint)
    for pid in getattr(dataset.plan, group):
        hr = dataset.hr(pid).astype(np.float64)
        lr = dataset.lr(pid)
        rng = float(hr.max() - hr.min())
        if nets is not None:
            sr = infer(nets, lr)
            report.add(pid, "model", ssim(hr, sr, rng, mode=ssim_mode), psnr(hr, sr, rng))
        if baselines:
            for name, order in BASELINES.items():
                b = interpolate_baseline(lr, factors, order)
                report.add(pid, name, ssim(hr, b, rng, mode=ssim_mode), psnr(hr, b, rng))
    return report


@dataclass
class RunResult:
    trainer: Trainer
    history: list[dict]
    best_val_psnr: float
    best_path: Path | None


def train_run(cfg: ExperimentConfig, dataset: Dataset, out_dir: str | Path | None = None,
              contrastive: bool = True) -> RunResult:
    """Train for ``epochs x steps_per_epoch`` steps, keeping the best-validation-PSNR weights.

    Writes ``train_log.jsonl``, ``best.pt`` and ``last.pt`` when ``out_dir`` is given.
    """
    torch.manual_seed(cfg.optim.seed)
    trainer = Trainer.from_config(cfg, contrastive=contrastive)
    subset = subset_source(dataset.plan, cfg.fraction, cfg.seed, strict=cfg.data.strict_fractions)
    batches = batch_iterator(dataset, subset, cfg.patch.lr_patch, cfg.network.factors,
                             cfg.optim.batch_size, seed=cfg.optim.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "train_log.jsonl", "w")

    fp = cfg.fingerprint()
    history = []
    best, best_state = -np.inf, None
    try:
        for epoch in range(cfg.optim.epochs):
            for _ in range(cfg.optim.steps_per_epoch):
                batch = next(batches)
                rec = trainer.step(batch.Y_s, batch.X_t)
                rec["epoch"] = epoch
                rec["fingerprint"] = fp
                history.append(rec)
                if log_f is not None:
                    log_f.write(json.dumps(rec, sort_keys=True) + "\n")
            trainer.epoch = epoch + 1
            val = evaluate(trainer.nets, dataset, "validation", cfg.network.factors, baselines=False)
            val_psnr = val.aggregate("model")["psnr_mean"] if val.rows else -np.inf
            log.info("epoch %d  step %d  val PSNR %.3f", epoch, trainer.step_count, val_psnr)
            if val_psnr > best or best_state is None:
                best = val_psnr
                best_state = {k: v.clone() for k, v in trainer.nets.state_dict().items()}
                if out is not None:
                    save_checkpoint(out / "best.pt", trainer, cfg)
                    trainer.last_good = str(out / "best.pt")
    finally:
        if log_f is not None:
            log_f.close()
    if out is not None:
        save_checkpoint(out / "last.pt", trainer, cfg)
    trainer.nets.load_state_dict(best_state)
    return RunResult(trainer, history, float(best), out / "best.pt" if out is not None else None)


def save_error_maps(nets, dataset: Dataset, group: str, out_dir: str | Path, axis: int = 2) -> list[Path]:
    """Central-slice error maps (model and trilinear) as .npy and 8-bit PNG."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    factors = nets.spec.factors
    for pid in getattr(dataset.plan, group):
        hr = dataset.hr(pid).astype(np.float64)
        lr = dataset.lr(pid)
        preds = {"model": infer(nets, lr), "trilinear": interpolate_baseline(lr, factors, 1)}
        for name, pred in preds.items():
            em = error_map(hr, pred)
            sl = np.take(em, em.shape[axis] // 2, axis=axis)
            np.save(out_dir / f"{pid}_{name}_error.npy", sl)
            img = np.clip(sl / max(float(hr.max() - hr.min()), 1e-12) * 4 * 255, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(out_dir / f"{pid}_{name}_error.png")
            written.append(out_dir / f"{pid}_{name}_error.png")
    return written


# sweep

SWEEP_FIELDS = ["fraction", "cl_on", "n", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std",
                "baseline_psnr_mean", "fingerprint"]


def cell_name(fraction: float, cl_on: bool) -> str:
    return f"f{fraction:.2f}_cl{'on' if cl_on else 'off'}"


def sweep_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    return [cfg.replace(fraction=f, cl_on=cl) for f in cfg.fractions for cl in (True, False)]


def run_cell(cell_cfg: ExperimentConfig, cell_dir: str | Path) -> dict:
    """Train and evaluate one sweep cell; the result file doubles as the resume marker."""
    cell_dir = Path(cell_dir)
    result_path = cell_dir / "cell.json"
    fp = cell_cfg.fingerprint()
    if result_path.is_file():
        try:
            row = json.loads(result_path.read_text())
            if row.get("fingerprint") == fp and set(SWEEP_FIELDS) <= set(row):
                return row
        except json.JSONDecodeError:
            pass
        log.warning("re-running corrupt or stale cell %s", cell_dir)
    ds = Dataset(cell_cfg.data_dir)
    run = train_run(cell_cfg, ds, cell_dir)
    report = evaluate(run.trainer.nets, ds, "evaluation", cell_cfg.network.factors,
                      ssim_mode=cell_cfg.ssim_mode, fingerprint=fp)
    report.param_counts = run.trainer.nets.param_counts()
    report.save(cell_dir)
    agg = report.aggregate("model")
    row = {"fraction": cell_cfg.fraction, "cl_on": cell_cfg.cl_on, **agg,
           "baseline_psnr_mean": report.aggregate("trilinear")["psnr_mean"], "fingerprint": fp}
    result_path.write_text(json.dumps(row, sort_keys=True) + "\n")
    return row


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in sorted(rows, key=lambda r: (-r["fraction"], not r["cl_on"])):
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


PLOT_SCRIPT = '''\
"""Plot SSIM/PSNR against HR fraction for both CL settings. Generated file."""
import csv
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent
rows = list(csv.DictReader(open(here / "sweep.csv")))
for metric in ("ssim", "psnr"):
    fig, ax = plt.subplots(figsize=(4, 3))
    for flag, label in (("True", "with CL"), ("False", "without CL")):
        sel = sorted((float(r["fraction"]), float(r[metric + "_mean"]), float(r[metric + "_std"]))
                     for r in rows if r["cl_on"] == flag)
        if sel:
            x, y, e = zip(*sel)
            ax.errorbar([100 * v for v in x], y, yerr=e, marker="o", capsize=3, label=label)
    ax.set_xlabel("HR training data (%)")
    ax.set_ylabel(metric.upper() + (" (dB)" if metric == "psnr" else ""))
    ax.legend()
    fig.tight_layout()
    fig.savefig(here / f"sweep_{metric}.png", dpi=120)
'''


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path, workers: int = 1) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(cfg)
    dirs = [out_dir / cell_name(c.fraction, c.cl_on) for c in cells]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(run_cell, cells, dirs))
    else:
        rows = [run_cell(c, d) for c, d in zip(cells, dirs)]
    (out_dir / "sweep.csv").write_text(sweep_csv(rows))
    (out_dir / "plot_sweep.py").write_text(PLOT_SCRIPT)
    return out_dir / "sweep.csv"


def reload_for_eval(checkpoint: str | Path):
    trainer, cfg, _ = load_checkpoint(checkpoint)
    trainer.nets.eval()
    return trainer.nets, cfg
