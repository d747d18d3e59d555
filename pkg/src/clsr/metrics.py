"""PSNR, SSIM and error maps, plus the report that aggregates them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def _range(ref: np.ndarray, data_range: float | None) -> float:
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    return float(data_range)


def psnr(ref, test, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the volumes are identical."""
    ref, test = _pair(ref, test)
    data_range = _range(ref, data_range)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable weighted mean over every full window position
    for ax in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=ax, mode="constant")
    half = (len(w) - 1) // 2
    keep = tuple(slice(half, n - (len(w) - 1 - half)) for n in x.shape)
    return x[keep]


def ssim_map(ref, test, data_range: float | None = None, win_size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ref, test = _pair(ref, test)
    data_range = _range(ref, data_range)
    if any(n < win_size for n in ref.shape):
        raise ValueError(f"window {win_size} larger than volume {ref.shape}")
    w = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter_valid(ref, w), _filter_valid(test, w)
    var_x = _filter_valid(ref * ref, w) - mu_x * mu_x
    var_y = _filter_valid(test * test, w) - mu_y * mu_y
    cov = _filter_valid(ref * test, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(ref, test, data_range: float | None = None, win_size: int = 11, sigma: float = 1.5,
         mode: str = "volume") -> float:
    """Mean local SSIM with a Gaussian window over every full window position.

    ``mode="volume"`` slides an N-d window over the whole array; ``mode="slice"``
    computes 2D SSIM on each slice along axis 0 and averages.
    """
    ref, test = _pair(ref, test)
    data_range = _range(ref, data_range)
    if mode == "volume":
        return float(np.mean(ssim_map(ref, test, data_range, win_size, sigma)))
    if mode == "slice":
        return float(np.mean([np.mean(ssim_map(r, t, data_range, win_size, sigma)) for r, t in zip(ref, test)]))
    raise ValueError(f"unknown ssim mode {mode!r}")


def error_map(ref, test) -> np.ndarray:
    ref, test = _pair(ref, test)
    return np.abs(ref - test)


@dataclass
class MetricsReport:
    """Per-volume quality rows plus run metadata.

    Aggregates are always recomputed from ``rows``; they are never stored
    separately, so they cannot drift.
    """

    fingerprint: str = ""
    rows: list[dict] = field(default_factory=list)
    loss_history: list[dict] = field(default_factory=list)
    param_counts: dict[str, int] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def add(self, vol_id: str, method: str, ssim_value: float, psnr_value: float) -> None:
        self.rows.append({"id": vol_id, "method": method, "ssim": float(ssim_value), "psnr": float(psnr_value)})

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def aggregate(self, method: str) -> dict[str, float]:
        sel = [r for r in self.rows if r["method"] == method]
        if not sel:
            raise KeyError(method)
        s = np.array([r["ssim"] for r in sel])
        p = np.array([r["psnr"] for r in sel])
        return {
            "n": len(sel),
            "ssim_mean": float(s.mean()),
            "ssim_std": float(s.std()),
            "psnr_mean": float(p.mean()),
            # identical volumes give inf PSNR; their spread is undefined
            "psnr_std": float(p.std()) if np.isfinite(p).all() else math.nan,
        }

    def summary_lines(self) -> list[str]:
        out = []
        for m in self.methods():
            a = self.aggregate(m)
            out.append(f"{m:>10s}  SSIM {a['ssim_mean']:.4f} ± {a['ssim_std']:.4f}  "
                       f"PSNR {a['psnr_mean']:.4f} ± {a['psnr_std']:.4f}")
        return out

    def to_json(self) -> str:
        d = asdict(self)
        d["aggregates"] = {m: self.aggregate(m) for m in self.methods()}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        d = json.loads(text)
        d.pop("aggregates", None)
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "method", "ssim", "psnr", "fingerprint"])
        for r in self.rows:
            w.writerow([r["id"], r["method"], repr(r["ssim"]), repr(r["psnr"]), self.fingerprint])
        return buf.getvalue()

    def save(self, out_dir: str | Path, stem: str = "metrics") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
