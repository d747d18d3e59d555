"""Synthetic phantoms, participant splits, HR-fraction subsets and unpaired batches.

On-disk layout of a dataset directory::

    hr/<id>.vol, hr/<id>.volmeta     every participant, HR grid
    lr/<id>.vol, lr/<id>.volmeta     target/validation/evaluation, k-space truncated
    splits.json                      SplitPlan
    fractions.json                   nested source subsets for each fraction
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
from scipy import ndimage

from .config import STANDARD_FRACTIONS, ConfigError, ExperimentConfig
from .kspace import check_factors, kspace_truncate

GROUPS = ("source", "target", "validation", "evaluation")


# volume files


def write_volume(path_stem: str | Path, vol: np.ndarray, spacing: Sequence[float] | None = None) -> Path:
    """Write ``<stem>.vol`` (raw little-endian float32) and ``<stem>.volmeta`` (JSON header)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    v = np.ascontiguousarray(vol, dtype="<f4")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{stem}: non-finite intensities")
    spacing = [1.0] * v.ndim if spacing is None else [float(s) for s in spacing]
    meta = {
        "shape": list(v.shape),
        "spacing": spacing,
        "intensity_range": [float(v.min()), float(v.max())] if v.size else [0.0, 0.0],
    }
    stem.with_suffix(".vol").write_bytes(v.tobytes())
    stem.with_suffix(".volmeta").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return stem.with_suffix(".vol")


def read_volume(path: str | Path) -> np.ndarray:
    p = Path(path)
    p = p.with_suffix(".vol") if p.suffix in (".vol", ".volmeta") else p.with_name(p.name + ".vol")
    meta_p = p.with_suffix(".volmeta")
    if not p.is_file() or not meta_p.is_file():
        raise FileNotFoundError(f"missing volume file {p} or its header")
    meta = json.loads(meta_p.read_text())
    raw = np.frombuffer(p.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if raw.size != math.prod(shape):
        raise ValueError(f"{p}: {raw.size} values do not fit shape {shape}")
    return raw.reshape(shape).astype(np.float32)


def read_spacing(path: str | Path) -> list[float]:
    meta = json.loads(Path(path).with_suffix(".volmeta").read_text())
    return meta.get("spacing", [1.0] * len(meta["shape"]))


# phantoms


@dataclass
class PhantomSpec:
    shape: tuple[int, ...] = (32, 32, 32)
    n_ellipsoids: int = 6
    smoothness: float = 1.0
    texture: float = 0.05
    background: float = 0.0
    seed: int = 0


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Head-like phantom: an outer envelope plus random rotated inner ellipsoids.

    Inner structures carry a smooth multiplicative texture; edges are softened
    with a Gaussian of width ``smoothness`` voxels. Output lies in [0, 1].
    """
    shape = tuple(int(s) for s in spec.shape)
    if len(shape) not in (2, 3) or min(shape) < 16:
        raise ConfigError(f"phantom shape must be 2D/3D with every axis >= 16, got {shape}")
    rng = np.random.default_rng(spec.seed)
    nd = len(shape)
    vol = np.full(shape, spec.background, dtype=np.float64)
    if spec.n_ellipsoids <= 0:
        return vol

    # normalized coordinates in [-1, 1]
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    coords = np.stack(grids, axis=-1)

    for k in range(spec.n_ellipsoids):
        if k == 0:
            center = rng.uniform(-0.05, 0.05, nd)
            radii = rng.uniform(0.7, 0.9, nd)
            value = rng.uniform(0.3, 0.5)
        else:
            center = rng.uniform(-0.45, 0.45, nd)
            radii = rng.uniform(0.1, 0.4, nd)
            value = rng.uniform(0.2, 1.0)
        rot = _random_rotation(rng, nd)
        local = (coords - center) @ rot
        inside = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        vol[inside] = value

    if spec.texture > 0:
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
        noise /= max(np.abs(noise).max(), 1e-12)
        fg = vol != spec.background
        vol = np.where(fg, vol * (1 + spec.texture * noise), vol)
    if spec.smoothness > 0:
        vol = ndimage.gaussian_filter(vol, sigma=spec.smoothness, mode="nearest")
    return np.clip(vol, 0.0, 1.0)


def _random_rotation(rng: np.random.Generator, nd: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((nd, nd)))
    return q * np.sign(np.diag(r))


# splits


@dataclass
class SplitPlan:
    source: list[str]
    target: list[str]
    validation: list[str]
    evaluation: list[str]
    seed: int = 0

    def groups(self) -> dict[str, list[str]]:
        return {g: getattr(self, g) for g in GROUPS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SplitPlan:
        return cls(**json.loads(text))


@dataclass
class FractionSubset:
    fraction: float
    ids: list[str] = field(default_factory=list)


def make_splits(ids: Sequence[str], counts: Sequence[int] = (120, 120, 30, 30), seed: int = 0) -> SplitPlan:
    """Randomly assign disjoint source/target/validation/evaluation groups."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("participant ids must be unique")
    counts = [int(c) for c in counts]
    if len(counts) != 4 or any(c < 0 for c in counts):
        raise ConfigError(f"need four nonnegative group counts, got {counts}")
    if sum(counts) > len(ids):
        raise ConfigError(f"counts {counts} need {sum(counts)} ids, only {len(ids)} available")
    order = np.random.default_rng(seed).permutation(len(ids))
    picked = [ids[i] for i in order]
    bounds = np.cumsum([0] + counts)
    parts = [sorted(picked[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return SplitPlan(*parts, seed=seed)


def subset_source(plan: SplitPlan, fraction: float, seed: int = 0, strict: bool = True) -> FractionSubset:
    """Select ``round(fraction * |source|)`` source ids (at least one).

    Subsets for a fixed seed are prefixes of one permutation, so smaller
    fractions are always contained in larger ones.
    """
    fraction = float(fraction)
    if strict and not any(math.isclose(fraction, f) for f in STANDARD_FRACTIONS):
        raise ConfigError(f"fraction {fraction} not in {STANDARD_FRACTIONS} (strict mode)")
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    src = sorted(plan.source)
    if not src:
        raise ConfigError("source group is empty")
    k = max(1, int(math.floor(fraction * len(src) + 0.5)))
    order = np.random.default_rng(seed).permutation(len(src))
    return FractionSubset(fraction, sorted(src[i] for i in order[:k]))


# dataset


def participant_ids(n: int) -> list[str]:
    return [f"p{i:04d}" for i in range(n)]


def build_dataset(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Materialize phantoms, degraded LR volumes and split files under ``out_dir``."""
    root = Path(out_dir if out_dir is not None else cfg.data_dir)
    d = cfg.data
    factors = check_factors(d.hr_shape, cfg.network.factors)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create dataset directory {root}: {e}") from e

    ids = participant_ids(d.n_ids)
    plan = make_splits(ids, d.counts, cfg.seed)
    lr_groups = set(plan.target) | set(plan.validation) | set(plan.evaluation)
    used = [i for g in plan.groups().values() for i in g]
    for n, pid in enumerate(ids):
        if pid not in used:
            continue
        spec = PhantomSpec(shape=d.hr_shape, n_ellipsoids=d.n_ellipsoids, smoothness=d.smoothness,
                           texture=d.texture, seed=cfg.seed * 100003 + n)
        hr = generate_phantom(spec).astype(np.float32)
        write_volume(root / "hr" / pid, hr)
        if pid in lr_groups:
            lr = kspace_truncate(hr.astype(np.float64), factors)
            write_volume(root / "lr" / pid, lr, spacing=[float(f) for f in factors])

    (root / "splits.json").write_text(plan.to_json())
    subsets = {str(f): subset_source(plan, f, cfg.seed, strict=False).ids for f in cfg.fractions}
    (root / "fractions.json").write_text(json.dumps(subsets, indent=2, sort_keys=True) + "\n")
    return root


class Dataset:
    """Read-only view of a built dataset directory, volumes cached in memory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        splits = self.root / "splits.json"
        if not splits.is_file():
            raise FileNotFoundError(f"no dataset at {self.root} (missing splits.json)")
        self.plan = SplitPlan.from_json(splits.read_text())
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def hr(self, pid: str) -> np.ndarray:
        return self._get("hr", pid)

    def lr(self, pid: str) -> np.ndarray:
        return self._get("lr", pid)

    def _get(self, kind: str, pid: str) -> np.ndarray:
        key = (kind, pid)
        if key not in self._cache:
            self._cache[key] = read_volume(self.root / kind / pid)
        return self._cache[key]


class Batch(NamedTuple):
    Y_s: torch.Tensor
    X_t: torch.Tensor
    source_ids: list[str]
    target_ids: list[str]


def _random_crop(vol: np.ndarray, patch: Sequence[int], align: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    starts = []
    for n, p, a in zip(vol.shape, patch, align):
        if p > n:
            raise ConfigError(f"patch {tuple(patch)} larger than volume {vol.shape}")
        starts.append(int(rng.integers(0, (n - p) // a + 1)) * a)
    return vol[tuple(slice(s, s + p) for s, p in zip(starts, patch))]


def batch_iterator(dataset: Dataset, subset: FractionSubset, lr_patch: Sequence[int],
                   factors: Sequence[int], batch_size: int, seed: int = 0) -> Iterator[Batch]:
    """Endless stream of unpaired (HR source, LR target) patch batches.

    HR patches come only from ``subset`` and LR patches only from the target
    group; every epoch visits each id once in a seeded random order.
    """
    source = list(subset.ids)
    target = list(dataset.plan.target)
    if not source or not target:
        raise ConfigError("both the source subset and the target group must be non-empty")
    hr_patch = [p * f for p, f in zip(lr_patch, factors)]
    rng = np.random.default_rng(seed)

    def ids_stream(pool):
        while True:
            for i in rng.permutation(len(pool)):
                yield pool[i]

    s_ids, t_ids = ids_stream(source), ids_stream(target)
    while True:
        ys, xs, sp, tp = [], [], [], []
        for _ in range(batch_size):
            sid, tid = next(s_ids), next(t_ids)
            ys.append(_random_crop(dataset.hr(sid), hr_patch, factors, rng))
            xs.append(_random_crop(dataset.lr(tid), lr_patch, [1] * len(lr_patch), rng))
            sp.append(sid)
            tp.append(tid)
        Y = torch.from_numpy(np.stack(ys)[:, None].copy())
        X = torch.from_numpy(np.stack(xs)[:, None].copy())
        yield Batch(Y, X, sp, tp)
