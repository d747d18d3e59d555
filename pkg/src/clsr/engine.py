"""Data flows, losses and the alternating adversarial update.

One training step builds every intermediate tensor of the three flows::

    Y_s -> f_s -> Y_hat_s                       (HR autoencoding)
    Y_s -> f_s -> X_st -> f_sts -> Y_sts        (cycle through the LR domain)
    X_t -> f_t -> X_hat_t                       (LR autoencoding)

plus ``Y_hat_t = sr_decode(f_t)``, the inference path. Discriminators judge
domain membership (X_st vs X_t, f_t vs f_s, Y_hat_t vs Y_s); reconstruction
and contrastive terms compare tensors that share content.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .config import ConfigError, ContrastiveConfig, ExperimentConfig, LossWeights, OptimSettings
from .contrastive import flatten_to_embeddings, symmetric_batch_loss
from .models import Networks, build_networks


class DivergenceError(FloatingPointError):
    """A loss or activation became non-finite."""

    def __init__(self, name: str, last_good: str | None = None):
        self.name = name
        self.last_good = last_good
        msg = f"non-finite values in {name}"
        if last_good:
            msg += f" (last good checkpoint: {last_good})"
        super().__init__(msg)


@dataclass
class FlowBundle:
    Y_s: torch.Tensor
    X_t: torch.Tensor
    f_s: torch.Tensor
    Y_hat_s: torch.Tensor
    X_st: torch.Tensor
    f_sts: torch.Tensor
    Y_sts: torch.Tensor
    f_t: torch.Tensor
    X_hat_t: torch.Tensor
    Y_hat_t: torch.Tensor

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in dataclasses.fields(self))


def _finite(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise DivergenceError(name)
    return t


def build_flows(nets: Networks, Y_s: torch.Tensor, X_t: torch.Tensor) -> FlowBundle:
    if Y_s.shape[0] != X_t.shape[0]:
        raise ConfigError(f"batch sizes differ: Y_s {Y_s.shape[0]} vs X_t {X_t.shape[0]}")
    hr_grid = tuple(n * f for n, f in zip(X_t.shape[2:], nets.spec.factors))
    if tuple(Y_s.shape[2:]) != hr_grid:
        raise ConfigError(f"Y_s grid {tuple(Y_s.shape[2:])} incompatible with X_t grid "
                          f"{tuple(X_t.shape[2:])} at factors {nets.spec.factors}")
    f_s = nets.hr_encode(Y_s)
    X_st = nets.lr_decode(f_s)
    f_sts = nets.lr_encode(X_st)
    f_t = nets.lr_encode(X_t)
    b = FlowBundle(
        Y_s=Y_s, X_t=X_t, f_s=f_s,
        Y_hat_s=nets.sr_decode(f_s),
        X_st=X_st, f_sts=f_sts,
        Y_sts=nets.sr_decode(f_sts),
        f_t=f_t,
        X_hat_t=nets.lr_decode(f_t),
        Y_hat_t=nets.sr_decode(f_t),
    )
    for name, t in b.items():
        _finite(name, t)
    return b


def _gaussian_kernel(size: int, sigma: float, dtype, device) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    w = torch.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur_valid(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    nd = x.ndim - 2
    conv = F.conv3d if nd == 3 else F.conv2d
    c = x.shape[1]
    for ax in range(nd):
        shape = [c, 1] + [1] * nd
        shape[2 + ax] = len(w)
        x = conv(x, w.reshape(shape), groups=c)
    return x


def ssim_torch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0,
               win_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Differentiable mean SSIM over valid window positions, per sample -> (B,)."""
    if any(n < win_size for n in a.shape[2:]):
        raise ConfigError(f"SSIM window {win_size} larger than patch {tuple(a.shape[2:])}")
    w = _gaussian_kernel(win_size, sigma, a.dtype, a.device)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _blur_valid(a, w), _blur_valid(b, w)
    var_a = _blur_valid(a * a, w) - mu_a**2
    var_b = _blur_valid(b * b, w) - mu_b**2
    cov = _blur_valid(a * b, w) - mu_a * mu_b
    m = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return m.flatten(1).mean(1)


def _cl(a: torch.Tensor, b: torch.Tensor, cfg: ContrastiveConfig) -> torch.Tensor:
    return symmetric_batch_loss(flatten_to_embeddings(a), flatten_to_embeddings(b), cfg)


def _adv_real(logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))


def _adv_fake(logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits))


def loss_terms(nets: Networks, b: FlowBundle, cfg: ContrastiveConfig,
               contrastive: bool = True) -> dict[str, tuple[str, torch.Tensor]]:
    """Unweighted generator loss terms, keyed by name, each tagged with its weight field."""
    lr_grid = tuple(b.X_t.shape[2:])
    recon = {"sr": (b.Y_hat_s, b.Y_s), "cycle": (b.Y_sts, b.Y_s), "lr": (b.X_hat_t, b.X_t)}
    terms = {}
    for k, (p, t) in recon.items():
        terms[f"l1_{k}"] = ("w_l1", F.l1_loss(p, t))
    for k, (p, t) in recon.items():
        terms[f"ssim_{k}"] = ("w_ssim", (1 - ssim_torch(p, t)).mean())
    terms["adv_target"] = ("w_adv", _adv_real(nets.discriminate("target", b.X_st, lr_grid)))
    terms["adv_feature"] = ("w_adv", _adv_real(nets.discriminate("feature", b.f_t, lr_grid)))
    terms["adv_source"] = ("w_adv", _adv_real(nets.discriminate("source", b.Y_hat_t, lr_grid)))
    if contrastive:
        terms["cl_feature"] = ("w_cl_feature", _cl(b.f_sts, b.f_s, cfg))
        terms["cl_cycle"] = ("w_cl_image", _cl(b.Y_sts, b.Y_s, cfg))
        terms["cl_sr"] = ("w_cl_image", _cl(b.Y_hat_s, b.Y_s, cfg))
    return terms


def generator_loss(nets: Networks, b: FlowBundle, w: LossWeights, cfg: ContrastiveConfig,
                   contrastive: bool = True) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted generator objective and its per-term weighted breakdown.

    With ``contrastive=False`` the contrastive terms are not computed at all,
    which is the reference the zero-weight ablation must reproduce.
    """
    breakdown = {}
    total = None
    for name, (wname, raw) in loss_terms(nets, b, cfg, contrastive).items():
        _finite(name, raw)
        term = getattr(w, wname) * raw
        breakdown[name] = term
        total = term if total is None else total + term
    return total, breakdown


def discriminator_loss(nets: Networks, b: FlowBundle) -> dict[str, torch.Tensor]:
    """Binary real/fake loss per discriminator; generated inputs are detached."""
    lr_grid = tuple(b.X_t.shape[2:])
    pairs = {
        "target": (b.X_t, b.X_st),
        "feature": (b.f_s, b.f_t),
        "source": (b.Y_s, b.Y_hat_t),
    }
    out = {}
    for d_id, (real, fake) in pairs.items():
        loss = (_adv_real(nets.discriminate(d_id, real.detach(), lr_grid))
                + _adv_fake(nets.discriminate(d_id, fake.detach(), lr_grid)))
        out[d_id] = _finite(f"d_{d_id}", loss)
    return out


class Trainer:
    """Owns the networks and both optimizers; one call to `step` is one D then one G update."""

    def __init__(self, nets: Networks, optim: OptimSettings, weights: LossWeights,
                 cl_cfg: ContrastiveConfig, contrastive: bool = True):
        self.nets = nets
        self.optim = optim
        self.weights = weights
        self.cl_cfg = cl_cfg
        self.contrastive = contrastive
        self.opt_g = torch.optim.Adam(nets.generator_parameters(), lr=optim.lr_generator, betas=optim.betas)
        self.opt_d = torch.optim.Adam(nets.discriminator_parameters(), lr=optim.lr_discriminator,
                                      betas=optim.betas)
        self.step_count = 0
        self.epoch = 0
        self.last_good: str | None = None

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, contrastive: bool = True) -> Trainer:
        nets = build_networks(cfg.network, cfg.optim.seed)
        return cls(nets, cfg.optim, cfg.effective_weights, cfg.contrastive, contrastive)

    def step(self, Y_s: torch.Tensor, X_t: torch.Tensor) -> dict:
        t0 = time.perf_counter()
        self.nets.train()
        try:
            b = build_flows(self.nets, Y_s, X_t)

            self.opt_d.zero_grad(set_to_none=True)
            d_losses = discriminator_loss(self.nets, b)
            sum(d_losses.values()).backward()
            self.opt_d.step()

            self.opt_g.zero_grad(set_to_none=True)
            total, breakdown = generator_loss(self.nets, b, self.weights, self.cl_cfg, self.contrastive)
            _finite("generator_total", total)
            total.backward()
            self.opt_g.step()
            self.opt_d.zero_grad(set_to_none=True)
        except DivergenceError as e:
            raise DivergenceError(e.name, self.last_good) from e

        self.step_count += 1
        rec = {"step": self.step_count, "g_total": total.item()}
        rec.update({k: v.item() for k, v in breakdown.items()})
        rec.update({f"d_{k}": v.item() for k, v in d_losses.items()})
        rec["lr_generator"] = self.optim.lr_generator
        rec["lr_discriminator"] = self.optim.lr_discriminator
        rec["seconds"] = time.perf_counter() - t0
        return rec

    def state_dict(self) -> dict:
        return {
            "nets": self.nets.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "step": self.step_count,
            "epoch": self.epoch,
        }

    def load_state_dict(self, d: dict) -> None:
        self.nets.load_state_dict(d["nets"])
        self.opt_g.load_state_dict(d["opt_g"])
        self.opt_d.load_state_dict(d["opt_d"])
        self.step_count = d["step"]
        self.epoch = d["epoch"]


def save_checkpoint(path: str | Path, trainer: Trainer, cfg: ExperimentConfig,
                    rng_state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "config": cfg.to_dict(),
        "fingerprint": cfg.fingerprint(),
        "trainer": trainer.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "data_rng": rng_state,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[Trainer, ExperimentConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, weights_only=False)
    cfg = ExperimentConfig.from_dict(blob["config"])
    trainer = Trainer.from_config(cfg)
    trainer.load_state_dict(blob["trainer"])
    return trainer, cfg, blob


@torch.no_grad()
def infer(nets: Networks, X_t) -> torch.Tensor | np.ndarray:
    """SR prediction ``sr_decode(lr_encode(X_t))``.

    Accepts a ``(B, 1, *grid)`` tensor, or a bare ``grid``-shaped numpy volume
    (returned as a float64 numpy volume on the HR grid). Samples run one at a
    time so a prediction does not depend on what else is in the batch.
    """
    was_training = nets.training
    nets.eval()
    try:
        if isinstance(X_t, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(X_t, dtype=np.float32))[None, None]
            return nets.sr_decode(nets.lr_encode(x))[0, 0].double().numpy()
        return torch.cat([nets.sr_decode(nets.lr_encode(x)) for x in X_t.split(1)])
    finally:
        nets.train(was_training)
