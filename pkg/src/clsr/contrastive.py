"""InfoNCE with inter- and intra-embedding negatives.

For an anchor ``u_i`` with positive ``v_i`` the negatives are every other row
of the opposite side (``v_k``, inter) and every other row of the anchor's own
side (``u_k``, intra). The batch objective averages both anchor directions::

    L(u_i, v_i) = log  e^{s(u_i,v_i)} / (e^{s(u_i,v_i)} + sum_{k!=i} e^{s(u_i,v_k)} + sum_{k!=i} e^{s(u_i,u_k)})
    L_cl        = -1/(2N) * sum_i [L(u_i, v_i) + L(v_i, u_i)]

with ``s = cos / temperature``. The scalar helpers (`inter_term`,
`intra_term`, `pairwise_loss`) follow the formula literally and exist mostly
for cross-checking the vectorized `symmetric_batch_loss`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .config import ConfigError, ContrastiveConfig


class ZeroNormError(ValueError):
    """An embedding row has zero Euclidean norm, so its cosine is undefined."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _as_batch(x, name: str) -> torch.Tensor:
    t = _as_tensor(x)
    if t.ndim != 2:
        raise ConfigError(f"{name}: expected an (N, D) embedding batch, got shape {tuple(t.shape)}")
    if t.shape[0] < 1 or t.shape[1] < 1:
        raise ConfigError(f"{name}: empty embedding batch {tuple(t.shape)}")
    return t


def _check_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x.detach(), dim=-1)
    bad = torch.nonzero(norms == 0).flatten()
    if bad.numel():
        raise ZeroNormError(f"{name}: row {int(bad[0])} has zero norm")
    return norms


def _normalize(x: torch.Tensor, name: str, eps: float) -> torch.Tensor:
    _check_rows(x, name)
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(eps)


def cosine_similarity(u, v) -> float:
    u, v = _as_tensor(u).double().flatten(), _as_tensor(v).double().flatten()
    if u.shape != v.shape:
        raise ConfigError(f"dimension mismatch: {u.numel()} vs {v.numel()}")
    nu = _check_rows(u[None], "u")[0]
    nv = _check_rows(v[None], "v")[0]
    return float(torch.clamp(torch.dot(u, v) / (nu * nv), -1.0, 1.0))


def _check_index(i: int, n: int) -> None:
    if not 0 <= i < n:
        raise IndexError(f"anchor index {i} out of range for batch size {n}")


def _negative_sum(anchor, batch, i: int, tau: float) -> float:
    batch = _as_batch(batch, "batch")
    _check_index(i, batch.shape[0])
    return math.fsum(
        math.exp(cosine_similarity(anchor, batch[k]) / tau) for k in range(batch.shape[0]) if k != i
    )


def inter_term(u_i, V, i: int, tau: float) -> float:
    """Sum of ``exp(cos(u_i, v_k) / tau)`` over the opposite side, ``k != i``."""
    return _negative_sum(u_i, V, i, tau)


def intra_term(u_i, U, i: int, tau: float) -> float:
    """Sum of ``exp(cos(u_i, u_k) / tau)`` over the anchor's own side, ``k != i``."""
    return _negative_sum(u_i, U, i, tau)


def pairwise_loss(i: int, U, V, cfg: ContrastiveConfig) -> float:
    """Log-probability of the positive pair for anchor ``u_i`` (always <= 0)."""
    U, V = _as_batch(U, "U"), _as_batch(V, "V")
    if U.shape != V.shape:
        raise ConfigError(f"U and V shapes differ: {tuple(U.shape)} vs {tuple(V.shape)}")
    _check_index(i, U.shape[0])
    tau = cfg.temperature
    pos = cosine_similarity(U[i], V[i]) / tau
    inter = inter_term(U[i], V, i, tau)
    intra = intra_term(U[i], U, i, tau)
    # shift by the positive logit so exp never overflows for small tau
    rest = (inter + intra) * math.exp(-pos)
    return -math.log1p(rest)


def _directional(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """Sum over anchors ``a_i`` of log-softmax weight on the positive ``b_i``."""
    n = a.shape[0]
    inter = a @ b.T / tau
    intra = (a @ a.T / tau).masked_fill(torch.eye(n, dtype=torch.bool, device=a.device), -math.inf)
    pos = torch.diagonal(inter)
    return (pos - torch.logsumexp(torch.cat([inter, intra], dim=1), dim=1)).sum()


def symmetric_batch_loss(U, V, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    """Batch contrastive loss, differentiable in every entry of ``U`` and ``V``.

    Row ``i`` of ``U`` and row ``i`` of ``V`` form the positive pair; all other
    rows in both batches are negatives. Returns a 0-dim tensor >= 0 that is
    exactly 0 for N = 1.
    """
    cfg = cfg or ContrastiveConfig()
    U, V = _as_batch(U, "U"), _as_batch(V, "V")
    if U.shape != V.shape:
        raise ConfigError(f"batch mismatch: U {tuple(U.shape)} vs V {tuple(V.shape)}")
    un = _normalize(U, "U", cfg.epsilon)
    vn = _normalize(V, "V", cfg.epsilon)
    tau = cfg.temperature
    total = _directional(un, vn, tau) + _directional(vn, un, tau)
    # "+ 0.0" turns the IEEE -0.0 of the N = 1 case into +0.0
    return -total / (2 * U.shape[0]) + 0.0


def flatten_to_embeddings(maps: torch.Tensor | Sequence) -> torch.Tensor:
    """One raster-flattened row per sample; ``maps`` is (N, ...) or a list of equal-shape arrays."""
    if isinstance(maps, torch.Tensor):
        if maps.ndim < 1 or maps.shape[0] < 1:
            raise ConfigError("need at least one map")
        return maps.reshape(maps.shape[0], -1)
    items = [_as_tensor(m) for m in maps]
    if not items:
        raise ConfigError("need at least one map")
    shapes = {tuple(m.shape) for m in items}
    if len(shapes) > 1:
        raise ConfigError(f"maps have heterogeneous shapes: {sorted(shapes)}")
    return torch.stack([m.reshape(-1) for m in items])
