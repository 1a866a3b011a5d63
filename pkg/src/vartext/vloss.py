"""Variational training objective: masked reconstruction BCE plus per-level
analytic Bernoulli KL toward area-resized ground-truth priors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NUM_LEVELS, PROB_EPS, LatentStack
from .tensor import ShapeError, Tensor, log, mul, scalar_mul, sum_all

DEFAULT_POS_THRESHOLD = 0.1
NEG_RATIO = 3
FALLBACK_NEGATIVES = 64


@dataclass
class LossReport:
    recon: float
    kl: float
    total: float
    per_level_kl: list = field(default_factory=lambda: [0.0] * NUM_LEVELS)
    num_pos: int = 0
    num_neg_selected: int = 0
    total_tensor: Tensor | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "recon": self.recon,
            "kl": self.kl,
            "total": self.total,
            "per_level_kl": list(self.per_level_kl),
            "num_pos": self.num_pos,
            "num_neg_selected": self.num_neg_selected,
        }


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def pixel_bce(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.clip(pred, PROB_EPS, 1 - PROB_EPS)
    return -(target * np.log(p) + (1 - target) * np.log1p(-p))


def ohem_select(pred, target, pos_threshold: float = DEFAULT_POS_THRESHOLD,
                ratio: int = NEG_RATIO, fallback: int = FALLBACK_NEGATIVES) -> np.ndarray:
    """Boolean mask keeping every positive and the hardest negatives.

    Selection runs independently per channel over the whole batch: positives
    are ``target > pos_threshold``; negatives are ranked by their BCE and the
    top ``ratio * num_pos`` kept (or ``fallback`` when a channel has no
    positives).
    """
    p, y = _data(pred), _data(target)
    if p.shape != y.shape:
        raise ShapeError(f"ohem_select: pred {p.shape} vs target {y.shape}")
    loss = pixel_bce(p, y)
    mask = np.zeros(p.shape, dtype=bool)
    for c in range(p.shape[1]):
        pos = y[:, c] > pos_threshold
        n_pos = int(pos.sum())
        neg_loss = np.where(pos, -np.inf, loss[:, c]).reshape(-1)
        n_avail = int((~pos).sum())
        want = ratio * n_pos if n_pos > 0 else fallback
        k = min(want, n_avail)
        chan = pos.reshape(-1).copy()
        if k > 0:
            # stable sort keeps ties in index order, so selection is deterministic
            order = np.argsort(-neg_loss, kind="stable")[:k]
            chan[order] = True
        mask[:, c] = chan.reshape(pos.shape)
    return mask


def recon_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean binary cross-entropy over the masked entries of both channels."""
    y = _data(target).astype(pred.dtype)
    m = np.asarray(mask, dtype=bool)
    if pred.shape != y.shape or m.shape != y.shape:
        raise ShapeError("recon_loss: pred, target and mask must share a shape")
    count = int(m.sum())
    if count == 0:
        raise ValueError("recon_loss: empty mask")
    mf = m.astype(pred.dtype)
    ll = mul(log(pred), y * mf) + mul(log(1.0 - pred), (1 - y) * mf)
    return scalar_mul(sum_all(ll), -1.0 / count)


def bernoulli_kl(theta: Tensor, prior) -> Tensor:
    """Per-element mean of KL(Ber(theta) || Ber(prior))."""
    prior = np.clip(_data(prior), PROB_EPS, 1 - PROB_EPS).astype(theta.dtype)
    if prior.shape != theta.shape:
        raise ShapeError(f"bernoulli_kl: theta {theta.shape} vs prior {prior.shape}")
    one_minus = 1.0 - theta
    terms = mul(theta, log(theta) - np.log(prior)) + \
        mul(one_minus, log(one_minus) - np.log(1.0 - prior))
    return scalar_mul(sum_all(terms), 1.0 / theta.data.size)


def kl_total(latents: LatentStack):
    """Sum of per-level KL; returns (total Tensor or None, per-level floats)."""
    per_level = [0.0] * NUM_LEVELS
    if latents.empty:
        return None, per_level
    if len(latents.prior_target) < len(latents.theta) or \
            any(p is None for p in latents.prior_target[:len(latents.theta)]):
        raise ValueError("kl_total: missing prior target at a populated level")
    total = None
    for lvl, (theta, prior) in enumerate(zip(latents.theta, latents.prior_target)):
        kl = bernoulli_kl(theta, prior)
        per_level[lvl] = kl.item()
        total = kl if total is None else total + kl
    return total, per_level


def total_loss(pred: Tensor, target, latents: LatentStack | None = None,
               kl_weight: float = 1.0, pos_threshold: float = DEFAULT_POS_THRESHOLD) -> LossReport:
    mask = ohem_select(pred, target, pos_threshold)
    y = _data(target)
    num_pos = int((y > pos_threshold).sum())
    recon = recon_loss(pred, target, mask)
    kl, per_level = kl_total(latents) if latents is not None else (None, [0.0] * NUM_LEVELS)
    total = recon
    if kl is not None and kl_weight != 0:
        total = recon + scalar_mul(kl, kl_weight)
    kl_value = kl.item() if kl is not None else 0.0
    return LossReport(
        recon=recon.item(),
        kl=kl_value,
        total=total.item(),
        per_level_kl=per_level,
        num_pos=num_pos,
        num_neg_selected=int(mask.sum()) - num_pos,
        total_tensor=total,
    )
