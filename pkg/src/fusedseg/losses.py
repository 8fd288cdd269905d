"""Training losses for clean/degraded pair training.

Segmentation terms act on the degraded prediction only; the consistency terms
pull degraded-branch decoder features and tokens towards detached clean-branch
anchors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, NumericError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 20.0
    beta: float = 1.0
    lambda1: float = 100.0
    lambda2: float = 2.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigurationError(f"loss weight {k} must be nonnegative, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    seg: torch.Tensor
    dice: torch.Tensor
    focal: torch.Tensor
    mfc: torch.Tensor
    tc: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred_probs, target, smooth=1.0):
    """Soft Dice loss, averaged over the batch (leading) dimension."""
    _check_shapes(pred_probs, target)
    p = pred_probs.reshape(pred_probs.shape[0], -1)
    g = target.reshape(target.shape[0], -1).to(p.dtype)
    dice = (2 * (p * g).sum(1) + smooth) / (p.sum(1) + g.sum(1) + smooth)
    return (1 - dice).mean()


def focal_loss(logits, target, gamma=2.0, alpha=0.25):
    """Class-balanced binary focal loss, mean over all pixels.

    ``alpha`` weighs foreground pixels and ``1 - alpha`` background pixels;
    ``log(p_t)`` is floored at ``log(1e-8)``.
    """
    _check_shapes(logits, target)
    g = target.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_1mp = F.logsigmoid(-logits)
    log_pt = g * log_p + (1 - g) * log_1mp
    log_pt = torch.clamp(log_pt, min=math.log(1e-8))
    pt = torch.exp(log_pt)
    a = g * alpha + (1 - g) * (1 - alpha)
    return (-a * (1 - pt) ** gamma * log_pt).mean()


def mfc_loss(mf_d, mf_c):
    """Mask-feature consistency: global-mean MSE against the detached clean features."""
    _check_shapes(mf_d, mf_c)
    return ((mf_d - mf_c.detach()) ** 2).mean()


def tc_loss(t_d, t_c):
    """Output-token consistency: global-mean MSE against the detached clean token."""
    _check_shapes(t_d, t_c)
    return ((t_d - t_c.detach()) ** 2).mean()


def total_loss(dice, focal, mfc, tc, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    for name, v in (("dice", dice), ("focal", focal), ("mfc", mfc), ("tc", tc)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericError(f"loss component {name!r} is not finite: {float(torch.as_tensor(v).detach())}")
    seg = w.alpha * dice + w.beta * focal
    total = seg + w.lambda1 * mfc + w.lambda2 * tc
    return LossReport(seg=seg, dice=dice, focal=focal, mfc=mfc, tc=tc, total=total)


def pair_loss(pair, target, weights: LossWeights | None = None) -> LossReport:
    """Full objective on :class:`~fusedseg.model.PairOutputs`."""
    w = weights or LossWeights()
    (_, inter_c), (pred_d, inter_d) = pair.clean, pair.degraded
    return total_loss(
        dice_loss(pred_d.probabilities, target, w.dice_smooth),
        focal_loss(pred_d.logits, target, w.focal_gamma, w.focal_alpha),
        mfc_loss(inter_d.mask_features, inter_c.mask_features),
        tc_loss(inter_d.robust_token, inter_c.robust_token),
        w,
    )


def seg_only_loss(pred, target, weights: LossWeights | None = None) -> LossReport:
    """Segmentation terms only, for single-branch parent pretraining."""
    w = weights or LossWeights()
    zero = pred.logits.new_zeros(())
    return total_loss(
        dice_loss(pred.probabilities, target, w.dice_smooth),
        focal_loss(pred.logits, target, w.focal_gamma, w.focal_alpha),
        zero, zero, w,
    )
