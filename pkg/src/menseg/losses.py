"""Multi-class soft Dice, focal loss and their weighted sum.

All losses take softmax probabilities of shape ``(C, D, H, W)`` (or batched
``(B, C, D, H, W)``) and a one-hot target of the same shape.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import torch

from .errors import ConfigError, NotNormalized, ShapeMismatch

FOCAL_EPS = 1e-7
NORMALIZATION_TOL = 1e-4


@dataclasses.dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 0.75
    lambda_focal: float = 0.25
    gamma: float = 2.0
    alpha: float = 0.25
    dice_smooth: float = 1e-5
    class_weights: Optional[Sequence[float]] = None
    # "voxels_classes" averages over every (voxel, class) term; "voxels" sums
    # over classes and averages over voxels
    focal_reduction: str = "voxels_classes"

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_focal < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be positive")
        if self.focal_reduction not in ("voxels_classes", "voxels"):
            raise ConfigError(f"unknown focal_reduction {self.focal_reduction!r}")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))


def _prepare(probs, target):
    probs = torch.as_tensor(probs)
    target = torch.as_tensor(getattr(target, "data", target))
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if probs.ndim == 4:
        probs, target = probs[None], target[None]
    if probs.ndim != 5:
        raise ShapeMismatch(f"expected (C, D, H, W) or (B, C, D, H, W), got {tuple(probs.shape)}")
    sums = probs.detach().sum(dim=1)
    if not torch.all(torch.abs(sums - 1) <= NORMALIZATION_TOL):
        raise NotNormalized("class probabilities do not sum to 1 at every voxel")
    return probs, target.to(probs.dtype)


def _class_weights(cfg: LossConfig, n_classes: int, like: torch.Tensor) -> torch.Tensor:
    if cfg.class_weights is None:
        return torch.ones(n_classes, dtype=like.dtype, device=like.device)
    if len(cfg.class_weights) != n_classes:
        raise ConfigError(f"class_weights has {len(cfg.class_weights)} entries, need {n_classes}")
    return torch.tensor(cfg.class_weights, dtype=like.dtype, device=like.device)


def dice_loss(probs, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean over classes of ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)``."""
    p, t = _prepare(probs, target)
    dims = (0, 2, 3, 4)
    inter = (p * t).sum(dims)
    denom = p.sum(dims) + t.sum(dims)
    s = cfg.dice_smooth
    per_class = 1 - (2 * inter + s) / (denom + s)
    return per_class.mean()


def focal_loss(probs, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean of ``alpha (1 - p_t)^gamma (-log p_t)`` with ``p_t = p`` on target voxels."""
    p, t = _prepare(probs, target)
    p = p.clamp(FOCAL_EPS, 1 - FOCAL_EPS)
    pt = t * p + (1 - t) * (1 - p)
    terms = cfg.alpha * (1 - pt) ** cfg.gamma * (-torch.log(pt))
    if cfg.class_weights is not None:
        terms = terms * _class_weights(cfg, p.shape[1], p)[None, :, None, None, None]
    if cfg.focal_reduction == "voxels":
        return terms.sum(dim=1).mean()
    return terms.mean()


def combined_loss(probs, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return cfg.lambda_dice * dice_loss(probs, target, cfg) + cfg.lambda_focal * focal_loss(probs, target, cfg)


def soft_dice(probs, target, smooth: float = 1e-5) -> float:
    """Mean per-class soft Dice score (``1 - dice_loss``) as a float."""
    cfg = LossConfig(dice_smooth=smooth)
    with torch.no_grad():
        return float(1 - dice_loss(probs, target, cfg))

