"""Training objective: segmentation terms plus the KL bottleneck on CIG latents."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .blocks import GaussianLatent, SegmentorOutput

DICE_SMOOTH = 1e-5


def gaussian_kl_to_standard(latent: GaussianLatent) -> torch.Tensor:
    """Elementwise-mean KL(N(mu, sigma^2) || N(0, 1)) = mean 0.5 (mu^2 + sigma^2 - ln sigma^2 - 1)."""
    mu, sigma = latent.mu, latent.sigma
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return 0.5 * torch.mean(mu ** 2 + sigma ** 2 - 2 * torch.log(sigma) - 1)


def _check_labels(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    if target.numel() and (int(target.max()) >= logits.shape[1] or int(target.min()) < 0):
        raise ValueError(f"target class {int(target.max())} outside [0, {logits.shape[1]})")


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-mean cross-entropy; ``target`` holds local class indices."""
    _check_labels(logits, target)
    return F.cross_entropy(logits, target.long())


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - mean over foreground classes of the soft Dice, summed over batch and voxels."""
    _check_labels(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), logits.shape[1]).movedim(-1, 1).to(probs.dtype)
    dims = (0,) + tuple(range(2, logits.dim()))
    inter = (probs * onehot).sum(dims)[1:]
    denom = probs.sum(dims)[1:] + onehot.sum(dims)[1:]
    return 1 - ((2 * inter + smooth) / (denom + smooth)).mean()


def mean_kl(latents: Sequence[GaussianLatent]) -> torch.Tensor | float:
    """Average of per-latent elementwise KL means, so the scale ignores resolution and stage count."""
    if not latents:
        return 0.0
    return torch.stack([gaussian_kl_to_standard(z) for z in latents]).mean()


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    dice_loss: torch.Tensor
    kl: torch.Tensor
    beta: float

    @property
    def total(self) -> torch.Tensor:
        return self.ce + self.dice_loss + self.beta * self.kl

    def as_dict(self) -> dict[str, float]:
        vals = {"ce": self.ce, "dice": self.dice_loss, "kl": self.kl, "total": self.total}
        return {k: float(torch.as_tensor(v).detach()) for k, v in vals.items()}

    def first_nonfinite(self) -> str | None:
        for name, v in (("ce", self.ce), ("dice", self.dice_loss), ("kl", self.kl)):
            if not torch.isfinite(torch.as_tensor(v)).all():
                return name
        return None


def segmentor_loss(output: SegmentorOutput, target: torch.Tensor, beta: float) -> LossBreakdown:
    kl = mean_kl(output.latents)
    kl = kl if torch.is_tensor(kl) else output.logits.new_zeros(())
    return LossBreakdown(ce_loss(output.logits, target), soft_dice_loss(output.logits, target), kl, beta)


def ciml_total_loss(outputs: Mapping[str, SegmentorOutput], targets: Mapping[str, torch.Tensor],
                    beta: float) -> tuple[dict[str, LossBreakdown], torch.Tensor]:
    """Per-segmentor ``ce + dice + beta * kl`` and their sum."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if set(outputs) != set(targets):
        raise ValueError(f"outputs {sorted(outputs)} and targets {sorted(targets)} name different segmentors")
    parts = {name: segmentor_loss(outputs[name], targets[name], beta) for name in outputs}
    total = sum(p.total for p in parts.values())
    return parts, total
