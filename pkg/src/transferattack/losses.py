"""Differentiable per-sample losses used for crafting and gradient checks.

Every function returns one value per batch row so that summing over the batch
keeps each sample's input gradient independent of the others.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

DEFAULT_KAPPA = 200.0
DEFAULT_BETA = 0.1


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, target, reduction="none")


def class_margin(
    logits: torch.Tensor,
    target: torch.Tensor,
    kappa: float = DEFAULT_KAPPA,
    saturating: bool = False,
) -> torch.Tensor:
    """Best wrong-class logit minus the target logit, clamped at ``-kappa``.

    With ``saturating=True`` the clamp is applied from above at ``+kappa``
    instead, so ascent stops paying off once the margin reaches ``kappa``.
    Ties in the clamp pass the gradient through to the margin.
    """
    if logits.shape[1] < 2:
        raise ValueError("class margin needs at least two classes")
    if torch.any((target < 0) | (target >= logits.shape[1])):
        raise IndexError(f"target index out of range for {logits.shape[1]} classes")
    own = logits.gather(1, target[:, None])[:, 0]
    masked = logits.scatter(1, target[:, None], float("-inf"))
    other = masked.max(dim=1).values
    margin = other - own
    if saturating:
        return torch.clamp(margin, max=kappa)
    return torch.clamp(margin, min=-kappa)


def featuremap_distance(feat_adv: torch.Tensor, feat_orig: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between feature tensors, flattened per sample.

    The gradient at zero distance is defined as zero (the first crafting step
    always starts there).
    """
    diff = (feat_adv - feat_orig).flatten(1)
    sq = (diff * diff).sum(dim=1)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(sq))
