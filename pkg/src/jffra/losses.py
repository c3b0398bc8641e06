"""Occlusion-aware temporal consistency loss and the total training objective.

All tensors are N x C x H x W, flows N x 2 x H x W.  Masks and ground-truth
warps depend only on ground truth and carry no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .types import ParameterError, ShapeError
from .warp import occlusion_mask_tensor, warp_tensor


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.2
    w2: float = 0.2
    alpha: float = 0.2

    def __post_init__(self):
        if min(self.w1, self.w2, self.alpha) < 0:
            raise ParameterError("loss weights must be non-negative")


def temporal_consistency_loss(rest_t, rest_other, gt_t, gt_other, flow_gt, alpha: float = 0.2):
    """Mean over pixels of ``m * ||rest_t - warp(rest_other)||_1``."""
    if not (rest_t.shape == rest_other.shape == gt_t.shape == gt_other.shape):
        raise ShapeError("restored and ground-truth frames must share a shape")
    with torch.no_grad():
        mask = occlusion_mask_tensor(gt_t, gt_other, flow_gt, alpha)
    warped = warp_tensor(rest_other, flow_gt.detach())
    dist = (rest_t - warped).abs().sum(dim=1, keepdim=True)
    return (mask * dist).mean()


def total_loss(rest_t, gt_t, rest_prev, rest_next, gt_prev, gt_next, flows_gt, weights: LossWeights = LossWeights()):
    """Returns ``(total, {"l1": .., "temporal_prev": .., "temporal_next": ..})``.

    ``flows_gt`` is the (t -> t-1, t -> t+1) pair computed on ground truth.
    """
    if rest_t.shape != gt_t.shape:
        raise ShapeError("restored and ground-truth frames must share a shape")
    flow_prev, flow_next = flows_gt
    l1 = (gt_t - rest_t).abs().mean()
    lt_prev = temporal_consistency_loss(rest_t, rest_prev, gt_t, gt_prev, flow_prev, weights.alpha)
    lt_next = temporal_consistency_loss(rest_t, rest_next, gt_t, gt_next, flow_next, weights.alpha)
    total = l1 + weights.w1 * lt_prev + weights.w2 * lt_next
    return total, {"l1": l1, "temporal_prev": lt_prev, "temporal_next": lt_next}
