"""L1 cost volume between reference features and flow-projected neighbours."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .types import FeatureMap, ParameterError, ShapeError


@dataclass(frozen=True)
class CostVolume:
    """``values[l + r, m + r, h, w]`` is the cost of displacement (row l, col m)."""

    values: np.ndarray
    radius: int

    def __post_init__(self):
        d = 2 * self.radius + 1
        if self.values.ndim != 4 or self.values.shape[:2] != (d, d):
            raise ShapeError(f"cost volume shape {self.values.shape} does not match radius {self.radius}")


class _CostVolumeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, f_ref, f_proj, r):
        a = f_ref.detach().contiguous()
        b = f_proj.detach().contiguous()
        ctx.save_for_backward(a, b)
        ctx.r = r
        return torch.from_numpy(kernels.cost_volume_forward(a.numpy(), b.numpy(), r))

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        ga, gb = kernels.cost_volume_backward(grad.contiguous().numpy(), a.numpy(), b.numpy(), ctx.r)
        return torch.from_numpy(ga), torch.from_numpy(gb), None


def _check_tensors(f_ref, f_proj, r):
    if r < 1:
        raise ParameterError(f"search radius must be >= 1, got {r}")
    if f_ref.shape != f_proj.shape or f_ref.dim() != 4:
        raise ShapeError(f"feature shapes disagree: {tuple(f_ref.shape)} vs {tuple(f_proj.shape)}")


def cost_volume_tensor(f_ref: torch.Tensor, f_proj: torch.Tensor, r: int = 4) -> torch.Tensor:
    """N x C x H x W inputs -> N x (2r+1) x (2r+1) x H x W costs (differentiable).

    CPU tensors go through the fused kernels; anything else uses
    :func:`cost_volume_autograd`.
    """
    _check_tensors(f_ref, f_proj, r)
    if f_ref.device.type != "cpu" or f_ref.dtype != f_proj.dtype:
        return cost_volume_autograd(f_ref, f_proj, r)
    return _CostVolumeFn.apply(f_ref, f_proj, r)


def cost_volume_autograd(f_ref: torch.Tensor, f_proj: torch.Tensor, r: int = 4) -> torch.Tensor:
    """Same contract as :func:`cost_volume_tensor`, built from torch ops."""
    if r < 1:
        raise ParameterError(f"search radius must be >= 1, got {r}")
    if f_ref.shape != f_proj.shape or f_ref.dim() != 4:
        raise ShapeError(f"feature shapes disagree: {tuple(f_ref.shape)} vs {tuple(f_proj.shape)}")
    N, C, H, W = f_ref.shape
    d = 2 * r + 1
    padded = F.pad(f_proj, (r, r, r, r))
    rows = []
    for i in range(d):
        cols = [(f_ref - padded[:, :, i : i + H, j : j + W]).abs().sum(dim=1) for j in range(d)]
        rows.append(torch.stack(cols, dim=1))
    return torch.stack(rows, dim=1)


def _as_hwc(f) -> np.ndarray:
    return f.values if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)


def build_cost_volume(f_ref, f_proj, r: int = 4):
    """Cost volume for torch batches or single H x W x C feature maps."""
    if isinstance(f_ref, torch.Tensor):
        return cost_volume_tensor(f_ref, f_proj, r)
    a, b = _as_hwc(f_ref), _as_hwc(f_proj)
    _check(a, b, r)
    return CostVolume(kernels.cost_volume_l1(a, b, r), r)


def _check(a, b, r):
    if r < 1:
        raise ParameterError(f"search radius must be >= 1, got {r}")
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"feature shapes disagree: {a.shape} vs {b.shape}")


def cost_volume_oracle(f_ref, f_proj, r: int = 4) -> CostVolume:
    """Reference implementation by explicit loops; keep inputs small."""
    a, b = _as_hwc(f_ref), _as_hwc(f_proj)
    _check(a, b, r)
    H, W, C = a.shape
    if H * W > 4096:
        raise ParameterError("oracle is meant for at most 4096 sites")
    d = 2 * r + 1
    out = np.zeros((d, d, H, W))
    for l in range(-r, r + 1):
        for m in range(-r, r + 1):
            for h in range(H):
                for w in range(W):
                    total = 0.0
                    for c in range(C):
                        hh, ww = h + l, w + m
                        v = b[hh, ww, c] if (0 <= hh < H and 0 <= ww < W) else 0.0
                        total += abs(a[h, w, c] - v)
                    out[l + r, m + r, h, w] = total
    return CostVolume(out, r)
