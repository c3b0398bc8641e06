"""Flow-guided backward warping, flow rescaling and occlusion masks.

Torch tensors use N x C x H x W for fields and N x 2 x H x W for flows
(channel 0 = dx, channel 1 = dy, in pixels).  Numpy arrays / ``FeatureMap`` /
``FlowField`` inputs use H x W x C and H x W x 2 and go through the kernels in
:mod:`jffra.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .types import FeatureMap, FlowField, OcclusionMask, ParameterError, ShapeError


@dataclass(frozen=True)
class WarpConfig:
    interpolation: str = "bilinear"
    boundary: str = "zero_pad"

    def __post_init__(self):
        if self.interpolation != "bilinear":
            raise ParameterError(f"unsupported interpolation {self.interpolation!r}")
        if self.boundary != "zero_pad":
            raise ParameterError(f"unsupported boundary {self.boundary!r}")


DEFAULT_WARP = WarpConfig()


def warp_tensor(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    if field.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ShapeError(f"expected N x C x H x W field and N x 2 x H x W flow, got {tuple(field.shape)}, {tuple(flow.shape)}")
    if field.shape[0] != flow.shape[0] or field.shape[-2:] != flow.shape[-2:]:
        raise ShapeError(f"field {tuple(field.shape)} and flow {tuple(flow.shape)} disagree")
    N, C, H, W = field.shape
    flow = flow.to(field.dtype)
    ys = torch.arange(H, dtype=field.dtype, device=field.device).view(1, H, 1)
    xs = torch.arange(W, dtype=field.dtype, device=field.device).view(1, 1, W)
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    # explicit four-tap gather rather than grid_sample, so integer flows
    # reproduce shifted samples bit for bit
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    ax = x - x0
    ay = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = field.reshape(N, C, H * W)
    out = field.new_zeros(N, C, H, W)
    for oy, wy in ((0, 1 - ay), (1, ay)):
        yy = y0 + oy
        for ox, wx in ((0, 1 - ax), (1, ax)):
            xx = x0 + ox
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            idx = (yy.clamp(0, H - 1) * W + xx.clamp(0, W - 1)).view(N, 1, H * W).expand(N, C, H * W)
            tap = torch.gather(flat, 2, idx).view(N, C, H, W)
            out = out + (wy * wx * valid.to(field.dtype)).unsqueeze(1) * tap
    return out


def warp(field, flow, cfg: WarpConfig = DEFAULT_WARP):
    """Sample ``field`` at ``(w + dx, h + dy)`` for every grid position.

    Taps outside the grid read zero.  Returns the same kind as ``field``.
    """
    if isinstance(field, torch.Tensor):
        if isinstance(flow, FlowField):
            flow = torch.as_tensor(flow.values, dtype=field.dtype).permute(2, 0, 1)[None]
        return warp_tensor(field, flow)

    level = field.level if isinstance(field, FeatureMap) else None
    arr = field.values if isinstance(field, FeatureMap) else np.asarray(field, dtype=np.float64)
    fl = flow.values if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    if arr.ndim != 3 or fl.ndim != 3 or fl.shape[2] != 2 or arr.shape[:2] != fl.shape[:2]:
        raise ShapeError(f"field {arr.shape} and flow {fl.shape} disagree")
    out = kernels.warp_bilinear(arr, fl)
    if squeeze:
        out = out[..., 0]
    return FeatureMap(out, level) if level is not None else out


def scale_flow(flow, spatial_factor: float):
    """Resize a flow field by ``spatial_factor`` and rescale its displacements."""
    if spatial_factor <= 0:
        raise ParameterError(f"spatial_factor must be positive, got {spatial_factor}")
    if isinstance(flow, FlowField):
        t = torch.as_tensor(np.array(flow.values)).permute(2, 0, 1)[None]
        out = scale_flow(t, spatial_factor)
        return FlowField(out[0].permute(1, 2, 0).numpy(), flow.from_time, flow.to_time)

    H, W = flow.shape[-2:]
    size = (int(round(H * spatial_factor)), int(round(W * spatial_factor)))
    if min(size) < 1:
        raise ParameterError(f"scaling {H}x{W} by {spatial_factor} leaves no pixels")
    if size == (H, W) and spatial_factor == 1.0:
        return flow
    resized = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    return resized * spatial_factor


def occlusion_mask_tensor(gt_ref: torch.Tensor, gt_other: torch.Tensor, flow: torch.Tensor, alpha: float) -> torch.Tensor:
    """N x 1 x H x W mask ``exp(-alpha * ||ref - warp(other)||^2)``."""
    if alpha <= 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if gt_ref.shape != gt_other.shape:
        raise ShapeError(f"frames disagree: {tuple(gt_ref.shape)} vs {tuple(gt_other.shape)}")
    diff = gt_ref - warp_tensor(gt_other, flow)
    return torch.exp(-alpha * diff.pow(2).sum(dim=1, keepdim=True))


def compute_occlusion_mask(gt_ref, gt_other, flow, alpha: float = 0.2):
    if isinstance(gt_ref, torch.Tensor):
        return occlusion_mask_tensor(gt_ref, gt_other, flow, alpha)
    if alpha <= 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    ref = np.asarray(gt_ref, dtype=np.float64)
    other = np.asarray(gt_other, dtype=np.float64)
    if ref.shape != other.shape:
        raise ShapeError(f"frames disagree: {ref.shape} vs {other.shape}")
    if ref.ndim == 2:
        ref, other = ref[..., None], other[..., None]
    diff = ref - warp(other, flow)
    m = np.exp(-alpha * np.sum(diff**2, axis=-1))
    # exp underflows to 0.0 for huge differences; keep the mask strictly positive
    return OcclusionMask(np.maximum(m, np.finfo(np.float64).tiny))
