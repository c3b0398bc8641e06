"""PSNR, SSIM and the flow-warping temporal consistency metric (OPW)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .flow import FlowProvider, estimate_flow
from .types import ParameterError, ShapeError, VideoClip
from .warp import compute_occlusion_mask, warp

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_IDENTICAL = math.inf


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes disagree: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB over all pixels and channels; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def to_luma(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3 and x.shape[-1] == 3:
        return x @ LUMA
    if x.ndim == 3 and x.shape[-1] == 1:
        return x[..., 0]
    return x


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=1) @ g


def ssim_map(a, b, peak: float = 1.0, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03):
    a, b = _pair(a, b)
    a, b = to_luma(a), to_luma(b)
    if a.shape[0] < win or a.shape[1] < win:
        raise ParameterError(f"image {a.shape} smaller than the {win}x{win} SSIM window")
    g = gaussian_window(win, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM on luminance, 11x11 Gaussian window (sigma 1.5)."""
    return float(np.mean(ssim_map(a, b, peak)))


def _frames(clip) -> np.ndarray:
    return clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float64)


def _inside(flow: np.ndarray) -> np.ndarray:
    """Pixels whose sample position lies within the grid (borders included)."""
    H, W = flow.shape[:2]
    y, x = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    sx, sy = x + flow[..., 0], y + flow[..., 1]
    return (sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)


def warping_error(rest_t, rest_prev, gt_t, gt_prev, flow, alpha: float = 0.2) -> float:
    """Mask-normalised L1 warping error for one consecutive pair.

    Pixels that flow out of the frame have no counterpart and are masked out
    along with the occluded ones.
    """
    flow = flow.values if hasattr(flow, "values") else np.asarray(flow, dtype=np.float64)
    mask = compute_occlusion_mask(gt_t, gt_prev, flow, alpha).values * _inside(flow)
    if not mask.any():
        raise ParameterError("every pixel flows out of the frame")
    diff = np.abs(rest_t - warp(rest_prev, flow)).sum(axis=-1)
    return float(np.sum(mask * diff) / np.sum(mask))


def opw(restored, gt, provider: FlowProvider = FlowProvider(), alpha: float = 0.2) -> float:
    """Mean masked warping error between consecutive restored frames.

    Flows and masks come from the ground-truth frames via ``provider``.
    """
    r, g = _frames(restored), _frames(gt)
    if r.shape != g.shape:
        raise ShapeError(f"restored {r.shape} and ground truth {g.shape} disagree")
    if r.shape[0] < 2:
        raise ParameterError("OPW needs at least two frames")
    errs = []
    for t in range(1, r.shape[0]):
        flow = estimate_flow(provider, g[t], g[t - 1], ref_time=t, other_time=t - 1)
        errs.append(warping_error(r[t], r[t - 1], g[t], g[t - 1], flow, alpha))
    return float(np.mean(errs))


@dataclass
class MetricReport:
    per_frame: list = field(default_factory=list)
    opw: Optional[float] = None
    metadata: dict = field(default_factory=dict)
    per_clip: list = field(default_factory=list)

    def add_frame(self, index: int, psnr_db: float, ssim_val: float, clip: Optional[str] = None):
        rec = {"frame": index, "psnr": psnr_db, "ssim": ssim_val}
        if clip is not None:
            rec["clip"] = clip
        self.per_frame.append(rec)

    @property
    def aggregate(self) -> dict:
        n = len(self.per_frame)
        p = float(np.mean([f["psnr"] for f in self.per_frame])) if n else math.nan
        s = float(np.mean([f["ssim"] for f in self.per_frame])) if n else math.nan
        return {"mean_psnr": p, "mean_ssim": s, "opw": self.opw, "frames": n}

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "per_frame": self.per_frame, "per_clip": self.per_clip, "aggregate": self.aggregate}

    def to_json(self) -> str:
        # identical frames give psnr = Infinity (non-strict JSON, parsed by Python's json)
        return json.dumps(self.to_dict(), indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(per_frame=list(d["per_frame"]), opw=d["aggregate"].get("opw"), metadata=dict(d.get("metadata", {})), per_clip=list(d.get("per_clip", [])))


def frame_metrics(restored, gt, report: Optional[MetricReport] = None, clip: Optional[str] = None) -> MetricReport:
    report = report if report is not None else MetricReport()
    r, g = _frames(restored), _frames(gt)
    if r.shape != g.shape:
        raise ShapeError(f"restored {r.shape} and ground truth {g.shape} disagree")
    for t in range(r.shape[0]):
        report.add_frame(t, psnr(r[t], g[t]), ssim(r[t], g[t]), clip)
    return report
