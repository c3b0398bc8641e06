"""Initial-flow providers.

A provider turns a (reference, other) frame pair into a backward flow on the
reference grid, so that ``warp(other, flow)`` approximates ``reference``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .types import FlowField, ParameterError, ShapeError

PROVIDER_KINDS = ("block_match", "synthetic_oracle", "external", "zero")
FLOW_MAGIC = b"JFLO"


@dataclass(frozen=True)
class FlowProvider:
    """``motion`` describes per-frame motion for ``synthetic_oracle``:
    ``{"kind": "translation", "dx": .., "dy": ..}`` or
    ``{"kind": "rotation_small", "angle": degrees}``.  ``flow_dir`` holds
    ``<ref>_<other>.jflo`` files for ``external``.
    """

    kind: str = "block_match"
    block_size: int = 8
    radius: int = 8
    smooth: bool = True
    motion: Optional[dict] = None
    flow_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ParameterError(f"unknown flow provider {self.kind!r}")
        if self.block_size < 1 or self.radius < 0:
            raise ParameterError("block_size must be >= 1 and radius >= 0")
        if self.kind == "synthetic_oracle" and not self.motion:
            raise ParameterError("synthetic_oracle needs a motion description")
        if self.kind == "external" and not self.flow_dir:
            raise ParameterError("external provider needs flow_dir")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "FlowProvider":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _frame(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim == 2 else a


def block_match(ref, other, block_size: int = 8, radius: int = 8, smooth: bool = True) -> np.ndarray:
    """Integer SAD block matching; returns an H x W x 2 (dx, dy) array."""
    ref, other = _frame(ref), _frame(other)
    if ref.shape != other.shape:
        raise ShapeError(f"frames disagree: {ref.shape} vs {other.shape}")
    H, W = ref.shape[:2]
    best = kernels.sad_search(ref, other, block_size, radius).astype(np.float64)
    if not smooth:
        dense = np.repeat(np.repeat(best, block_size, axis=0), block_size, axis=1)
        return dense[:H, :W]
    # bilinear interpolation between block centres
    grid = torch.from_numpy(best).permute(2, 0, 1)[None]
    nby, nbx = best.shape[:2]
    dense = F.interpolate(grid, size=(nby * block_size, nbx * block_size), mode="bilinear", align_corners=False)
    return dense[0, :, :H, :W].permute(1, 2, 0).numpy().copy()


def estimate_flow(
    provider: FlowProvider,
    ref,
    other,
    *,
    ref_time: Optional[int] = None,
    other_time: Optional[int] = None,
) -> FlowField:
    """Flow aligning ``other`` to ``ref``.

    ``synthetic_oracle`` needs the time offset and ``external`` the absolute
    times; ``block_match`` and ``zero`` only look at the pixels.
    """
    ref, other = _frame(ref), _frame(other)
    if ref.shape != other.shape:
        raise ShapeError(f"frames disagree: {ref.shape} vs {other.shape}")
    H, W = ref.shape[:2]
    ft = 0 if ref_time is None else ref_time
    tt = 0 if other_time is None else other_time

    if provider.kind == "zero":
        return FlowField(np.zeros((H, W, 2)), ft, tt)
    if provider.kind == "block_match":
        v = block_match(ref, other, provider.block_size, provider.radius, provider.smooth)
        return FlowField(v, ft, tt)
    if provider.kind == "synthetic_oracle":
        if ref_time is None or other_time is None:
            raise ParameterError("synthetic_oracle needs ref_time and other_time")
        return oracle_flow(provider.motion, (H, W), other_time - ref_time, ft, tt)
    if ref_time is None or other_time is None:
        raise ParameterError("external provider needs ref_time and other_time")
    if ref_time == other_time:
        return FlowField(np.zeros((H, W, 2)), ft, tt)
    path = Path(provider.flow_dir) / f"{ref_time:06d}_{other_time:06d}.jflo"
    flow = read_flow_file(path)
    if flow.shape != (H, W):
        raise ShapeError(f"{path} holds a {flow.shape} flow for {H}x{W} frames")
    return FlowField(flow.values, ft, tt)


def oracle_flow(motion: dict, shape, dt: int, from_time: int = 0, to_time: int = 0) -> FlowField:
    """Exact flow between frames ``dt`` apart of a clip built with ``motion``."""
    kind = motion["kind"]
    if kind == "translation":
        values = synthetic_flow("translation", shape, dx=0.0, dy=0.0).values
        values = values + np.array([motion["dx"] * dt, motion["dy"] * dt])
        return FlowField(values, from_time, to_time)
    if kind == "rotation_small":
        angle = motion["angle"] * dt
        return FlowField(_rotation_field(shape, angle), from_time, to_time)
    raise ParameterError(f"unknown motion kind {kind!r}")


def _rotation_field(shape, angle_deg: float) -> np.ndarray:
    H, W = shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    y, x = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    th = math.radians(angle_deg)
    px, py = x - cx, y - cy
    rx = math.cos(th) * px - math.sin(th) * py
    ry = math.sin(th) * px + math.cos(th) * py
    return np.stack([rx - px, ry - py], axis=-1)


def synthetic_flow(kind: str, shape, **params) -> FlowField:
    """Analytic flow on an H x W grid.

    ``translation``: ``dx``, ``dy`` in pixels (|.| <= 8).
    ``rotation_small``: ``angle`` in degrees (|.| <= 5) about the grid centre;
    the field maps each pixel to its rotated position.
    """
    H, W = shape
    if kind == "translation":
        dx, dy = float(params.get("dx", 0.0)), float(params.get("dy", 0.0))
        if abs(dx) > 8 or abs(dy) > 8:
            raise ParameterError(f"translation ({dx}, {dy}) exceeds 8 px")
        values = np.empty((H, W, 2))
        values[..., 0] = dx
        values[..., 1] = dy
        return FlowField(values)
    if kind == "rotation_small":
        angle = float(params.get("angle", 0.0))
        if abs(angle) > 5:
            raise ParameterError(f"rotation {angle} deg exceeds 5 deg")
        return FlowField(_rotation_field(shape, angle))
    raise ParameterError(f"unknown synthetic flow kind {kind!r}")


def write_flow_file(path, flow) -> None:
    """Little-endian: b"JFLO", u32 H, u32 W, H*W*2 float32 (dx, dy interleaved)."""
    v = flow.values if isinstance(flow, FlowField) else np.asarray(flow)
    H, W = v.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", H, W))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_flow_file(path) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise ShapeError(f"{path}: not a JFLO flow file")
    H, W = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != H * W * 2 * 4:
        raise ShapeError(f"{path}: expected {H * W * 2 * 4} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(H, W, 2).astype(np.float64)
    return FlowField(values)
