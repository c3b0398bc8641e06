"""Value types shared across the pipeline and sliding-window extraction.

Frames are stored as numpy arrays in T x H x W x C layout with values in
[0, 1].  Network code converts to torch N x C x H x W at its boundary.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    pass


class RangeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray
    frame_rate: Optional[float] = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4:
            raise ShapeError(f"clip must be T x H x W x C, got shape {f.shape}")
        T, H, W, C = f.shape
        if T < 1 or H < 1 or W < 1 or C not in (1, 3):
            raise ShapeError(f"invalid clip shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise RangeError("clip contains non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise RangeError(f"clip values outside [0, 1]: [{f.min()}, {f.max()}]")
        object.__setattr__(self, "frames", _readonly(f))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.frames * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class FrameWindow:
    frames: np.ndarray
    reference_index: int
    source_time: int

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[0] % 2 == 0:
            raise ShapeError(f"window must hold an odd number of frames, got {f.shape}")
        if self.reference_index != (f.shape[0] - 1) // 2:
            raise ParameterError("reference_index must be the centre of the window")
        object.__setattr__(self, "frames", _readonly(f))

    @property
    def reference(self) -> np.ndarray:
        return self.frames[self.reference_index]


@dataclass(frozen=True)
class FlowField:
    """Backward flow on the reference grid: ``values[h, w] = (dx, dy)`` points
    from reference pixel (w, h) into the source frame."""

    values: np.ndarray
    from_time: int = 0
    to_time: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ShapeError(f"flow must be H x W x 2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise RangeError("flow contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self):
        return self.values.shape[:2]


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray
    level: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"feature map must be H x W x C, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise RangeError("feature map contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))


@dataclass(frozen=True)
class OcclusionMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"mask must be H x W, got {v.shape}")
        if not (np.all(v > 0.0) and np.all(v <= 1.0)):
            raise RangeError("mask entries must lie in (0, 1]")
        object.__setattr__(self, "values", _readonly(v))


def make_clip(frames, value_range: str = "unit", frame_rate: Optional[float] = None) -> VideoClip:
    """Build a clip from a frame stack (array or sequence of H x W [x C] frames).

    ``value_range="eight_bit"`` expects integers in [0, 255] and rescales them.
    """
    if value_range not in ("unit", "eight_bit"):
        raise ParameterError(f"unknown value_range {value_range!r}")
    if isinstance(frames, np.ndarray):
        stack = frames
    else:
        frames = list(frames)
        if not frames:
            raise ShapeError("empty frame stack")
        shapes = {np.shape(f) for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"non-uniform frame shapes: {sorted(shapes)}")
        stack = np.stack([np.asarray(f) for f in frames])
    if stack.size == 0 or stack.shape[0] == 0:
        raise ShapeError("empty frame stack")
    if stack.ndim == 3:
        stack = stack[..., None]

    if value_range == "eight_bit":
        if np.issubdtype(stack.dtype, np.floating) and not np.all(stack == np.round(stack)):
            raise RangeError("eight_bit frames must be integer valued")
        if stack.min() < 0 or stack.max() > 255:
            raise RangeError("eight_bit values outside [0, 255]")
        stack = stack.astype(np.float64) / 255.0
    return VideoClip(stack, frame_rate)


def extract_windows(clip: VideoClip, t_in: int = 3, stride: int = 1) -> list[FrameWindow]:
    """Windows of ``t_in`` frames centred on every ``stride``-th frame.

    Frames beyond the clip ends are filled by repeating the first/last frame.
    """
    if t_in < 1 or t_in % 2 == 0:
        raise ParameterError(f"t_in must be odd and positive, got {t_in}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    T = len(clip)
    half = (t_in - 1) // 2
    windows = []
    for t in range(0, T, stride):
        idx = np.clip(np.arange(t - half, t + half + 1), 0, T - 1)
        windows.append(FrameWindow(clip.frames[idx], half, t))
    return windows
