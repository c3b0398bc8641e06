"""Synthetic degradations, analytic test clips, on-disk datasets and
training-batch sampling.

On-disk layout: ``root/<clip_name>/NNNNNN.png`` (8-bit, lexicographic order).
A split manifest is a JSON or YAML mapping ``split -> [clip names]``.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .flow import FlowProvider, estimate_flow
from .resize import imresize_hwc
from .types import FrameWindow, ParameterError, ShapeError, VideoClip, make_clip

DEGRADATIONS = ("awgn", "bicubic_x4", "none")


class IngestionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    """``sigma`` is on the 0-255 scale.  With ``blind`` set, every call draws
    its noise level uniformly from [0, sigma]."""

    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0
    blind: bool = False

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ConfigurationError(f"unsupported degradation {self.kind!r}")
        if not 0.0 <= self.sigma <= 50.0:
            raise ParameterError(f"sigma must lie in [0, 50], got {self.sigma}")

    @property
    def scale(self) -> int:
        return 4 if self.kind == "bicubic_x4" else 1

    def with_seed(self, seed: int) -> "DegradationSpec":
        return DegradationSpec(self.kind, self.sigma, seed, self.blind)


def degrade(clip: VideoClip, spec: DegradationSpec) -> VideoClip:
    if spec.kind not in DEGRADATIONS:
        raise ConfigurationError(f"unsupported degradation {spec.kind!r}")
    if spec.kind == "none":
        return clip
    if spec.kind == "bicubic_x4":
        H, W = clip.frames.shape[1:3]
        if H % 4 or W % 4:
            raise ParameterError(f"bicubic_x4 needs frame sizes divisible by 4, got {H}x{W}")
        small = np.stack([imresize_hwc(f, 0.25) for f in clip.frames])
        return VideoClip(np.clip(small, 0.0, 1.0), clip.frame_rate)
    rng = np.random.default_rng(spec.seed)
    sigma = rng.uniform(0.0, spec.sigma) if spec.blind else spec.sigma
    if sigma == 0.0:
        return clip
    noise = rng.standard_normal(clip.frames.shape) * (sigma / 255.0)
    return VideoClip(np.clip(clip.frames + noise, 0.0, 1.0), clip.frame_rate)


# ------------------------------------------------------------ synthetic clips


@dataclass(frozen=True)
class SinusoidTexture:
    """Analytic texture: per channel, 0.5 plus a sum of random plane waves,
    kept inside [0.05, 0.95].  Can be sampled at any real position."""

    freqs: np.ndarray  # (C, K, 2) cycles/pixel for (x, y)
    phases: np.ndarray  # (C, K)
    amps: np.ndarray  # (C, K)

    @classmethod
    def random(cls, channels: int = 3, waves: int = 12, min_period: float = 6.0, max_period: float = 40.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        period = np.exp(rng.uniform(np.log(min_period), np.log(max_period), (channels, waves)))
        theta = rng.uniform(0, 2 * np.pi, (channels, waves))
        freqs = np.stack([np.cos(theta), np.sin(theta)], axis=-1) / period[..., None]
        phases = rng.uniform(0, 2 * np.pi, (channels, waves))
        amps = rng.uniform(0.5, 1.0, (channels, waves))
        amps = 0.45 * amps / amps.sum(axis=1, keepdims=True)
        return cls(freqs, phases, amps)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Texture at positions ``(x, y)`` (same-shape arrays) -> (..., C)."""
        arg = 2 * np.pi * (x[..., None, None] * self.freqs[..., 0] + y[..., None, None] * self.freqs[..., 1]) + self.phases
        return 0.5 + np.sum(self.amps * np.sin(arg), axis=-1)


def _grid(H, W):
    return np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64), indexing="xy")


def synthetic_clip(
    T: int = 8,
    H: int = 64,
    W: int = 64,
    channels: int = 3,
    motion: Optional[dict] = None,
    seed: int = 0,
    texture: Optional[SinusoidTexture] = None,
) -> tuple[VideoClip, dict]:
    """Clip of an analytic texture under ``motion``; returns (clip, motion).

    ``translation``: content moves by (dx, dy) pixels per frame.
    ``rotation_small``: content turns by ``angle`` degrees per frame about the
    frame centre.  ``FlowProvider(kind="synthetic_oracle", motion=motion)``
    gives the exact backward flows of the result.
    """
    motion = motion or {"kind": "translation", "dx": 0.0, "dy": 0.0}
    tex = texture or SinusoidTexture.random(channels, seed=seed)
    x, y = _grid(H, W)
    frames = []
    for t in range(T):
        if motion["kind"] == "translation":
            sx, sy = x - t * motion["dx"], y - t * motion["dy"]
        elif motion["kind"] == "rotation_small":
            th = -math.radians(motion["angle"] * t)
            cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
            px, py = x - cx, y - cy
            sx = math.cos(th) * px - math.sin(th) * py + cx
            sy = math.sin(th) * px + math.cos(th) * py + cy
        else:
            raise ParameterError(f"unknown motion kind {motion['kind']!r}")
        frames.append(tex.sample(sx, sy))
    return VideoClip(np.clip(np.stack(frames), 0.0, 1.0)), motion


# ------------------------------------------------------------------- file io


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        a = np.asarray(im)
    if a.dtype != np.uint8:
        raise ShapeError(f"{path}: expected 8-bit pixels, got {a.dtype}")
    return a


def write_frame(path, frame: np.ndarray) -> None:
    a = np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path, format="PNG")


def frame_paths(clip_dir) -> list[Path]:
    return sorted(p for p in Path(clip_dir).iterdir() if p.suffix.lower() == ".png")


def read_clip_dir(clip_dir) -> tuple[VideoClip, list[str]]:
    paths = frame_paths(clip_dir)
    if not paths:
        raise IngestionError(f"{clip_dir}: no PNG frames")
    frames = [read_frame(p) for p in paths]
    try:
        clip = make_clip(frames, "eight_bit")
    except ShapeError as e:
        raise IngestionError(f"{clip_dir}: {e}") from e
    return clip, [p.name for p in paths]


def write_clip_dir(clip_dir, clip: VideoClip, names: Optional[list[str]] = None) -> list[Path]:
    out = Path(clip_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:06d}.png" for i in range(len(clip))]
    paths = []
    for name, f in zip(names, clip.frames):
        p = out / name
        write_frame(p, f)
        paths.append(p)
    return paths


# ------------------------------------------------------------------ datasets


class Dataset:
    """Immutable index of named clips.  Frames load lazily and are cached."""

    def __init__(self, loaders: dict[str, Callable[[], VideoClip]], counts: dict[str, int], lq: Optional["Dataset"] = None, root=None):
        if not loaders:
            raise IngestionError("dataset has no clips")
        self._loaders = dict(loaders)
        self._counts = dict(counts)
        self._cache: dict[str, VideoClip] = {}
        self.lq = lq
        self.root = root

    @classmethod
    def from_clips(cls, clips: dict[str, VideoClip], lq: Optional[dict[str, VideoClip]] = None) -> "Dataset":
        loaders = {k: (lambda c=c: c) for k, c in clips.items()}
        lq_ds = cls.from_clips(lq) if lq else None
        return cls(loaders, {k: len(c) for k, c in clips.items()}, lq_ds)

    @property
    def names(self) -> list[str]:
        return sorted(self._loaders)

    @property
    def num_clips(self) -> int:
        return len(self._loaders)

    @property
    def num_frames(self) -> int:
        return sum(self._counts.values())

    def frame_count(self, name: str) -> int:
        return self._counts[name]

    def clip(self, name: str) -> VideoClip:
        if name not in self._cache:
            self._cache[name] = self._loaders[name]()
        return self._cache[name]

    def __len__(self):
        return self.num_clips


def load_manifest(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if isinstance(data, list):
        data = {"all": data}
    if not isinstance(data, dict):
        raise IngestionError(f"{path}: manifest must map split names to clip lists")
    return data


def _index_clip(clip_dir: Path) -> int:
    paths = frame_paths(clip_dir)
    if not paths:
        raise IngestionError(f"clip {clip_dir.name!r}: no PNG frames")
    stems = [p.stem for p in paths]
    if all(s.isdigit() for s in stems):
        idx = [int(s) for s in stems]
        expected = list(range(idx[0], idx[0] + len(idx)))
        if idx != expected:
            missing = sorted(set(expected) - set(idx)) or sorted(set(range(idx[0], idx[-1] + 1)) - set(idx))
            raise IngestionError(f"clip {clip_dir.name!r}: missing frames {missing[:5]}")
    sizes = set()
    for p in paths:
        with Image.open(p) as im:
            sizes.add((im.size, "L" if im.mode == "L" else "RGB"))
    if len(sizes) != 1:
        raise IngestionError(f"clip {clip_dir.name!r}: inconsistent frame shapes {sorted(sizes)}")
    return len(paths)


def ingest_dataset(root, manifest=None, split: Optional[str] = None, lq_root=None) -> Dataset:
    """Index ``root/<clip>/NNNNNN.png``; ``manifest`` restricts the clips to
    ``split`` (or to every listed clip when no split is given)."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    clips = sorted(p for p in root.iterdir() if p.is_dir())
    if manifest is not None:
        m = manifest if isinstance(manifest, dict) else load_manifest(manifest)
        if split is not None:
            if split not in m:
                raise IngestionError(f"manifest has no split {split!r}")
            wanted = set(m[split])
        else:
            wanted = {c for names in m.values() for c in names}
        unknown = wanted - {c.name for c in clips}
        if unknown:
            raise IngestionError(f"manifest names missing clips {sorted(unknown)}")
        clips = [c for c in clips if c.name in wanted]
    if not clips:
        raise IngestionError(f"{root}: no clips")
    counts = {c.name: _index_clip(c) for c in clips}
    loaders = {c.name: (lambda c=c: read_clip_dir(c)[0]) for c in clips}
    lq = None
    if lq_root is not None:
        lq = ingest_dataset(lq_root, {"sel": list(counts)}, "sel")
        for name in counts:
            if lq.frame_count(name) != counts[name]:
                raise IngestionError(f"clip {name!r}: LQ and HQ frame counts differ")
    return Dataset(loaders, counts, lq, root)


def clip_seed(seed: int, name: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**32)


def materialize_degraded(dataset: Dataset, out_root, spec: DegradationSpec) -> Path:
    out_root = Path(out_root)
    for name in dataset.names:
        clip = degrade(dataset.clip(name), spec.with_seed(clip_seed(spec.seed, name)))
        write_clip_dir(out_root / name, clip)
    return out_root


# ------------------------------------------------------------------ sampling


@dataclass
class SampleBatch:
    """Training batch over a span of ``t_in + 2`` frames per sample, so that
    the reference and both of its neighbours can each be restored from a
    full window.

    lq / hq: (B, S, h, w, C) / (B, S, H, W, C); gt_flows: (B, 2, H, W, 2) for
    the centre frame towards (previous, next) on the HQ patch.
    ``origins``: (clip, first frame index, y, x) of every HQ patch.
    """

    lq: np.ndarray
    hq: np.ndarray
    gt_flows: np.ndarray
    times: np.ndarray
    origins: list
    t_in: int = 3

    @property
    def span(self) -> int:
        return self.lq.shape[1]

    def window_slice(self, offset: int = 0) -> slice:
        c = self.span // 2 + offset
        h = self.t_in // 2
        return slice(c - h, c + h + 1)

    @property
    def lq_windows(self) -> list[FrameWindow]:
        s = self.window_slice()
        return [FrameWindow(x[s], self.t_in // 2, int(t[self.span // 2])) for x, t in zip(self.lq, self.times)]

    @property
    def hq_windows(self) -> list[FrameWindow]:
        s = self.window_slice()
        return [FrameWindow(x[s], self.t_in // 2, int(t[self.span // 2])) for x, t in zip(self.hq, self.times)]


def pair_flow(provider: FlowProvider, frames: np.ndarray, full_shape, times, crop, i_ref: int, i_other: int) -> np.ndarray:
    """Flow between two frames of a cropped span.

    Pixel-based providers look at the crop; analytic/external ones are
    evaluated on the full frame and cropped so positions stay absolute.
    """
    y, x, h, w = crop
    if provider.kind in ("synthetic_oracle", "external"):
        H, W = full_shape
        dummy = np.zeros((H, W, 1))
        fl = estimate_flow(provider, dummy, dummy, ref_time=int(times[i_ref]), other_time=int(times[i_other]))
        return fl.values[y : y + h, x : x + w]
    return estimate_flow(provider, frames[i_ref], frames[i_other], ref_time=int(times[i_ref]), other_time=int(times[i_other])).values


def sample_batch(
    dataset: Dataset,
    batch_size: int,
    patch: int,
    rng_seed: int,
    degradation: DegradationSpec = DegradationSpec(),
    gt_provider: FlowProvider = FlowProvider(),
    t_in: int = 3,
    min_patch: int = 1,
) -> SampleBatch:
    if patch < min_patch:
        raise ParameterError(f"patch {patch} smaller than the network's minimum {min_patch}")
    if patch % degradation.scale:
        raise ParameterError(f"patch {patch} not divisible by the degradation scale {degradation.scale}")
    rng = np.random.default_rng(rng_seed)
    names = dataset.names
    span = t_in + 2
    half = span // 2
    lq, hq, flows, times, origins = [], [], [], [], []
    for _ in range(batch_size):
        name = names[int(rng.integers(len(names)))]
        clip = dataset.clip(name)
        T, H, W, _ = clip.frames.shape
        if patch > H or patch > W:
            raise ParameterError(f"patch {patch} larger than {H}x{W} frames of clip {name!r}")
        if T >= span:
            centre = int(rng.integers(half, T - half))
        else:
            centre = int(rng.integers(T))
        idx = np.clip(np.arange(centre - half, centre + half + 1), 0, T - 1)
        y = int(rng.integers(H - patch + 1))
        x = int(rng.integers(W - patch + 1))
        s = degradation.scale
        y, x = y - y % s, x - x % s
        hq_span = clip.frames[idx, y : y + patch, x : x + patch]
        noise_seed = int(rng.integers(2**32))
        if dataset.lq is not None:
            lq_clip = dataset.lq.clip(name).frames
            lq_span = lq_clip[idx, y // s : (y + patch) // s, x // s : (x + patch) // s]
        else:
            lq_span = degrade(VideoClip(hq_span), degradation.with_seed(noise_seed)).frames
        crop = (y, x, patch, patch)
        c = half
        f_prev = pair_flow(gt_provider, hq_span, (H, W), idx, crop, c, c - 1)
        f_next = pair_flow(gt_provider, hq_span, (H, W), idx, crop, c, c + 1)
        lq.append(lq_span)
        hq.append(hq_span)
        flows.append(np.stack([f_prev, f_next]))
        times.append(idx)
        origins.append((name, int(idx[0]), y, x))
    return SampleBatch(np.stack(lq), np.stack(hq), np.stack(flows), np.stack(times), origins, t_in)
