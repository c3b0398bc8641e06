"""Separable bicubic resampling (a = -0.5) with antialiased downscaling.

Weights follow the usual imresize construction: output pixel centres are
mapped back into the input, the cubic kernel is stretched by 1/scale when
shrinking, taps beyond the border are mirrored and every row is normalised.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with rows summing to one."""
    scale = n_out / n_in
    stretch = scale if (antialias and scale < 1) else 1.0
    width = 4.0 / stretch
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centres - width / 2).astype(np.int64)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = stretch * cubic(stretch * (centres[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), _mirror(idx, n_in).ravel()), w.ravel())
    m.setflags(write=False)
    return m


def imresize(x, scale: float | None = None, size: tuple[int, int] | None = None, antialias: bool = True):
    """Resize the last two axes of a tensor/array (..., H, W)."""
    H, W = x.shape[-2:]
    if size is None:
        if scale is None:
            raise ValueError("give scale or size")
        size = (int(round(H * scale)), int(round(W * scale)))
    mh = resize_matrix(H, size[0], antialias)
    mw = resize_matrix(W, size[1], antialias)
    if isinstance(x, torch.Tensor):
        mh_t = torch.tensor(mh, dtype=x.dtype, device=x.device)
        mw_t = torch.tensor(mw, dtype=x.dtype, device=x.device)
        return torch.einsum("oh,...hw,pw->...op", mh_t, x, mw_t)
    return np.einsum("oh,...hw,pw->...op", mh, np.asarray(x, dtype=np.float64), mw)


def imresize_hwc(frame: np.ndarray, scale: float) -> np.ndarray:
    """Resize an H x W x C frame."""
    return np.moveaxis(imresize(np.moveaxis(frame, -1, 0), scale), 0, -1)
