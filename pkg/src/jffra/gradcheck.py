"""Central finite-difference checks of autograd gradients on sampled coordinates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    rtol: float

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.rel_error < self.rtol))

    @property
    def samples(self) -> int:
        return int(self.rel_error.size)

    def __str__(self):
        return (
            f"{self.samples} coords, {100 * self.pass_fraction:.1f}% below rtol {self.rtol:g}, "
            f"median rel err {np.median(self.rel_error):.2e}"
        )


def relative_error(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` caps the error of
    coordinates whose true gradient is at round-off level."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    samples: int = 200,
    step: float = 1e-4,
    rtol: float = 1e-4,
    floor: float = 1e-8,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients of the scalar ``fn()`` with central
    differences at ``samples`` coordinates drawn uniformly from ``tensors``.

    Tensors must be leaf double tensors with ``requires_grad``; they are
    perturbed in place and restored.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != torch.float64:
            raise TypeError("finite-difference checks need float64 tensors")
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    sizes = np.array([t.numel() for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(samples, int(offsets[-1])), replace=False)

    analytic, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            t, idx = tensors[k], int(flat - offsets[k])
            view = t.view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            fp = fn().item()
            view[idx] = orig - step
            fm = fn().item()
            view[idx] = orig
            numeric.append((fp - fm) / (2 * step))
            analytic.append(grads[k].reshape(-1)[idx].item())
    a, n = np.array(analytic), np.array(numeric)
    return GradCheckResult(a, n, relative_error(a, n, floor), rtol)
