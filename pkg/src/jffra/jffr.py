"""Joint flow and feature refinement block.

One block corrects both neighbour flows from an L1 cost volume and a small
flow head, warps the neighbour features with the corrected flows, and refines
all three feature maps with windowed multi-head attention over their channel
concatenation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cost_volume import cost_volume_tensor
from .types import ParameterError, ShapeError
from .warp import warp_tensor


@dataclass
class AttentionMaps:
    """Per-window, per-head attention: (windows, heads, tokens, tokens)."""

    values: torch.Tensor

    def row_sums(self) -> torch.Tensor:
        return self.values.sum(dim=-1)

    def is_row_stochastic(self, tol: float = 1e-5) -> bool:
        v = self.values
        return bool((v >= 0).all()) and bool(((self.row_sums() - 1).abs() <= tol).all())


@dataclass
class LevelState:
    """Features (F_{t-1}, F_t, F_{t+1}) as N x C x H x W tensors plus both flows."""

    f_prev: torch.Tensor
    f_ref: torch.Tensor
    f_next: torch.Tensor
    flow_prev: torch.Tensor
    flow_next: torch.Tensor
    level: int = 0

    def __post_init__(self):
        shape = self.f_ref.shape
        if self.f_prev.shape != shape or self.f_next.shape != shape:
            raise ShapeError("the three feature maps must share a shape")
        for fl in (self.flow_prev, self.flow_next):
            if fl.shape[0] != shape[0] or fl.shape[1] != 2 or fl.shape[-2:] != shape[-2:]:
                raise ShapeError(f"flow {tuple(fl.shape)} does not match features {tuple(shape)}")

    @property
    def features(self):
        return self.f_prev, self.f_ref, self.f_next


class FlowHead(nn.Module):
    """Conv stack mapping (cost volume, F_t, F_other) to a 2-channel flow offset.

    The last layer starts at zero so an untrained head leaves flows untouched.
    """

    def __init__(self, feat_channels: int, radius: int = 4, hidden: int = 64, layers: int = 3):
        super().__init__()
        if layers < 2:
            raise ParameterError("flow head needs at least two layers")
        self.radius = radius
        self.feat_channels = feat_channels
        cost_channels = (2 * radius + 1) ** 2
        widths = [cost_channels + 2 * feat_channels] + [hidden] * (layers - 1) + [2]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(widths[:-1], widths[1:]))
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def forward(self, cost, f_ref, f_other):
        N, dh, dw, H, W = cost.shape
        if dh * dw != (2 * self.radius + 1) ** 2:
            raise ShapeError(f"cost volume with {dh}x{dw} offsets, head expects radius {self.radius}")
        if f_ref.shape[1] != self.feat_channels or f_other.shape[1] != self.feat_channels:
            raise ShapeError(f"head expects {self.feat_channels} feature channels, got {f_ref.shape[1]}")
        cost = cost.reshape(N, dh * dw, H, W)
        # raw L1 sums grow with the channel count, so each sample's costs are
        # standardised as a whole (per-pixel statistics would blow up flat regions)
        mu = cost.mean(dim=(1, 2, 3), keepdim=True)
        sd = (cost - mu).pow(2).mean(dim=(1, 2, 3), keepdim=True).add(1e-6).sqrt()
        x = torch.cat([(cost - mu) / sd, f_ref, f_other], dim=1)
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.1)
        return self.convs[-1](x)


def _partition(x: torch.Tensor, ws: int):
    N, D, H, W = x.shape
    nh, nw = H // ws, W // ws
    x = x.view(N, D, nh, ws, nw, ws).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(N * nh * nw, ws * ws, D)


def _merge(t: torch.Tensor, N: int, H: int, W: int, ws: int):
    D = t.shape[-1]
    nh, nw = H // ws, W // ws
    t = t.view(N, nh, nw, ws, ws, D).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(N, D, H, W)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping ws x ws tiles.

    Tokens are pixels, features are channels.  Inputs are zero-padded up to a
    multiple of the window and padded tokens are masked out as keys.
    """

    def __init__(self, dim: int, heads: int = 4, window_size: int = 8):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"{dim} channels cannot be split into {heads} heads")
        self.dim, self.heads, self.window_size = dim, heads, window_size
        self.proj_q = nn.Linear(dim, dim, bias=False)
        self.proj_k = nn.Linear(dim, dim, bias=False)
        self.proj_v = nn.Linear(dim, dim, bias=False)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        N, D, H, W = x.shape
        if D != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {D}")
        ws = self.window_size
        ph, pw = (-H) % ws, (-W) % ws
        xp = F.pad(x, (0, pw, 0, ph))
        Hp, Wp = H + ph, W + pw
        tokens = _partition(xp, ws)
        B, L, _ = tokens.shape
        hd = D // self.heads

        def split(t):
            return t.view(B, L, self.heads, hd).transpose(1, 2)

        q = split(self.proj_q(tokens))
        k = split(self.proj_k(tokens))
        v = split(self.proj_v(tokens))
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if ph or pw:
            valid = torch.zeros(1, 1, Hp, Wp, dtype=x.dtype, device=x.device)
            valid[..., :H, :W] = 1
            key_ok = _partition(valid.expand(N, 1, Hp, Wp), ws)[..., 0] > 0
            logits = logits.masked_fill(~key_ok[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        out = self.out_proj(out)
        y = _merge(out, N, Hp, Wp, ws)[..., :H, :W]
        return y, AttentionMaps(attn)


def flow_head(cost, f_ref, f_other, head: FlowHead):
    return head(cost, f_ref, f_other)


def refine_flow(flow: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    if flow.shape != offset.shape:
        raise ShapeError(f"flow {tuple(flow.shape)} and offset {tuple(offset.shape)} disagree")
    return flow + offset


def attention_refine(f_prev_upd, f_ref, f_next_upd, attention: WindowAttention):
    """Residuals (R_{t-1}, R_t, R_{t+1}) and the attention maps.

    Channels are concatenated as [F_t, F_{t-1}, F_{t+1}] and the attention
    output is split back in the same order.
    """
    if not (f_prev_upd.shape == f_ref.shape == f_next_upd.shape):
        raise ShapeError("the three feature maps must share a shape")
    C = f_ref.shape[1]
    y, maps = attention(torch.cat([f_ref, f_prev_upd, f_next_upd], dim=1))
    r_ref, r_prev, r_next = y[:, :C], y[:, C : 2 * C], y[:, 2 * C :]
    return r_prev, r_ref, r_next, maps


class JFFRBlock(nn.Module):
    def __init__(
        self,
        channels: int,
        heads: int = 4,
        window_size: int = 8,
        radius: int = 4,
        flow_hidden: int = 64,
        refine_flow: bool = True,
        residual_target: str = "original",
    ):
        super().__init__()
        if residual_target not in ("original", "warped"):
            raise ParameterError(f"residual_target must be 'original' or 'warped', got {residual_target!r}")
        self.channels = channels
        self.radius = radius
        self.refine_flow = refine_flow
        self.residual_target = residual_target
        self.flow_head = FlowHead(channels, radius, flow_hidden)
        self.attention = WindowAttention(3 * channels, heads, window_size)

    def correct_flow(self, f_ref, f_other, flow):
        if not self.refine_flow:
            return flow
        projected = warp_tensor(f_other, flow)
        cost = cost_volume_tensor(f_ref, projected, self.radius)
        return refine_flow(flow, flow_head(cost, f_ref, f_other, self.flow_head))

    def forward(self, state: LevelState):
        new_state, _ = self.forward_with_maps(state)
        return new_state

    def forward_with_maps(self, state: LevelState):
        f_prev, f_ref, f_next = state.features
        flow_prev = self.correct_flow(f_ref, f_prev, state.flow_prev)
        flow_next = self.correct_flow(f_ref, f_next, state.flow_next)

        upd_prev = warp_tensor(f_prev, flow_prev)
        upd_next = warp_tensor(f_next, flow_next)
        r_prev, r_ref, r_next, maps = attention_refine(upd_prev, f_ref, upd_next, self.attention)

        if self.residual_target == "warped":
            base_prev, base_next = upd_prev, upd_next
        else:
            base_prev, base_next = f_prev, f_next
        out = LevelState(base_prev + r_prev, f_ref + r_ref, base_next + r_next, flow_prev, flow_next, state.level)
        return out, maps


def jffr_forward(state: LevelState, block: JFFRBlock) -> LevelState:
    return block(state)
