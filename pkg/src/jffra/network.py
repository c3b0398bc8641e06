"""Full restoration network: 3D-conv temporal context, a multi-level
encoder/decoder of JFFR blocks threading features and flows, and a task head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .jffr import JFFRBlock, LevelState
from .resize import imresize
from .types import FlowField, FrameWindow, ShapeError
from .warp import scale_flow

TASKS = ("denoise", "sr_x4", "deblur")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 3
    base_channels: int = 32
    t_in: int = 3
    window_size: int = 8
    task: str = "denoise"
    residual_output: bool = True
    in_channels: int = 3
    heads: int = 4
    radius: int = 4
    flow_hidden: int = 64
    refine_flow: bool = True
    residual_target: str = "original"

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be >= 1")
        if self.t_in != 3:
            # JFFR blocks pair the reference with exactly one previous and one next frame
            raise ConfigError(f"only t_in = 3 is supported, got {self.t_in}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")

    @property
    def scale(self) -> int:
        return 4 if self.task == "sr_x4" else 1

    @property
    def pad_multiple(self) -> int:
        return self.window_size * 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class JFFRANet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c0, cin = cfg.base_channels, cfg.in_channels
        self.context = nn.ModuleList([nn.Conv3d(cin, c0, 3, padding=1), nn.Conv3d(c0, c0, 3, padding=1)])

        def block(level):
            return JFFRBlock(
                cfg.channels(level),
                heads=cfg.heads,
                window_size=cfg.window_size,
                radius=cfg.radius,
                flow_hidden=cfg.flow_hidden,
                refine_flow=cfg.refine_flow,
                residual_target=cfg.residual_target,
            )

        L = cfg.levels
        self.encoder = nn.ModuleList(block(i) for i in range(L))
        self.down = nn.ModuleList(nn.Conv2d(cfg.channels(i), cfg.channels(i + 1), 3, stride=2, padding=1) for i in range(L - 1))
        self.up = nn.ModuleList(nn.Conv2d(cfg.channels(i + 1), 4 * cfg.channels(i), 3, padding=1) for i in range(L - 1))
        self.decoder = nn.ModuleList(block(i) for i in range(L - 1))

        if cfg.task == "sr_x4":
            self.head = nn.ModuleList(
                [nn.Conv2d(c0, 4 * c0, 3, padding=1), nn.Conv2d(c0, 4 * c0, 3, padding=1), nn.Conv2d(c0, cin, 3, padding=1)]
            )
        else:
            self.head = nn.ModuleList([nn.Conv2d(c0, cin, 3, padding=1)])

    # -- stages -----------------------------------------------------------

    def temporal_context(self, frames: torch.Tensor):
        """N x T x C x H x W frames -> three N x C' x H x W feature maps."""
        if frames.dim() != 5 or frames.shape[1] != self.cfg.t_in or frames.shape[2] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.t_in} x {self.cfg.in_channels} x H x W, got {tuple(frames.shape)}")
        x = frames.transpose(1, 2)
        x = F.leaky_relu(self.context[0](x), 0.1)
        x = self.context[1](x)
        return tuple(x[:, :, k] for k in range(self.cfg.t_in))

    def encode_decode(self, features, flow_prev, flow_next):
        """Returns the reference features at level 0 and every block's flows."""
        state = LevelState(*features, flow_prev, flow_next, level=0)
        flows = []
        skips = []
        L = self.cfg.levels
        for i, blk in enumerate(self.encoder):
            state = blk(state)
            flows.append((i, state.flow_prev, state.flow_next))
            if i < L - 1:
                skips.append(state)
                down = self.down[i]
                state = LevelState(
                    down(state.f_prev),
                    down(state.f_ref),
                    down(state.f_next),
                    scale_flow(state.flow_prev, 0.5),
                    scale_flow(state.flow_next, 0.5),
                    level=i + 1,
                )
        for i in reversed(range(L - 1)):
            skip = skips[i]
            up = self.up[i]

            def lift(f, s):
                return F.pixel_shuffle(up(f), 2) + s

            state = LevelState(
                lift(state.f_prev, skip.f_prev),
                lift(state.f_ref, skip.f_ref),
                lift(state.f_next, skip.f_next),
                scale_flow(state.flow_prev, 2.0),
                scale_flow(state.flow_next, 2.0),
                level=i,
            )
            state = self.decoder[i](state)
            flows.append((i, state.flow_prev, state.flow_next))
        return state.f_ref, flows

    def anchor(self, reference: torch.Tensor):
        """What the head's output is added to: the bicubic x4 reference for
        super-resolution, the reference itself for residual outputs."""
        if self.cfg.task == "sr_x4":
            return imresize(reference, 4.0)
        return reference if self.cfg.residual_output else torch.zeros_like(reference)

    def residual(self, features: torch.Tensor):
        if self.cfg.task == "sr_x4":
            x = features
            for conv in self.head[:2]:
                x = F.leaky_relu(F.pixel_shuffle(conv(x), 2), 0.1)
            return self.head[2](x)
        return self.head[0](features)

    def reconstruct(self, features: torch.Tensor, reference: torch.Tensor, clamp: bool = True):
        out = self.residual(features) + self.anchor(reference)
        return out.clamp(0.0, 1.0) if clamp else out

    # -- full pass ----------------------------------------------------------

    def forward(self, frames, flow_prev, flow_next, clamp: bool = True):
        out, _ = self.forward_detailed(frames, flow_prev, flow_next, clamp)
        return out

    def forward_detailed(self, frames, flow_prev, flow_next, clamp: bool = True):
        """frames: N x T x C x H x W, flows: N x 2 x H x W on the input grid."""
        N, T, C, H, W = frames.shape
        if flow_prev.shape != (N, 2, H, W) or flow_next.shape != (N, 2, H, W):
            raise ShapeError("flows must be N x 2 x H x W on the input grid")
        m = self.cfg.pad_multiple
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            mode = "reflect" if (ph < H and pw < W) else "replicate"
            flat = F.pad(frames.reshape(N, T * C, H, W), (0, pw, 0, ph), mode=mode)
            padded = flat.view(N, T, C, H + ph, W + pw)
            flow_prev = F.pad(flow_prev, (0, pw, 0, ph), mode="replicate")
            flow_next = F.pad(flow_next, (0, pw, 0, ph), mode="replicate")
        else:
            padded = frames
        features = self.temporal_context(padded)
        f_ref, flows = self.encode_decode(features, flow_prev, flow_next)
        s = self.cfg.scale
        # the anchor comes from the unpadded reference so borders match it exactly
        out = self.residual(f_ref)[..., : H * s, : W * s] + self.anchor(frames[:, self.cfg.t_in // 2])
        if clamp:
            out = out.clamp(0.0, 1.0)
        flows = [(lv, fp[..., : -(-H // 2**lv), : -(-W // 2**lv)], fn[..., : -(-H // 2**lv), : -(-W // 2**lv)]) for lv, fp, fn in flows]
        return out, flows


def build_network(cfg: NetworkConfig, seed: int = 0) -> JFFRANet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = JFFRANet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def zero_head(net: JFFRANet) -> JFFRANet:
    """Zero the last reconstruction conv so the net reproduces its anchor."""
    with torch.no_grad():
        net.head[-1].weight.zero_()
        net.head[-1].bias.zero_()
    return net


# -- numpy-facing helpers ---------------------------------------------------


def window_to_tensor(window: FrameWindow, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.array(window.frames), dtype=dtype).permute(0, 3, 1, 2)[None]


def flow_to_tensor(flow, dtype=torch.float32) -> torch.Tensor:
    v = flow.values if isinstance(flow, FlowField) else np.asarray(flow)
    return torch.as_tensor(np.array(v), dtype=dtype).permute(2, 0, 1)[None]


def temporal_context(window: FrameWindow, net: JFFRANet):
    return net.temporal_context(window_to_tensor(window, next(net.parameters()).dtype))


def encode_decode(features, flow_prev, flow_next, net: JFFRANet):
    f_ref, _ = net.encode_decode(features, flow_prev, flow_next)
    return f_ref


def reconstruct(features, reference_frame, net: JFFRANet, clamp: bool = True):
    return net.reconstruct(features, reference_frame, clamp)


@torch.no_grad()
def forward(window: FrameWindow, flow_prev, flow_next, net: JFFRANet) -> np.ndarray:
    """Restore the reference frame of ``window``; returns H' x W' x C."""
    dtype = next(net.parameters()).dtype
    out = net(window_to_tensor(window, dtype), flow_to_tensor(flow_prev, dtype), flow_to_tensor(flow_next, dtype))
    return out[0].permute(1, 2, 0).double().numpy()
