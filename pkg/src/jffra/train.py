"""Training loop, checkpoints, evaluation and restoration runners."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (
    Dataset,
    DegradationSpec,
    IngestionError,
    SampleBatch,
    clip_seed,
    degrade,
    ingest_dataset,
    pair_flow,
    sample_batch,
    write_frame,
)
from .flow import FlowProvider, estimate_flow
from .losses import LossWeights, total_loss
from .metrics import MetricReport, frame_metrics, opw
from .network import ConfigError, JFFRANet, NetworkConfig, build_network
from .types import VideoClip, extract_windows

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "jffra-checkpoint-1"


class NumericalError(RuntimeError):
    pass


def deterministic_requested(cfg_flag: bool = False) -> bool:
    return cfg_flag or os.environ.get("JFFRA_DETERMINISTIC", "0") == "1"


def set_deterministic(on: bool) -> None:
    torch.use_deterministic_algorithms(on)
    if on:
        torch.set_num_threads(1)


# ----------------------------------------------------------------- configs


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    schedule: str = "step"
    milestones: int = 4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if self.schedule != "step":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError("need 0 < lr_final <= lr_init")
        if self.milestones < 1:
            raise ConfigError("milestones must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig = NetworkConfig()
    loss: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    iterations: int = 2000
    batch_size: int = 2
    patch: int = 64
    seed: int = 0
    train_data: Optional[str] = None
    train_manifest: Optional[str] = None
    train_split: Optional[str] = None
    lq_data: Optional[str] = None
    degradation: DegradationSpec = DegradationSpec("awgn", 25.0)
    flow_provider: FlowProvider = FlowProvider()
    gt_flow_provider: FlowProvider = FlowProvider()
    checkpoint_every: int = 500
    checkpoint_dir: str = "checkpoints"
    log_path: Optional[str] = None
    deterministic: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1")
        if self.network.scale != self.degradation.scale:
            raise ConfigError(f"task {self.network.task!r} does not match degradation {self.degradation.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict, profile: str = "desk") -> "TrainConfig":
        base = PROFILES[profile].to_dict()
        _merge(base, d)
        nested = {
            "network": NetworkConfig,
            "loss": LossWeights,
            "optimizer": OptimizerConfig,
            "degradation": DegradationSpec,
            "flow_provider": FlowProvider,
            "gt_flow_provider": FlowProvider,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(base) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for k, v in base.items():
            if k in nested:
                try:
                    kwargs[k] = nested[k](**v)
                except TypeError as e:
                    raise ConfigError(f"bad {k!r} section: {e}") from e
            else:
                kwargs[k] = v
        return cls(**kwargs)


def _merge(base: dict, over: dict) -> None:
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


PROFILES = {
    "desk": TrainConfig(
        network=NetworkConfig(levels=2, base_channels=16),
        iterations=2000,
        batch_size=2,
        patch=64,
    ),
    "paper": TrainConfig(
        network=NetworkConfig(levels=3, base_channels=32),
        iterations=700_000,
        batch_size=48,
        patch=128,
        checkpoint_every=10_000,
    ),
}


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    profile = d.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    return TrainConfig.from_dict(d, profile)


# ---------------------------------------------------------------- schedule


def milestone_iterations(iterations: int, milestones: int) -> list[int]:
    """Iterations (1-based) at which the step schedule drops the rate."""
    return [max(2, 1 + round(j * iterations / (milestones + 1))) for j in range(1, milestones + 1)]


def learning_rate(it: int, cfg: OptimizerConfig, iterations: int) -> float:
    stones = milestone_iterations(iterations, cfg.milestones)
    k = sum(it >= s for s in stones)
    if k == cfg.milestones:
        return cfg.lr_final
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** (k / cfg.milestones)


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: JFFRANet, cfg: Optional[TrainConfig] = None, optimizer=None, iteration: int = 0, records=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "network_config": json.dumps(net.cfg.to_dict(), indent=2, sort_keys=True),
        "train_config": json.dumps(cfg.to_dict(), indent=2, sort_keys=True) if cfg else None,
        "params": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": iteration,
        "seed": cfg.seed if cfg else None,
        "records": [asdict(r) for r in records or []],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    net: JFFRANet
    train_config: Optional[TrainConfig]
    optimizer_state: Optional[dict]
    iteration: int
    seed: Optional[int]
    records: list


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    net_cfg = NetworkConfig.from_dict(json.loads(payload["network_config"]))
    net = JFFRANet(net_cfg)
    params = payload["params"]
    dtype = next(iter(params.values())).dtype
    net.to(dtype)
    net.load_state_dict(params)
    tc = payload.get("train_config")
    train_cfg = TrainConfig.from_dict(json.loads(tc)) if tc else None
    records = [RunRecord(**r) for r in payload.get("records", [])]
    return Checkpoint(net, train_cfg, payload.get("optimizer"), payload.get("iteration", 0), payload.get("seed"), records)


# ------------------------------------------------------------------ training


@dataclass
class RunRecord:
    iteration: int
    loss: float
    l1: float
    temporal_prev: Optional[float]
    temporal_next: Optional[float]
    lr: float
    wall_time: float

    def key(self) -> tuple:
        """Everything but the wall clock; equal under deterministic reruns."""
        return (self.iteration, self.loss, self.l1, self.temporal_prev, self.temporal_next, self.lr)


@dataclass
class TrainResult:
    checkpoint: Path
    records: list
    net: JFFRANet


def _batch_seed(seed: int, it: int) -> int:
    return (seed * 7_919_993 + it * 104_729) % (2**32)


def _nchw(x: np.ndarray, dtype) -> torch.Tensor:
    # (..., H, W, C) -> (..., C, H, W)
    return torch.as_tensor(np.moveaxis(x, -1, -3).copy(), dtype=dtype)


def initial_flows(batch: SampleBatch, provider: FlowProvider, offsets, full_lq_shapes):
    """LQ flows (prev, next) for the windows centred ``offsets`` frames from
    the span centre; each a (B * len(offsets), 2, h, w) array pair."""
    h, w = batch.lq.shape[2:4]
    fp, fn = [], []
    for k in offsets:
        c = batch.span // 2 + k
        for b in range(batch.lq.shape[0]):
            name, _, y, x = batch.origins[b]
            s = batch.hq.shape[2] // h
            crop = (y // s, x // s, h, w)
            frames = batch.lq[b]
            fp.append(pair_flow(provider, frames, full_lq_shapes[b], batch.times[b], crop, c, c - 1))
            fn.append(pair_flow(provider, frames, full_lq_shapes[b], batch.times[b], crop, c, c + 1))
    return np.stack(fp), np.stack(fn)


def _flows_nchw(a: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(np.moveaxis(a, -1, 1).copy(), dtype=dtype)


def training_step_loss(net: JFFRANet, batch: SampleBatch, cfg: TrainConfig, dataset: Dataset):
    """Forward the batch and return (total loss, component dict)."""
    dtype = next(net.parameters()).dtype
    B = batch.lq.shape[0]
    temporal = cfg.loss.w1 > 0 or cfg.loss.w2 > 0
    offsets = (-1, 0, 1) if temporal else (0,)
    s = cfg.network.scale
    full = []
    for name, *_ in batch.origins:
        H, W = dataset.clip(name).frames.shape[1:3]
        full.append((H // s, W // s))
    fp, fn = initial_flows(batch, cfg.flow_provider, offsets, full)
    frames = []
    for k in offsets:
        frames.append(batch.lq[:, batch.window_slice(k)])
    frames = _nchw(np.concatenate(frames), dtype)
    out = net(frames, _flows_nchw(fp, dtype), _flows_nchw(fn, dtype), clamp=False)

    c = batch.span // 2
    hq = _nchw(batch.hq, dtype)
    gt_t = hq[:, c]
    if not temporal:
        l1 = (gt_t - out).abs().mean()
        return l1, {"l1": l1, "temporal_prev": None, "temporal_next": None}
    rest_prev, rest_t, rest_next = out[:B], out[B : 2 * B], out[2 * B :]
    gflows = _flows_nchw(batch.gt_flows.reshape(-1, *batch.gt_flows.shape[2:]), dtype).view(B, 2, 2, *batch.gt_flows.shape[2:4])
    return total_loss(rest_t, gt_t, rest_prev, rest_next, hq[:, c - 1], hq[:, c + 1], (gflows[:, 0], gflows[:, 1]), cfg.loss)


def _as_float(v):
    return None if v is None else v.item()


def resolve_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.train_data is None:
        raise ConfigError("train_data is not set")
    return ingest_dataset(cfg.train_data, cfg.train_manifest, cfg.train_split, cfg.lq_data)


def train(
    cfg: TrainConfig,
    dataset: Optional[Dataset] = None,
    resume=None,
    out_dir=None,
    progress: bool = False,
    until: Optional[int] = None,
) -> TrainResult:
    """Run the optimisation loop; returns the final checkpoint and the log.

    ``until`` stops early (with a checkpoint) while keeping the schedule of
    the full run, so a later ``resume`` continues it exactly.
    """
    dataset = dataset if dataset is not None else resolve_dataset(cfg)
    deterministic = deterministic_requested(cfg.deterministic)
    if deterministic:
        set_deterministic(True)
    ckpt_dir = Path(out_dir or cfg.checkpoint_dir)

    if resume is not None:
        ck = load_checkpoint(resume)
        net, start, records = ck.net, ck.iteration, list(ck.records)
    else:
        net, start, records = build_network(cfg.network, cfg.seed), 0, []
    oc = cfg.optimizer
    opt = torch.optim.Adam(net.parameters(), lr=oc.lr_init, betas=oc.betas, eps=oc.eps)
    if resume is not None and ck.optimizer_state is not None:
        opt.load_state_dict(ck.optimizer_state)
    net.train()

    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    t0 = time.perf_counter()
    last = None
    try:
        stop = cfg.iterations if until is None else min(until, cfg.iterations)
        for it in range(start + 1, stop + 1):
            lr = learning_rate(it, oc, cfg.iterations)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = sample_batch(
                dataset,
                cfg.batch_size,
                cfg.patch,
                _batch_seed(cfg.seed, it),
                cfg.degradation,
                cfg.gt_flow_provider,
                cfg.network.t_in,
                cfg.network.pad_multiple * cfg.network.scale,
            )
            opt.zero_grad(set_to_none=True)
            loss, parts = training_step_loss(net, batch, cfg, dataset)
            if not torch.isfinite(loss):
                diag = save_checkpoint(ckpt_dir / f"diagnostic_{it:07d}.pt", net, cfg, opt, it - 1, records)
                raise NumericalError(f"non-finite loss at iteration {it}; state saved to {diag}")
            loss.backward()
            opt.step()
            rec = RunRecord(
                it,
                loss.item(),
                parts["l1"].item(),
                _as_float(parts["temporal_prev"]),
                _as_float(parts["temporal_next"]),
                lr,
                time.perf_counter() - t0,
            )
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(asdict(rec)) + "\n")
            if progress and (it % 50 == 0 or it == 1):
                log.info("iter %d loss %.5f lr %.2e", it, rec.loss, lr)
            if it % cfg.checkpoint_every == 0 or it == stop:
                last = save_checkpoint(ckpt_dir / f"ckpt_{it:07d}.pt", net, cfg, opt, it, records)
    finally:
        if log_fh:
            log_fh.close()
    if last is None:
        done = records[-1].iteration if records else start
        last = save_checkpoint(ckpt_dir / f"ckpt_{done:07d}.pt", net, cfg, opt, done, records)
    return TrainResult(last, records, net)


def parameter_checksum(net: torch.nn.Module) -> float:
    return float(sum(p.detach().double().abs().sum() for p in net.parameters()))


# ------------------------------------------------------------ restoration


@torch.no_grad()
def restore_clip(net: JFFRANet, lq: VideoClip, provider: FlowProvider = FlowProvider(), batch: int = 4) -> VideoClip:
    """Restore every frame of ``lq`` from stride-1, edge-replicated windows."""
    net.eval()
    dtype = next(net.parameters()).dtype
    T = len(lq)
    windows = extract_windows(lq, net.cfg.t_in, 1)
    outs = []
    for i in range(0, T, batch):
        chunk = windows[i : i + batch]
        fr, fp, fn = [], [], []
        for w in chunk:
            t = w.source_time
            times = np.clip(np.arange(t - 1, t + 2), 0, T - 1)
            fr.append(w.frames)
            fp.append(estimate_flow(provider, w.frames[1], w.frames[0], ref_time=int(times[1]), other_time=int(times[0])).values)
            fn.append(estimate_flow(provider, w.frames[1], w.frames[2], ref_time=int(times[1]), other_time=int(times[2])).values)
        frames = np.stack(fr)
        out = net(_nchw(frames, dtype), _flows_nchw(np.stack(fp), dtype), _flows_nchw(np.stack(fn), dtype), clamp=False)
        # move the anchor back to double precision so a zero residual
        # reproduces it exactly
        ref_lo = _nchw(frames[:, net.cfg.t_in // 2], dtype)
        ref_hi = _nchw(frames[:, net.cfg.t_in // 2], torch.float64)
        out = (out - net.anchor(ref_lo)).double() + net.anchor(ref_hi)
        outs.append(out.permute(0, 2, 3, 1).numpy())
    return VideoClip(np.clip(np.concatenate(outs), 0.0, 1.0))


def check_task(net_cfg: NetworkConfig, degradation: DegradationSpec) -> None:
    ok = {"denoise": ("awgn", "none"), "deblur": ("none",), "sr_x4": ("bicubic_x4",)}[net_cfg.task]
    if degradation.kind not in ok:
        raise ConfigError(f"task {net_cfg.task!r} cannot be evaluated under degradation {degradation.kind!r}")


def evaluate(
    checkpoint,
    dataset: Dataset,
    degradation: DegradationSpec,
    provider: FlowProvider = FlowProvider(),
    gt_provider: Optional[FlowProvider] = None,
    alpha: float = 0.2,
    metadata: Optional[dict] = None,
) -> MetricReport:
    """PSNR/SSIM per frame and OPW per clip; ``checkpoint`` is a path or a net."""
    if isinstance(checkpoint, JFFRANet):
        net, ck_id = checkpoint, None
    else:
        net, ck_id = load_checkpoint(checkpoint).net, str(checkpoint)
    check_task(net.cfg, degradation)
    gt_provider = gt_provider or provider
    report = MetricReport(metadata={"checkpoint": ck_id, "degradation": asdict(degradation), "dataset": str(dataset.root), **(metadata or {})})
    opws = []
    for name in dataset.names:
        hq = dataset.clip(name)
        if dataset.lq is not None:
            lq = dataset.lq.clip(name)
        else:
            lq = degrade(hq, degradation.with_seed(clip_seed(degradation.seed, name)))
        restored = restore_clip(net, lq, provider)
        frame_metrics(restored, hq, report, clip=name)
        clip_opw = opw(restored, hq, gt_provider, alpha) if len(hq) > 1 else None
        report.per_clip.append({"clip": name, "opw": clip_opw, "frames": len(hq)})
        if clip_opw is not None:
            opws.append(clip_opw)
    report.opw = float(np.mean(opws)) if opws else None
    return report


class DataError(IngestionError):
    pass


def restore(checkpoint, in_dir, out_dir, provider: FlowProvider = FlowProvider()) -> list[Path]:
    """Restore one clip directory into ``out_dir`` with the same frame names."""
    from .data import frame_paths, read_frame
    from .types import make_clip

    net = checkpoint if isinstance(checkpoint, JFFRANet) else load_checkpoint(checkpoint).net
    paths = frame_paths(in_dir)
    if not paths:
        raise DataError(f"{in_dir}: no PNG frames")
    frames, errors = [], []
    for p in paths:
        try:
            frames.append(read_frame(p))
        except Exception as e:  # noqa: BLE001 - collect every unreadable frame
            errors.append(f"{p.name}: {e}")
    if errors:
        raise DataError("unreadable frames:\n  " + "\n  ".join(errors))
    clip = make_clip(frames, "eight_bit")
    t0 = time.perf_counter()
    restored = restore_clip(net, clip, provider)
    elapsed = time.perf_counter() - t0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        for p, f in zip(paths, restored.frames):
            target = out / p.name
            write_frame(target, f)
            written.append(target)
    except BaseException:
        for w in written:
            w.unlink(missing_ok=True)
        raise
    print(f"{Path(in_dir).name}: restored {len(written)} frames in {elapsed:.2f}s")
    return written
