"""Command-line entry point: ``jffra {degrade,train,eval,restore,metrics}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import (
    ConfigurationError,
    DegradationSpec,
    IngestionError,
    clip_seed,
    degrade,
    frame_paths,
    ingest_dataset,
    materialize_degraded,
    read_clip_dir,
    write_clip_dir,
)
from .flow import FlowProvider
from .metrics import MetricReport, frame_metrics, opw
from .network import ConfigError
from .train import NumericalError, deterministic_requested, evaluate, load_config, restore, set_deterministic, train
from .types import ParameterError, RangeError, ShapeError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

log = logging.getLogger("jffra")


def _dataset_root(path: Path) -> tuple[Path, dict | None]:
    """A directory of PNGs is a one-clip dataset rooted at its parent."""
    if not path.is_dir():
        raise IngestionError(f"{path}: not a directory")
    if frame_paths(path):
        return path.parent, {"sel": [path.name]}
    return path, None


def _provider(spec: str | None) -> FlowProvider:
    if spec is None:
        return FlowProvider()
    p = Path(spec)
    if p.is_file():
        return FlowProvider.from_dict(yaml.safe_load(p.read_text()))
    return FlowProvider(kind=spec)


def _emit(report: MetricReport, target: str | None) -> None:
    if target is None or target == "-":
        print(report.to_json())
    else:
        report.write(target)
        agg = report.aggregate
        print(f"{agg['frames']} frames: psnr {agg['mean_psnr']:.3f} dB, ssim {agg['mean_ssim']:.4f}, opw {agg['opw']}")


def cmd_degrade(args) -> None:
    root, manifest = _dataset_root(Path(args.input))
    ds = ingest_dataset(root, manifest, "sel" if manifest else None)
    spec = DegradationSpec(args.kind, args.sigma, args.seed, args.blind)
    out = Path(args.output)
    if manifest:
        # single clip in, single clip out
        name = ds.names[0]
        clip, names = read_clip_dir(root / name)
        write_clip_dir(out, degrade(clip, spec.with_seed(clip_seed(spec.seed, name))), names)
    else:
        materialize_degraded(ds, out, spec)
    print(f"wrote {ds.num_frames} degraded frames to {out}")


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    res = train(cfg, resume=args.resume, out_dir=args.out, progress=True)
    last = res.records[-1] if res.records else None
    if last is not None:
        print(f"iteration {last.iteration}: loss {last.loss:.6f}")
    print(f"checkpoint: {res.checkpoint}")


def cmd_eval(args) -> None:
    root, manifest = _dataset_root(Path(args.data))
    lq = None
    if args.lq:
        lq_root, _ = _dataset_root(Path(args.lq))
        lq = lq_root
    ds = ingest_dataset(root, manifest, "sel" if manifest else None, lq)
    spec = DegradationSpec(args.kind, args.sigma, args.seed)
    provider = _provider(args.flow)
    report = evaluate(args.ckpt, ds, spec, provider, alpha=args.alpha)
    _emit(report, args.report)


def cmd_restore(args) -> None:
    restore(args.ckpt, args.input, args.output, _provider(args.flow))


def _clip_pairs(restored: Path, gt: Path):
    if frame_paths(gt):
        return [(gt.name, restored, gt)]
    pairs = []
    for d in sorted(p for p in gt.iterdir() if p.is_dir()):
        if not (restored / d.name).is_dir():
            raise IngestionError(f"{restored}: missing restored clip {d.name!r}")
        pairs.append((d.name, restored / d.name, d))
    if not pairs:
        raise IngestionError(f"{gt}: no clips")
    return pairs


def cmd_metrics(args) -> None:
    provider = _provider(args.flow)
    report = MetricReport(metadata={"restored": args.restored, "gt": args.gt})
    opws = []
    for name, r_dir, g_dir in _clip_pairs(Path(args.restored), Path(args.gt)):
        r, r_names = read_clip_dir(r_dir)
        g, g_names = read_clip_dir(g_dir)
        if r_names != g_names:
            raise IngestionError(f"clip {name!r}: restored and ground-truth frame names differ")
        frame_metrics(r, g, report, clip=name)
        value = opw(r, g, provider, args.alpha) if len(g) > 1 else None
        report.per_clip.append({"clip": name, "opw": value, "frames": len(g)})
        if value is not None:
            opws.append(value)
    report.opw = sum(opws) / len(opws) if opws else None
    _emit(report, args.report)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jffra", description="Flow-guided window-attention video restoration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", help="write a degraded copy of a clip or dataset")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", dest="output", required=True)
    d.add_argument("--kind", default="awgn", choices=["awgn", "bicubic_x4", "none"])
    d.add_argument("--sigma", type=float, default=25.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--blind", action="store_true")
    d.set_defaults(fn=cmd_degrade)

    t = sub.add_parser("train", help="train from a YAML/JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--out", help="checkpoint directory (overrides the config)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="restore a dataset and report PSNR/SSIM/OPW")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="ground-truth clip or dataset root")
    e.add_argument("--lq", help="pre-degraded inputs mirroring --data")
    e.add_argument("--kind", default="awgn", choices=["awgn", "bicubic_x4", "none"])
    e.add_argument("--sigma", type=float, default=25.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--flow", help="provider kind or a YAML provider file")
    e.add_argument("--alpha", type=float, default=0.2)
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("restore", help="restore one clip directory")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", dest="output", required=True)
    r.add_argument("--flow", help="provider kind or a YAML provider file")
    r.set_defaults(fn=cmd_restore)

    m = sub.add_parser("metrics", help="compare restored frames with ground truth")
    m.add_argument("--restored", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--flow", help="provider kind or a YAML provider file")
    m.add_argument("--alpha", type=float, default=0.2)
    m.add_argument("--report")
    m.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING, format="%(message)s")
    if deterministic_requested():
        set_deterministic(True)
    try:
        args.fn(args)
    except (ConfigError, ConfigurationError, ParameterError, yaml.YAMLError, json.JSONDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, ShapeError, RangeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
