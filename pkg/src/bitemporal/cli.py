"""Command-line entry point: one subcommand per workflow stage.

Exit status is 0 on success, 2 for bad flags or config files and 1 for
domain errors. Failures print a single ``error: <Kind>: <message>`` line to
stderr; logs also go to stderr and results to the declared output paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .align import AlignConfig, RansacConfig
from .cd import FinetuneConfig
from .pretext import PretextConfig
from .scenario import DistortionSpec

log = logging.getLogger("bitemporal")


class UsageError(Exception):
    """Invalid flags or configuration; maps to exit status 2."""


@dataclass(frozen=True)
class RunConfig:
    pretext: PretextConfig = PretextConfig()
    ransac: RansacConfig = RansacConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    distortion: DistortionSpec = DistortionSpec()
    paths: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
        kwargs = {}
        for name, value in doc.items():
            if name == "paths":
                if not isinstance(value, dict) or not all(isinstance(v, str) for v in value.values()):
                    raise UsageError("paths must map names to strings")
                kwargs[name] = dict(value)
                continue
            kind = type(getattr(cls(), name))
            allowed = {f.name for f in fields(kind)}
            if not isinstance(value, dict):
                raise UsageError(f"section {name} must be an object")
            bad = sorted(set(value) - allowed)
            if bad:
                raise UsageError(f"unknown key(s) in {name}: {', '.join(bad)}")
            try:
                kwargs[name] = kind(**value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"section {name}: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc.msg}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


# helpers --------------------------------------------------------------------

def _override(cfg, **values):
    """Replace only the fields whose value is not None."""
    return replace(cfg, **{k: v for k, v in values.items() if v is not None})


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parent_ok(path) -> Path:
    p = Path(path)
    if not p.parent.is_dir():
        raise FileNotFoundError(f"output directory {p.parent} does not exist")
    return p


# subcommands ----------------------------------------------------------------

def cmd_synth(args, run: RunConfig) -> int:
    from .scenario import gen_patch_corpus, gen_toy_scene, save_scene
    from .raster import save_png

    seed = run.distortion.seed if args.seed is None else args.seed
    spec = _override(run.distortion, max_corner_disp=args.max_corner_disp, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = gen_toy_scene(args.size, args.change_rate, spec, seed * 100003 + i)
        save_scene(scene, out / f"scene_{i:03d}")
    if args.patches:
        pdir = out / "patches"
        pdir.mkdir(exist_ok=True)
        for i, p in enumerate(gen_patch_corpus(args.patches, args.patch_size, seed)):
            save_png(p, pdir / f"patch_{i:04d}.png")
    log.info("synth: wrote %d scene(s) and %d patch(es) to %s", args.scenes, args.patches, out)
    return 0


def cmd_pretrain(args, run: RunConfig) -> int:
    from .model import save_checkpoint
    from .pretext import pretrain, write_loss_log

    cfg = _override(run.pretext, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                    views=args.views, seed=args.seed)
    outs = [_parent_ok(p) for p in (args.out_encoder, args.out_head, args.loss_log)]
    result = pretrain(args.patches, cfg)
    save_checkpoint(result.encoder, outs[0])
    save_checkpoint(result.head, outs[1])
    write_loss_log(result.losses, outs[2])
    return 0


def cmd_align(args, run: RunConfig) -> int:
    from .align import align_scene
    from .model import load_checkpoint
    from .raster import load_png, save_mask_png, save_png, valid_region

    if (args.encoder is None) != (args.head is None):
        raise UsageError("--encoder and --head must be given together")
    ransac = _override(run.ransac, seed=args.seed, tau=args.tau)
    cfg = AlignConfig(ransac=ransac, tile=args.tile, stride=args.stride)
    t1, t2 = load_png(args.t1), load_png(args.t2)
    enc = load_checkpoint(args.encoder, "encoder") if args.encoder else None
    head = load_checkpoint(args.head, "align_head") if args.head else None
    outs = [_parent_ok(p) for p in (args.out_t2, args.out_h, args.report)]
    result = align_scene(t1, t2, enc, head, cfg)
    save_png(result.calibrated, outs[0])
    result.homography.save(outs[1])
    _write_json(result.report, outs[2])
    if args.out_valid:
        save_mask_png(valid_region(t2.height, t2.width, result.homography, t1.height, t1.width),
                      _parent_ok(args.out_valid))
    return 0


def _scene_pair(directory: Path, t2_name: str):
    from .cd import CdPair
    from .raster import load_png

    t1 = load_png(directory / "t1.png")
    t2 = load_png(directory / t2_name)
    gt = load_png(directory / "gt.png")
    valid = None
    if (directory / "valid.png").exists():
        valid = load_png(directory / "valid.png").data[:, :, 0] > 0.5
    return CdPair(t1, t2, type(gt)((gt.data > 0.5).astype(np.float32)), valid)


def cmd_finetune(args, run: RunConfig) -> int:
    from .cd import finetune, write_loss_log
    from .model import load_checkpoint, save_checkpoint

    cfg = _override(run.finetune, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                    seed=args.seed)
    enc = load_checkpoint(args.encoder, "encoder")
    outs = [_parent_ok(p) for p in (args.out_decoder, args.loss_log)]
    pairs = [_scene_pair(Path(d), args.t2_name) for d in args.scenes]
    dec, losses = finetune(pairs, enc, cfg)
    save_checkpoint(dec, outs[0])
    write_loss_log(losses, outs[1])
    return 0


def cmd_infer(args, run: RunConfig) -> int:
    from .cd import infer_scene, save_prediction
    from .model import load_checkpoint
    from .raster import load_png

    threshold = run.finetune.threshold if args.threshold is None else args.threshold
    enc = load_checkpoint(args.encoder, "encoder")
    dec = load_checkpoint(args.decoder, "decoder")
    outs = [_parent_ok(p) for p in (args.out_prob, args.out_mask)]
    prob, mask = infer_scene(load_png(args.t1), load_png(args.t2), enc, dec, args.tile, args.stride,
                             threshold)
    save_prediction(prob, mask, outs[0], outs[1])
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    from .metrics import CSV_HEADER, confusion, metrics
    from .raster import load_png

    def mask(path):
        return load_png(path).data[:, :, 0] > 0.5

    valid = mask(args.valid) if args.valid else None
    m = metrics(confusion(mask(args.pred).astype(np.uint8), mask(args.gt).astype(np.uint8), valid))
    if args.header:
        print(CSV_HEADER)
    print(m.csv_row(args.scenario))
    if m.degenerate:
        log.warning("eval: degenerate confusion (a 0/0 ratio was reported as 0)")
    return 0


# parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitemporal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write toy scene bundles and a patch corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--change-rate", type=float, default=0.05)
    p.add_argument("--max-corner-disp", type=float, default=None)
    p.add_argument("--patches", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised encoder and head training")
    _common(p)
    p.add_argument("--patches", required=True, help="directory of PNG patches")
    p.add_argument("--out-encoder", required=True)
    p.add_argument("--out-head", required=True)
    p.add_argument("--loss-log", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("align", help="estimate H and resample T2 onto T1")
    _common(p)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--encoder", default=None, help="omit with --head to use raw-patch descriptors")
    p.add_argument("--head", default=None)
    p.add_argument("--out-t2", required=True)
    p.add_argument("--out-h", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--out-valid", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--stride", type=int, default=128)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("finetune", help="train the change decoder on aligned scenes")
    _common(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--scenes", nargs="+", required=True,
                   help="scene directories holding t1.png, gt.png and the aligned T2")
    p.add_argument("--t2-name", default="t2_aligned.png")
    p.add_argument("--out-decoder", required=True)
    p.add_argument("--loss-log", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="tiled change prediction for one scene")
    _common(p)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--out-prob", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="print scenario,pre,rec,f1,iou for a predicted mask")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--valid", default=None)
    p.add_argument("--scenario", default="scene")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def _one_line(exc: BaseException) -> str:
    msg = str(exc) or exc.__class__.__name__
    return f"error: {exc.__class__.__name__}: " + " ".join(msg.split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        run = RunConfig.load(args.config) if args.config else RunConfig()
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        threads = args.threads or os.cpu_count() or 1
        with threadpool_limits(limits=threads):
            return args.func(args, run)
    except UsageError as exc:
        print(_one_line(exc), file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(_one_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
