"""Run the whole command-line pipeline on synthetic data.

synth -> pretrain -> align (every scene) -> finetune -> infer -> eval, all
through ``bitemporal.cli.main`` so the artefacts on disk are exactly what the
CLI produces. Scores go to stdout as CSV.

    python scripts/run_pipeline.py --work /tmp/run --scenes 12 --test 4
"""

import argparse
import sys
from pathlib import Path

from bitemporal.cli import main as cli


def step(*argv) -> None:
    code = cli([str(a) for a in argv])
    if code != 0:
        sys.exit(f"step {argv[0]} failed with status {code}")


def run(args) -> None:
    work = Path(args.work)
    data, models = work / "data", work / "models"
    models.mkdir(parents=True, exist_ok=True)
    common = ["--seed", args.seed, "--log-level", args.log_level]

    step("synth", "--out", data, "--scenes", args.scenes, "--size", args.size,
         "--patches", args.patches, "--max-corner-disp", args.disp, *common)
    step("pretrain", "--patches", data / "patches", "--out-encoder", models / "encoder.ckpt",
         "--out-head", models / "head.ckpt", "--loss-log", models / "pretext_loss.csv",
         "--epochs", args.pretext_epochs, *common)

    scenes = sorted(data.glob("scene_*"))
    for s in scenes:
        step("align", "--t1", s / "t1.png", "--t2", s / "t2.png", "--encoder", models / "encoder.ckpt",
             "--head", models / "head.ckpt", "--out-t2", s / "t2_aligned.png", "--out-h", s / "h.json",
             "--report", s / "align_report.json", "--out-valid", s / "valid.png", *common)

    train, test = scenes[:-args.test], scenes[-args.test:]
    step("finetune", "--encoder", models / "encoder.ckpt", "--scenes", *train,
         "--out-decoder", models / "decoder.ckpt", "--loss-log", models / "cd_loss.csv",
         "--epochs", args.cd_epochs, "--batch-size", min(8, len(train)), *common)

    first = True
    for s in test:
        step("infer", "--t1", s / "t1.png", "--t2", s / "t2_aligned.png", "--encoder", models / "encoder.ckpt",
             "--decoder", models / "decoder.ckpt", "--out-prob", s / "prob.png", "--out-mask", s / "mask.png",
             *common)
        step("eval", "--pred", s / "mask.png", "--gt", s / "gt.png", "--valid", s / "valid.png",
             "--scenario", s.name, *(["--header"] if first else []), *common)
        first = False


def parse(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", required=True)
    p.add_argument("--scenes", type=int, default=12)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--disp", type=float, default=0.05)
    p.add_argument("--patches", type=int, default=200)
    p.add_argument("--pretext-epochs", type=int, default=20)
    p.add_argument("--cd-epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--log-level", default="WARNING")
    args = p.parse_args(argv)
    if not 0 < args.test < args.scenes:
        p.error("--test must be between 1 and --scenes - 1")
    return args


if __name__ == "__main__":
    run(parse())
