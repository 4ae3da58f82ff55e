#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: generate data, train all three stage
models at 32x32, run the four-stage pipeline on held-out inputs, and report
SSIM against the synthetic ground truth.

Everything is driven through the CLI so the run mirrors what a user would
type; expect roughly 15 minutes on a laptop CPU with the defaults below.

    python3 scripts/run_desk_scale_experiment.py --workdir runs/desk [--steps 2000]
"""

import argparse
import subprocess
import sys
from pathlib import Path


def sh(*args):
    print("+", " ".join(str(a) for a in args), flush=True)
    subprocess.run([str(a) for a in args], check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/desk")
    ap.add_argument("--image-size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=2000,
                    help="training samples per stage (1 epoch => same step count)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    wd = Path(args.workdir)
    size = args.image_size
    base = ["--set", f"image_size={size}", "--set", f"seed={args.seed}",
            "--set", "base_width=16", "--set", "disc_base=16", "--set", "head_width=256"]
    counts = ["--set", f"train_count={args.steps}", "--set", "test_count=50"]

    for stage in ("1", "2", "3"):
        sh("pgan", "gen-data", "--set", f"stage={stage}",
           "--set", f"out_dir={wd/f'data/stage{stage}'}", *base, *counts)
        sh("pgan", "train", "--set", f"stage={stage}",
           "--set", f"data_dir={wd/f'data/stage{stage}'}",
           "--set", f"out_dir={wd/f'runs/stage{stage}'}", "--set", "epochs=1",
           *base, *counts)

    sh("pgan", "gen-data", "--set", "stage=pipeline",
       "--set", f"out_dir={wd/'data/pipeline'}", "--set", "test_count=8", *base)

    gen_dir = wd / "pipeline_final"
    gen_dir.mkdir(parents=True, exist_ok=True)
    tgt_dir = wd / "pipeline_targets"
    tgt_dir.mkdir(parents=True, exist_ok=True)
    manifest = (wd / "data/pipeline/test/manifest.csv").read_text().splitlines()[1:]
    seeds = sorted({row.split(",")[0] for row in manifest})
    for seed in seeds:
        stem = wd / "data/pipeline/test" / f"pipeline_{int(seed):06d}"
        out_dir = wd / f"pipeline_out/{seed}"
        sh("pgan", "pipeline", "--set", f"out_dir={out_dir}", "--set", f"image_size={size}",
           "--ckpt1", wd / "runs/stage1/checkpoint_final.pgan",
           "--ckpt2", wd / "runs/stage2/checkpoint_final.pgan",
           "--ckpt3", wd / "runs/stage3/checkpoint_final.pgan",
           "--skeleton", f"{stem}_skeleton.png", "--garment", f"{stem}_garment.png",
           "--body", f"{stem}_body.png", "--body-mask", f"{stem}_bodymask.png",
           "--head", f"{stem}_head.png")
        (gen_dir / f"{seed}.png").write_bytes((out_dir / "final.png").read_bytes())
        (tgt_dir / f"{seed}.png").write_bytes(Path(f"{stem}_target.png").read_bytes())

    sh("pgan", "eval", "--set", f"out_dir={wd}", gen_dir, tgt_dir)
    print(f"\nreport: {wd/'ssim_report.csv'}")


if __name__ == "__main__":
    sys.exit(main())
