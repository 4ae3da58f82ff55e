#!/usr/bin/env python3
"""Train one stage model with library calls (no PNG round trip) and plot the
loss curves if matplotlib is around.

    python3 scripts/train_stage.py --stage 1 --steps 2000 --out runs/stage1
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from polygan import data as D
from polygan.checkpoint import checkpoint_save
from polygan.metrics import ssim
from polygan.training import TrainConfig, Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--image-size", type=int, default=32)
    ap.add_argument("--base-width", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/stage")
    args = ap.parse_args()

    stage = f"stage{args.stage}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(stage=stage, image_size=args.image_size, seed=args.seed,
                      base_width=args.base_width, disc_base=args.base_width,
                      head_width=256, epochs=1)
    trainer = Trainer(cfg)
    test = [D.sample_for(stage, 50_000_000 + i, args.image_size) for i in range(30)]

    rows = []
    t0 = time.time()
    for step in range(args.steps):
        rep = trainer.train_step(D.sample_for(stage, step, args.image_size))
        rows.append((step + 1, rep["d_loss"], rep["g_gan"], rep["g_id"]))
        if (step + 1) % 250 == 0:
            score = np.mean([ssim(trainer.generate(s.conditions), s.target) for s in test])
            print(f"step {step+1}/{args.steps}  d={rep['d_loss']:.4f} "
                  f"id={rep['g_id']:.4f}  test_ssim={score:.4f}  ({time.time()-t0:.0f}s)",
                  flush=True)

    checkpoint_save(out / "checkpoint_final.pgan", trainer.to_checkpoint())
    with open(out / "losses.csv", "w") as fh:
        fh.write("step,d_loss,g_gan,g_id\n")
        for row in rows:
            fh.write(",".join(repr(v) if i else str(v) for i, v in enumerate(row)) + "\n")
    print(f"checkpoint and losses written to {out}")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        arr = np.array(rows)
        fig, ax = plt.subplots(figsize=(7, 4))
        for i, label in ((1, "d_loss"), (2, "g_gan"), (3, "g_id")):
            ax.plot(arr[:, 0], arr[:, i], label=label, lw=0.8)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=120)
        print(f"loss plot at {out/'losses.png'}")
    except ImportError:
        pass


if __name__ == "__main__":
    sys.exit(main())
