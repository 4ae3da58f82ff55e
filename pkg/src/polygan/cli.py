"""Command-line entry point.

Subcommands: gen-data, train, pipeline, eval, selfcheck.  Every command is a
deterministic function of (config, input files); exit codes are 0 success,
1 validation failure, 2 I/O or format failure, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from . import metrics as M
from .checkpoint import (CheckpointCorruptionError, CheckpointFormatError,
                         checkpoint_load)
from .config import RunConfig, load_config
from .errors import (ConfigError, DecodeError, DomainError, NumericError,
                     PairingError, ShapeError, SpecError)
from .network import ConditionSet
from .pngio import png_read, png_write
from .training import Trainer, train, trainer_from_checkpoint

TRAIN_SEED_SPAN = 100_000_000
TEST_SEED_OFFSET = 50_000_000


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory values equal their PNG round trip."""
    return (np.clip(np.round(img * 255.0), 0, 255) / 255.0).astype(np.float32)


def dataset_seeds(cfg: RunConfig, split: str) -> List[int]:
    base = cfg.seed * TRAIN_SEED_SPAN
    if split == "train":
        return [base + i for i in range(cfg.train_count)]
    return [base + TEST_SEED_OFFSET + i for i in range(cfg.test_count)]


def cmd_gen_data(cfg: RunConfig) -> Path:
    cfg.require("stage", "out_dir")
    out = Path(cfg.out_dir)
    splits = ("test",) if cfg.stage == "pipeline" else ("train", "test")
    for split in splits:
        D.export_dataset(out / split, cfg.stage, dataset_seeds(cfg, split),
                         cfg.image_size, png_write)
    print(f"wrote {cfg.stage} dataset to {out}")
    return out


def cmd_train(cfg: RunConfig, resume: Optional[str] = None) -> Path:
    cfg.require("stage", "out_dir")
    tcfg = cfg.train_config()
    data_root = Path(cfg.data_dir) / "train"
    dataset = D.StageDataset(data_root, cfg.stage, png_read)
    final, csv_path = train(tcfg, dataset, cfg.out_dir, resume=resume,
                            config_echo=cfg.echo(), progress=200)
    print(f"trained {cfg.stage} for {final.step} steps; losses at {csv_path}")
    return Path(cfg.out_dir) / "checkpoint_final.pgan"


def _load_stage_generator(path, expected_stage: str, image_size: int) -> Trainer:
    ckpt = checkpoint_load(path)
    stage = ckpt.config.get("stage")
    if stage != expected_stage:
        raise ConfigError(f"{path}: checkpoint is for {stage!r}, expected {expected_stage!r}")
    if int(ckpt.config["image_size"]) != image_size:
        raise ConfigError(
            f"{path}: checkpoint image_size {ckpt.config['image_size']} != configured {image_size}")
    return trainer_from_checkpoint(ckpt)


def _read_mask(path, size: int) -> np.ndarray:
    img = png_read(path, channels=3)
    if img.shape[1] != size or img.shape[2] != size:
        raise ConfigError(f"{path}: extent {img.shape[1:]} != image_size {size}")
    return (img[0] > 0.5).astype(np.float32)


def _read_rgb(path, size: int) -> np.ndarray:
    img = png_read(path, channels=3)
    if img.shape[1] != size or img.shape[2] != size:
        raise ConfigError(f"{path}: extent {img.shape[1:]} != image_size {size}")
    return img


def cmd_pipeline(cfg: RunConfig, ckpt1, ckpt2, ckpt3,
                 skeleton, garment, body, body_mask, head) -> Path:
    """Transform -> stitch -> inpaint -> composite; writes all intermediates."""
    cfg.require("out_dir")
    size = cfg.image_size
    t1 = _load_stage_generator(ckpt1, "stage1", size)
    t2 = _load_stage_generator(ckpt2, "stage2", size)
    t3 = _load_stage_generator(ckpt3, "stage3", size)

    skel = _read_rgb(skeleton, size)
    garm = _read_rgb(garment, size)
    body_img = _read_rgb(body, size)
    sil = _read_mask(body_mask, size)
    head_rgba = png_read(head, channels=4)
    if head_rgba.shape[1] != size or head_rgba.shape[2] != size:
        raise ConfigError(f"{head}: extent {head_rgba.shape[1:]} != image_size {size}")
    head_img, head_m = head_rgba[:3], (head_rgba[3] > 0.5).astype(np.float32)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stage1 = _quantize(t1.generate(ConditionSet(images=(skel[None], garm[None]))))
    stage2 = _quantize(t2.generate(ConditionSet(images=(body_img[None], skel[None], stage1[None]))))
    diff = D.difference_mask(stage2, sil, cfg.tau_diff)
    stage3 = _quantize(t3.generate(D.stage3_conditions(stage2, diff)))
    final = D.composite_stage4(stage2, stage3, diff, head_img, head_m)

    png_write(out / "stage1.png", stage1)
    png_write(out / "stage2.png", stage2)
    png_write(out / "stage3.png", stage3)
    png_write(out / "diff_mask.png", np.repeat(diff[None], 3, axis=0))
    png_write(out / "final.png", final)
    print(f"pipeline outputs written to {out}")
    return out / "final.png"


def cmd_eval(cfg: RunConfig, generated_dir, target_dir) -> M.EvalReport:
    cfg.require("out_dir")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = M.evaluate_dir(generated_dir, target_dir, png_read,
                            csv_path=out / "ssim_report.csv")
    print(f"evaluated {report.count} pairs; mean SSIM {report.mean:.6f}")
    return report


# ---------------------------------------------------------------------------
# selfcheck


def _selfcheck_checks(cfg: RunConfig):
    from . import autodiff as ad
    from . import layers as L
    from . import losses as LS
    from .network import GeneratorSpec, audit_generator, build_generator
    from .rng import RngState
    from .tensor import randn
    from .training import ImageBuffer

    def rng_determinism():
        a = randn([16], RngState(42))
        b = randn([16], RngState(42))
        assert np.array_equal(a, b), "same seed must give identical draws"

    def gradients():
        rng = RngState(1)
        x = rng.normal(1 * 2 * 6 * 6).reshape(1, 2, 6, 6)
        w = rng.normal(3 * 2 * 3 * 3).reshape(3, 2, 3, 3) * 0.5
        err = ad.finite_diff_check(
            lambda n: ad.mean(ad.tanh(L.conv2d(n, ad.leaf(w), None, 1, 1))), x)
        assert err < 1e-5, f"conv2d gradient error {err}"
        g = np.ones(2)
        be = np.zeros(2)
        err = ad.finite_diff_check(
            lambda n: ad.mean(ad.tanh(L.instance_norm(n, ad.leaf(g), ad.leaf(be)))), x[:, :2])
        assert err < 1e-5, f"instance_norm gradient error {err}"

    def adjointness():
        rng = RngState(2)
        x = rng.normal(1 * 3 * 8 * 8).reshape(1, 3, 8, 8)
        w = rng.normal(4 * 3 * 4 * 4).reshape(4, 3, 4, 4)
        y = L._conv_fwd(x, w, 2, 1)
        y2 = rng.normal(y.size).reshape(y.shape)
        lhs = float((y * y2).sum())
        rhs = float((x * L._conv_dx(y2, w, 2, 1, 8, 8)).sum())
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs)), "conv/conv_T adjointness"

    def adam():
        p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
        p2, _, _ = L.adam_step(p, np.zeros(1), m, v, 1, 2e-4, 0.5, 0.999, 1e-8)
        assert np.array_equal(p, p2), "zero gradient must not move parameters"
        g = np.array([0.3])
        p3, _, _ = L.adam_step(p, g, m, v, 1, 2e-4, 0.5, 0.999, 1e-8)
        expect = p - 2e-4 * g / (np.abs(g) + 1e-8)
        assert np.allclose(p3, expect, atol=1e-12), "one-step Adam closed form"

    def buffer():
        rng = RngState(3)
        buf = ImageBuffer(10, rng)
        warm = [buf.query(np.full((1,), float(i))) for i in range(10)]
        assert all(float(w[0]) == i for i, w in enumerate(warm)), "warm-up must return incoming"
        stored = 0
        for i in range(2000):
            out = buf.query(np.full((1,), float(100 + i)))
            stored += float(out[0]) != float(100 + i)
            assert len(buf.store) <= 10
        frac = stored / 2000
        assert 0.4 < frac < 0.6, f"stored-return fraction {frac}"

    def ssim_oracle():
        rng = RngState(4)
        x = rng.uniform(3 * 16 * 16).reshape(3, 16, 16)
        assert M.ssim(x, x) == 1.0, "ssim(x,x) must be exactly 1"
        p = M.SsimParams()
        got = M.ssim(np.zeros((3, 16, 16)), np.ones((3, 16, 16)))
        assert abs(got - p.c1 / (1 + p.c1)) < 1e-8, f"constant-image ssim {got}"

    def generator_audit():
        spec = GeneratorSpec.for_size(32, 6, base_width=4)
        gen = build_generator(spec, RngState(5))
        rep = audit_generator(gen)
        assert rep.condition_injections == rep.encoder_stages == 4, rep
        assert rep.skip_resolutions == (16, 8, 4), rep
        assert rep.output_shape == (1, 3, 32, 32), rep

    def loss_zero_points():
        lc = LS.LossConfig()
        ones = ad.leaf(np.ones((2, 1)))
        zeros = ad.leaf(np.zeros((2, 1)))
        assert float(LS.discriminator_loss(ones, zeros, lc).value) == 0.0
        assert float(LS.generator_gan_loss(ones, lc).value) == 0.0
        x = ad.leaf(np.full((2, 3), 0.5))
        assert float(LS.identity_loss(x, x, lc).value) == 0.0

    return [
        ("rng-determinism", rng_determinism),
        ("gradients", gradients),
        ("conv-adjointness", adjointness),
        ("adam", adam),
        ("image-buffer", buffer),
        ("ssim-oracle", ssim_oracle),
        ("generator-audit", generator_audit),
        ("loss-zero-points", loss_zero_points),
    ]


def cmd_selfcheck(cfg: RunConfig) -> int:
    failures = 0
    for name, check in _selfcheck_checks(cfg):
        try:
            check()
            print(f"PASS {name}")
        except AssertionError as e:
            failures += 1
            print(f"FAIL {name}: {e}")
    return failures


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="path to key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="override one config key")

    p = sub.add_parser("gen-data", help="generate a synthetic stage dataset")
    add_common(p)

    p = sub.add_parser("train", help="train one stage model")
    add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("pipeline", help="run the four-stage inference pipeline")
    add_common(p)
    p.add_argument("--ckpt1", required=True)
    p.add_argument("--ckpt2", required=True)
    p.add_argument("--ckpt3", required=True)
    p.add_argument("--skeleton", required=True)
    p.add_argument("--garment", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--body-mask", required=True, dest="body_mask")
    p.add_argument("--head", required=True, help="RGBA PNG; alpha is the head mask")

    p = sub.add_parser("eval", help="SSIM report over paired PNG directories")
    add_common(p)
    p.add_argument("generated_dir")
    p.add_argument("target_dir")

    p = sub.add_parser("selfcheck", help="run fast built-in verification checks")
    add_common(p)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.overrides)
    if args.command == "gen-data":
        cmd_gen_data(cfg)
    elif args.command == "train":
        cmd_train(cfg, resume=args.resume)
    elif args.command == "pipeline":
        cmd_pipeline(cfg, args.ckpt1, args.ckpt2, args.ckpt3,
                     args.skeleton, args.garment, args.body, args.body_mask, args.head)
    elif args.command == "eval":
        cmd_eval(cfg, args.generated_dir, args.target_dir)
    elif args.command == "selfcheck":
        return 1 if cmd_selfcheck(cfg) else 0
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except (ConfigError, SpecError, DomainError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, DecodeError, PairingError, CheckpointFormatError,
            CheckpointCorruptionError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
