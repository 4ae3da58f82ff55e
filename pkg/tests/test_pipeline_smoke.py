"""End-to-end pipeline smoke: a stage-1 model trained to convergence on the
identity slice (canonical pose, single garment) must reproduce the reference
garment through the full CLI pipeline."""

import numpy as np
import pytest

from polygan import cli
from polygan import data as D
from polygan.checkpoint import checkpoint_save
from polygan.metrics import ssim
from polygan.pngio import png_read, png_write
from polygan.rng import RngState
from polygan.training import TrainConfig, Trainer

SIZE = 32
GARMENT = D.GarmentParams(width_factor=1.1, striped=True, texture_seed=123)


def small_cfg(stage, **kw):
    args = dict(stage=stage, image_size=SIZE, seed=1, base_width=16,
                disc_base=16, head_width=256, epochs=1)
    args.update(kw)
    return TrainConfig(**args)


@pytest.fixture(scope="module")
def identity_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("identity")
    sample = D.make_stage1_sample(RngState(77).child("x"), SIZE,
                                  pose=D.CANONICAL_POSE, garment=GARMENT)
    trainer = Trainer(small_cfg("stage1"))
    for _ in range(1000):
        trainer.train_step(sample)
    ck1 = root / "ck1.pgan"
    checkpoint_save(ck1, trainer.to_checkpoint())
    # untrained stitcher/inpainter checkpoints: integrity only
    for stage, name in (("stage2", "ck2.pgan"), ("stage3", "ck3.pgan")):
        checkpoint_save(root / name, Trainer(small_cfg(stage)).to_checkpoint())
    return root, sample


def _write_pipeline_inputs(dirpath):
    pose = D.CANONICAL_POSE
    skel = D.render_skeleton(pose, SIZE)
    ref, _ = D.render_garment(D.CANONICAL_POSE, GARMENT, SIZE)
    g_img, g_mask = D.render_garment(pose, GARMENT, SIZE)
    body_img, body_mask = D.render_body(pose, SIZE)
    blanked, _ = D.compose_garment_on_body(g_img, g_mask, body_img)
    head_img, head_mask = D.render_head(pose, SIZE)
    png_write(dirpath / "skeleton.png", skel)
    png_write(dirpath / "garment.png", ref)
    png_write(dirpath / "body.png", blanked)
    png_write(dirpath / "bodymask.png", np.repeat(np.maximum(body_mask, g_mask)[None], 3, 0))
    png_write(dirpath / "head.png", np.concatenate([head_img, head_mask[None]], axis=0))


def test_identity_pipeline_smoke(identity_run, tmp_path):
    root, sample = identity_run
    _write_pipeline_inputs(tmp_path)
    out_dir = tmp_path / "out"
    argv = ["pipeline", "--set", f"out_dir={out_dir}", "--set", f"image_size={SIZE}",
            "--ckpt1", str(root / "ck1.pgan"), "--ckpt2", str(root / "ck2.pgan"),
            "--ckpt3", str(root / "ck3.pgan"),
            "--skeleton", str(tmp_path / "skeleton.png"),
            "--garment", str(tmp_path / "garment.png"),
            "--body", str(tmp_path / "body.png"),
            "--body-mask", str(tmp_path / "bodymask.png"),
            "--head", str(tmp_path / "head.png")]
    assert cli.main(argv) == 0

    for name in ("stage1", "stage2", "stage3", "diff_mask", "final"):
        img = png_read(out_dir / f"{name}.png", channels=3)
        assert img.shape == (3, SIZE, SIZE)
        assert img.min() >= 0.0 and img.max() <= 1.0

    stage1 = png_read(out_dir / "stage1.png", channels=3)
    reference = png_read(tmp_path / "garment.png", channels=3)
    assert ssim(stage1, reference) > 0.9

    # composite algebra recomputed from the written intermediates is exact
    s2 = png_read(out_dir / "stage2.png", channels=3)
    s3 = png_read(out_dir / "stage3.png", channels=3)
    diff = (png_read(out_dir / "diff_mask.png", channels=3)[0] > 0.5).astype(np.float32)
    head = png_read(tmp_path / "head.png", channels=4)
    final = png_read(out_dir / "final.png", channels=3)
    recomputed = D.composite_stage4(s2, s3, diff, head[:3], (head[3] > 0.5).astype(np.float32))
    assert np.array_equal(np.round(recomputed * 255), np.round(final * 255))

    # empty difference mask forces the body region of final == stage2
    if not diff.any():
        head_m = head[3] > 0.5
        assert np.array_equal(final[:, ~head_m], s2[:, ~head_m])

    # reruns are byte-identical (same checkpoints, same inputs)
    out2 = tmp_path / "out2"
    argv2 = list(argv)
    argv2[2] = f"out_dir={out2}"
    assert cli.main(argv2) == 0
    for name in ("stage1", "stage2", "stage3", "diff_mask", "final"):
        assert (out2 / f"{name}.png").read_bytes() == (out_dir / f"{name}.png").read_bytes()


def test_pipeline_rejects_mismatched_checkpoints(identity_run, tmp_path):
    root, _ = identity_run
    _write_pipeline_inputs(tmp_path)
    argv = ["pipeline", "--set", f"out_dir={tmp_path/'o'}", "--set", f"image_size={SIZE}",
            "--ckpt1", str(root / "ck2.pgan"), "--ckpt2", str(root / "ck2.pgan"),
            "--ckpt3", str(root / "ck3.pgan"),
            "--skeleton", str(tmp_path / "skeleton.png"),
            "--garment", str(tmp_path / "garment.png"),
            "--body", str(tmp_path / "body.png"),
            "--body-mask", str(tmp_path / "bodymask.png"),
            "--head", str(tmp_path / "head.png")]
    assert cli.main(argv) == 1  # stage mismatch is a validation error


def test_pipeline_rejects_wrong_image_size(identity_run, tmp_path):
    root, _ = identity_run
    _write_pipeline_inputs(tmp_path)
    argv = ["pipeline", "--set", f"out_dir={tmp_path/'o'}", "--set", "image_size=64",
            "--ckpt1", str(root / "ck1.pgan"), "--ckpt2", str(root / "ck2.pgan"),
            "--ckpt3", str(root / "ck3.pgan"),
            "--skeleton", str(tmp_path / "skeleton.png"),
            "--garment", str(tmp_path / "garment.png"),
            "--body", str(tmp_path / "body.png"),
            "--body-mask", str(tmp_path / "bodymask.png"),
            "--head", str(tmp_path / "head.png")]
    assert cli.main(argv) == 1
