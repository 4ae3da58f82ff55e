import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polygan import autodiff as ad
from polygan import data as D
from polygan.autodiff import Node
from polygan.checkpoint import checkpoint_load, checkpoint_save
from polygan.data import SampleMeta, StageSample
from polygan.errors import (CheckpointCorruptionError, CheckpointFormatError,
                            ConfigError, NumericError)
from polygan.layers import Adam, Module, Parameter, Tape
from polygan.losses import LossConfig
from polygan.network import ConditionSet
from polygan.rng import RngState
from polygan.training import (ImageBuffer, TrainConfig, Trainer,
                              discriminator_update, generator_update,
                              to_net, train, train_step, trainer_from_checkpoint)

SMALL = dict(image_size=32, base_width=4, disc_base=4, head_width=16)


def small_cfg(**kw):
    args = dict(stage="stage1", epochs=1, seed=5, **SMALL)
    args.update(kw)
    return TrainConfig(**args)


@pytest.fixture(scope="module")
def tiny_dataset():
    return [D.sample_for("stage1", i, 32) for i in range(6)]


def params_digest(named_params):
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(p.value.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# image buffer


def test_buffer_warmup_returns_incoming():
    buf = ImageBuffer(50, RngState(1))
    for i in range(50):
        img = np.full((2,), float(i), dtype=np.float32)
        assert buf.query(img) is img
    assert len(buf.store) == 50


def test_buffer_capacity_bound_and_mix():
    rng = RngState(2)
    buf = ImageBuffer(50, rng)
    stored_returns = 0
    for i in range(2500):
        img = np.full((1,), float(i), dtype=np.float32)
        out = buf.query(img)
        assert len(buf.store) <= 50
        if i >= 50 and out is not img:
            stored_returns += 1
    frac = stored_returns / 2450
    assert 0.4 < frac < 0.6


@given(st.integers(1, 40), st.integers(0, 2**32))
@settings(max_examples=30, deadline=None)
def test_buffer_invariants_any_capacity(capacity, seed):
    buf = ImageBuffer(capacity, RngState(seed))
    for i in range(3 * capacity):
        img = np.full((1,), float(i), dtype=np.float32)
        out = buf.query(img)
        if i < capacity:
            assert out is img
        assert len(buf.store) <= capacity


def test_buffer_rejects_bad_capacity():
    with pytest.raises(ConfigError):
        ImageBuffer(0)


# ---------------------------------------------------------------------------
# train_step


def test_zero_g_weights_freeze_generator(tiny_dataset):
    cfg = small_cfg(loss=LossConfig(lambda3=0.0, lambda4=0.0))
    tr = Trainer(cfg)
    before = params_digest(tr.params_g)
    d_before = params_digest(tr.params_d)
    tr.train_step(tiny_dataset[0])
    assert params_digest(tr.params_g) == before
    assert params_digest(tr.params_d) != d_before


def test_zero_d_weights_freeze_discriminator(tiny_dataset):
    cfg = small_cfg(loss=LossConfig(lambda1=0.0, lambda2=0.0))
    tr = Trainer(cfg)
    before = params_digest(tr.params_d)
    g_before = params_digest(tr.params_g)
    tr.train_step(tiny_dataset[0])
    assert params_digest(tr.params_d) == before
    assert params_digest(tr.params_g) != g_before


def test_half_step_isolation(tiny_dataset):
    tr = Trainer(small_cfg())
    sample = tiny_dataset[1]
    conds = ConditionSet(images=tuple(to_net(im) for im in sample.conditions.images))
    target_n = to_net(sample.target)[None]
    tape_g = Tape(trainable=[p for _, p in tr.params_g])
    fake = tr.gen.forward(conds, tape_g)

    g_hash = params_digest(tr.params_g)
    discriminator_update(tr.disc, tr.params_d, tr.opt_d, tr.buffer, tr.cfg.loss,
                         target_n, fake.value.copy(), 1)
    assert params_digest(tr.params_g) == g_hash  # D half-step leaves G alone

    d_hash = params_digest(tr.params_d)
    generator_update(tr.disc, tr.params_g, tr.opt_g, tr.cfg.loss,
                     fake, tape_g, target_n, 1)
    assert params_digest(tr.params_d) == d_hash  # G half-step leaves D alone
    assert params_digest(tr.params_g) != g_hash


class ToyGen(Module):
    def __init__(self, w0):
        self.w = Parameter(np.asarray(w0, dtype=np.float32))

    def forward(self, conditions, tape):
        return ad.mul(tape.node(self.w), ad.leaf(conditions.images[0]))


class ToyDisc(Module):
    def __init__(self, w0):
        self.w = Parameter(np.asarray(w0, dtype=np.float32))

    def forward(self, image, tape):
        b = image.value.shape[0]
        flat = Node(image.value.reshape(b, -1), "reshape", (image,),
                    vjp=lambda g: (g.reshape(image.value.shape),))
        return ad.linear(flat, tape.node(self.w), None)


def _hand_adam(p, g, lr, b1, b2, eps):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    return p - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)


def test_train_step_matches_hand_unrolled_toy():
    lr, b1, b2, eps = 2e-4, 0.5, 0.999, 1e-8
    loss_cfg = LossConfig(lambda1=0.5, lambda2=0.5, lambda3=1.0, lambda4=10.0)
    wg0 = np.array([[[[0.4]], [[-0.2]], [[0.7]]]], dtype=np.float32)   # (1,3,1,1)
    wd0 = np.array([[0.3], [-0.5], [0.2]], dtype=np.float32)           # (3,1)
    cond = np.array([[[[0.9]], [[0.1]], [[0.5]]]], dtype=np.float32)
    target = np.array([[[0.2]], [[0.8]], [[0.6]]], dtype=np.float32)   # (3,1,1)

    gen, disc = ToyGen(wg0), ToyDisc(wd0)
    opt_g = Adam(gen.parameters(), lr, b1, b2, eps)
    opt_d = Adam(disc.parameters(), lr, b1, b2, eps)
    buf = ImageBuffer(50, RngState(0))
    sample = StageSample(conditions=ConditionSet(images=(cond,)), target=target,
                         masks={}, meta=SampleMeta("stage1", 0))
    report = train_step(gen, disc, gen.parameters(), disc.parameters(),
                        opt_g, opt_d, buf, loss_cfg, sample, 1)

    # hand-unrolled reference in float64
    cn = (2.0 * cond - 1.0).astype(np.float64)
    tn = (2.0 * target[None] - 1.0).astype(np.float64)
    fake = wg0.astype(np.float64) * cn
    s_real = (tn.reshape(1, 3) @ wd0.astype(np.float64)).item()
    s_fake = (fake.reshape(1, 3) @ wd0.astype(np.float64)).item()
    d_loss = 0.5 * (s_real - 1.0) ** 2 + 0.5 * s_fake**2
    gd = (2 * 0.5 * (s_real - 1.0) * tn.reshape(3, 1)
          + 2 * 0.5 * s_fake * fake.reshape(3, 1))
    wd1 = _hand_adam(wd0.astype(np.float64), gd, lr, b1, b2, eps)

    s_fake2 = (fake.reshape(1, 3) @ wd1).item()
    g_gan = (s_fake2 - 1.0) ** 2
    g_id = 10.0 * np.abs(fake - tn).mean()
    dfake = 2.0 * (s_fake2 - 1.0) * wd1.reshape(1, 3, 1, 1) + 10.0 * np.sign(fake - tn) / 3.0
    gw = dfake * cn
    wg1 = _hand_adam(wg0.astype(np.float64), gw, lr, b1, b2, eps)

    assert abs(report["d_loss"] - d_loss) < 1e-6
    assert abs(report["g_gan"] - g_gan) < 1e-6
    assert abs(report["g_id"] - g_id) < 1e-6
    assert np.allclose(disc.w.value, wd1, atol=1e-6)
    assert np.allclose(gen.w.value, wg1, atol=1e-6)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_train_step_aborts_on_non_finite_loss(tiny_dataset):
    tr = Trainer(small_cfg())
    tr.disc.fc2.weight.value = np.full_like(tr.disc.fc2.weight.value, 1e38)
    with pytest.raises(NumericError, match="step 1: d_loss"):
        tr.train_step(tiny_dataset[0])


# ---------------------------------------------------------------------------
# train loop


def test_train_epochs_zero_equals_init(tmp_path, tiny_dataset):
    cfg = small_cfg(epochs=0)
    ckpt, csv_path = train(cfg, tiny_dataset, tmp_path)
    assert csv_path.read_text() == "step,d_loss,g_gan,g_id\n"
    fresh = Trainer(cfg)
    for name, p in fresh.params_g:
        assert np.array_equal(ckpt.tensors[f"g.{name}"], p.value)
    assert ckpt.step == 0


def test_train_determinism_and_loss_direction(tmp_path, tiny_dataset):
    cfg = small_cfg(epochs=2)
    _, csv_a = train(cfg, tiny_dataset, tmp_path / "a")
    _, csv_b = train(cfg, tiny_dataset, tmp_path / "b")
    assert csv_a.read_bytes() == csv_b.read_bytes()
    rows = csv_a.read_text().splitlines()
    assert rows[0] == "step,d_loss,g_gan,g_id"
    assert len(rows) == 1 + 2 * len(tiny_dataset)
    assert all(np.isfinite(float(v)) for row in rows[1:] for v in row.split(",")[1:])


def test_train_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigError):
        train(small_cfg(), [], tmp_path)


def test_resume_equivalence(tmp_path, tiny_dataset):
    cfg = small_cfg(epochs=2, checkpoint_every=6)
    _, csv_full = train(cfg, tiny_dataset, tmp_path / "full")
    train(cfg, tiny_dataset, tmp_path / "part", resume=None)  # warm file layout
    _, csv_resumed = train(cfg, tiny_dataset, tmp_path / "resumed",
                           resume=tmp_path / "full" / "checkpoint_000006.pgan")
    full_rows = csv_full.read_text().splitlines()
    res_rows = csv_resumed.read_text().splitlines()
    assert res_rows[1:] == full_rows[7:]
    a = (tmp_path / "full" / "checkpoint_final.pgan").read_bytes()
    b = (tmp_path / "resumed" / "checkpoint_final.pgan").read_bytes()
    assert a == b


# ---------------------------------------------------------------------------
# checkpointing


def test_checkpoint_roundtrip_forward_identical(tmp_path, tiny_dataset):
    cfg = small_cfg()
    tr = Trainer(cfg)
    for s in tiny_dataset[:3]:
        tr.train_step(s)
    out = tr.generate(tiny_dataset[0].conditions)
    checkpoint_save(tmp_path / "ck.pgan", tr.to_checkpoint())
    restored = trainer_from_checkpoint(checkpoint_load(tmp_path / "ck.pgan"))
    out2 = restored.generate(tiny_dataset[0].conditions)
    assert np.array_equal(out, out2)
    assert restored.step == tr.step
    assert restored.rng.counter == tr.rng.counter


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pgan"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint_load(path)


def test_checkpoint_truncation(tmp_path, tiny_dataset):
    tr = Trainer(small_cfg())
    path = tmp_path / "ck.pgan"
    checkpoint_save(path, tr.to_checkpoint())
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointCorruptionError, match="truncated"):
        checkpoint_load(path)


def test_checkpoint_bad_version(tmp_path):
    tr = Trainer(small_cfg())
    ck = tr.to_checkpoint()
    ck.version = 9
    path = tmp_path / "v9.pgan"
    checkpoint_save(path, ck)
    with pytest.raises(CheckpointFormatError, match="version"):
        checkpoint_load(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(stage="stage9")
    with pytest.raises(ConfigError):
        TrainConfig(stage="stage1", image_size=48)
    with pytest.raises(ConfigError):
        TrainConfig(stage="stage1", image_size=16)
    with pytest.raises(ConfigError):
        TrainConfig(stage="stage1", batch_size=2)
