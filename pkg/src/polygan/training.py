"""Alternating generator/discriminator training with a replay image buffer.

One step = one D update (real target vs. a buffered fake) followed by one G
update (least-squares GAN term plus L1 identity term) on the current fake.
The fake handed to the discriminator is detached from the generator graph;
during the G update the discriminator's parameters are frozen so gradients
flow through it but only the generator moves.

Everything is deterministic in (seed, config, dataset): epoch order comes
from a per-epoch derived stream, buffer decisions from the trainer stream,
and checkpoints capture parameters, both Adam states, the buffer contents
and the stream counter, so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .data import STAGE_CONDITION_CHANNELS, StageSample
from .errors import ConfigError, NumericError
from .layers import Adam, Tape
from .losses import (LossConfig, discriminator_loss, generator_gan_loss,
                     identity_loss, total_generator_loss)
from .network import (ConditionSet, DiscriminatorSpec, GeneratorSpec,
                      build_discriminator, build_generator)
from .rng import RngState
from .tensor import Tensor


def to_net(img: Tensor) -> Tensor:
    """[0,1] image -> [-1,1] network space."""
    return (img.astype(np.float32) * 2.0 - 1.0).astype(np.float32)


def from_net(img: Tensor) -> Tensor:
    """[-1,1] network output -> [0,1] image space."""
    return np.clip((img.astype(np.float32) + 1.0) * 0.5, 0.0, 1.0)


@dataclass
class TrainConfig:
    stage: str
    image_size: int = 128
    epochs: int = 1
    seed: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    base_width: int = 64
    disc_base: int = 64
    head_width: int = 1024
    buffer_capacity: int = 50
    checkpoint_every: int = 500
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage not in STAGE_CONDITION_CHANNELS:
            raise ConfigError(f"unknown training stage {self.stage!r}")
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 32, got {s}")
        if self.epochs < 0 or self.checkpoint_every < 1 or self.buffer_capacity < 1:
            raise ConfigError("epochs/checkpoint_every/buffer_capacity out of range")
        if self.batch_size != 1:
            raise ConfigError("only batch size 1 is supported")


class ImageBuffer:
    """Replay history of generated images.

    While filling, every incoming image is stored and returned as-is.  Once
    full, a fair coin decides between returning the incoming image unchanged
    and swapping it against a uniformly drawn stored one.
    """

    def __init__(self, capacity: int = 50, rng: Optional[RngState] = None):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = rng if rng is not None else RngState(0)
        self.store: List[Tensor] = []

    def query(self, incoming: Tensor) -> Tensor:
        if len(self.store) < self.capacity:
            self.store.append(incoming)
            return incoming
        if float(self.rng.uniform(1)[0]) < 0.5:
            return incoming
        i = self.rng.randint(self.capacity)
        out = self.store[i]
        self.store[i] = incoming
        return out


def specs_for(cfg: TrainConfig) -> Tuple[GeneratorSpec, DiscriminatorSpec]:
    cond_ch = STAGE_CONDITION_CHANNELS[cfg.stage]
    gspec = GeneratorSpec.for_size(cfg.image_size, cond_ch, base_width=cfg.base_width)
    dspec = DiscriminatorSpec.for_size(cfg.image_size, base_width=cfg.disc_base,
                                       head_width=cfg.head_width)
    return gspec, dspec


def discriminator_update(disc, params_d, opt_d, buffer: ImageBuffer, loss_cfg: LossConfig,
                         target_n: Tensor, fake_detached: Tensor, step: int) -> float:
    """One D half-step: real target vs. a buffered detached fake."""
    tape = Tape(trainable=[p for _, p in params_d])
    d_real = disc.forward(ad.leaf(target_n), tape)
    buffered = buffer.query(fake_detached)
    d_fake = disc.forward(ad.leaf(buffered), tape)
    loss = discriminator_loss(d_real, d_fake, loss_cfg)
    if not np.isfinite(loss.value):
        raise NumericError(f"step {step}: d_loss is not finite")
    ad.backward(loss)
    opt_d.step({name: tape.grad(p) for name, p in params_d})
    return float(loss.value)


def generator_update(disc, params_g, opt_g, loss_cfg: LossConfig,
                     fake: ad.Node, tape_g: Tape, target_n: Tensor, step: int) -> Tuple[float, float]:
    """One G half-step on the current fake; disc params are frozen on tape_g,
    so gradients flow through the discriminator but only G moves."""
    d_out = disc.forward(fake, tape_g)
    g_gan = generator_gan_loss(d_out, loss_cfg)
    g_id = identity_loss(fake, ad.leaf(target_n), loss_cfg)
    total = total_generator_loss(g_gan, g_id)
    for name, node in (("g_gan", g_gan), ("g_id", g_id)):
        if not np.isfinite(node.value):
            raise NumericError(f"step {step}: {name} is not finite")
    ad.backward(total)
    opt_g.step({name: tape_g.grad(p) for name, p in params_g})
    return float(g_gan.value), float(g_id.value)


def train_step(gen, disc, params_g, params_d, opt_g, opt_d, buffer: ImageBuffer,
               loss_cfg: LossConfig, sample: StageSample, step: int) -> Dict[str, float]:
    """One full alternation: D update, then G update, on one [0,1]-space sample."""
    conds = ConditionSet(images=tuple(to_net(im) for im in sample.conditions.images))
    target_n = to_net(sample.target)[None]
    tape_g = Tape(trainable=[p for _, p in params_g])
    fake = gen.forward(conds, tape_g)
    d_loss = discriminator_update(disc, params_d, opt_d, buffer, loss_cfg,
                                  target_n, fake.value.copy(), step)
    g_gan, g_id = generator_update(disc, params_g, opt_g, loss_cfg,
                                   fake, tape_g, target_n, step)
    return {"d_loss": d_loss, "g_gan": g_gan, "g_id": g_id}


class Trainer:
    def __init__(self, cfg: TrainConfig, config_echo: Optional[Dict[str, str]] = None):
        self.cfg = cfg
        self.config_echo = dict(config_echo) if config_echo else default_config_echo(cfg)
        gspec, dspec = specs_for(cfg)
        root = RngState(cfg.seed)
        self.gen = build_generator(gspec, root.child("init_g"))
        self.disc = build_discriminator(dspec, root.child("init_d"))
        self.params_g = self.gen.parameters()
        self.params_d = self.disc.parameters()
        self.opt_g = Adam(self.params_g, cfg.lr, cfg.beta1, cfg.beta2)
        self.opt_d = Adam(self.params_d, cfg.lr, cfg.beta1, cfg.beta2)
        self.rng = root.child("train")
        self.buffer = ImageBuffer(cfg.buffer_capacity, self.rng)
        self.step = 0

    def train_step(self, sample: StageSample) -> Dict[str, float]:
        report = train_step(self.gen, self.disc, self.params_g, self.params_d,
                            self.opt_g, self.opt_d, self.buffer, self.cfg.loss,
                            sample, self.step + 1)
        self.step += 1
        return report

    # -- inference ---------------------------------------------------------

    def generate(self, conditions: ConditionSet) -> Tensor:
        """Run the generator on [0,1]-space conditions; returns a (3,H,W) [0,1] image."""
        conds = ConditionSet(images=tuple(to_net(im) for im in conditions.images))
        return from_net(self.gen.forward(conds).value[0])

    # -- checkpointing ------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        tensors: Dict[str, Tensor] = {}
        for name, p in self.params_g:
            tensors[f"g.{name}"] = p.value
        for name, p in self.params_d:
            tensors[f"d.{name}"] = p.value
        for key, arr in self.opt_g.state_tensors().items():
            tensors[f"adam_g.{key}"] = arr
        for key, arr in self.opt_d.state_tensors().items():
            tensors[f"adam_d.{key}"] = arr
        for i, img in enumerate(self.buffer.store):
            tensors[f"buffer.{i}"] = img
        return Checkpoint(
            config=dict(self.config_echo), step=self.step,
            rng_seed=self.rng.seed, rng_counter=self.rng.counter,
            adam_t_g=self.opt_g.t, adam_t_d=self.opt_d.t, tensors=tensors)

    def restore(self, ckpt: Checkpoint):
        gt = ckpt.subset("g")
        dt = ckpt.subset("d")
        for name, p in self.params_g:
            p.value = gt[name].astype(p.value.dtype)
        for name, p in self.params_d:
            p.value = dt[name].astype(p.value.dtype)
        self.opt_g.load_state_tensors(ckpt.subset("adam_g"), ckpt.adam_t_g)
        self.opt_d.load_state_tensors(ckpt.subset("adam_d"), ckpt.adam_t_d)
        buf = ckpt.subset("buffer")
        self.buffer.store = [buf[str(i)] for i in range(len(buf))]
        self.rng = RngState(ckpt.rng_seed, ckpt.rng_counter)
        self.buffer.rng = self.rng
        self.step = ckpt.step


def default_config_echo(cfg: TrainConfig) -> Dict[str, str]:
    echo = {}
    for f in fields(TrainConfig):
        if f.name == "loss":
            continue
        echo[f.name] = str(getattr(cfg, f.name))
    for f in fields(LossConfig):
        echo[f.name] = str(getattr(cfg.loss, f.name))
    return echo


def train_config_from_echo(echo: Dict[str, str]) -> TrainConfig:
    """Rebuild enough of a TrainConfig from a checkpoint's config echo to
    reconstruct the architecture."""
    def get(key, cast, default):
        return cast(echo[key]) if key in echo else default

    loss = LossConfig(
        lambda1=get("lambda1", float, 0.5), lambda2=get("lambda2", float, 0.5),
        lambda3=get("lambda3", float, 1.0), lambda4=get("lambda4", float, 10.0))
    return TrainConfig(
        stage=echo["stage"], image_size=int(echo["image_size"]),
        epochs=get("epochs", int, 1), seed=get("seed", int, 0),
        lr=get("lr", float, 2e-4), beta1=get("beta1", float, 0.5),
        beta2=get("beta2", float, 0.999),
        base_width=get("base_width", int, 64), disc_base=get("disc_base", int, 64),
        head_width=get("head_width", int, 1024),
        buffer_capacity=get("buffer_capacity", int, 50),
        checkpoint_every=get("checkpoint_every", int, 500), loss=loss)


def trainer_from_checkpoint(ckpt: Checkpoint) -> Trainer:
    trainer = Trainer(train_config_from_echo(ckpt.config), config_echo=ckpt.config)
    trainer.restore(ckpt)
    return trainer


LOSS_CSV_HEADER = "step,d_loss,g_gan,g_id"


def train(cfg: TrainConfig, dataset, out_dir, resume: Optional[str] = None,
          config_echo: Optional[Dict[str, str]] = None,
          progress: Optional[int] = None) -> Tuple[Checkpoint, Path]:
    """Run epochs*len(dataset) steps; returns (final checkpoint, loss CSV path).

    Writes checkpoint_<step>.pgan every cfg.checkpoint_every steps plus
    checkpoint_final.pgan, and losses.csv with one row per executed step.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, config_echo=config_echo)
    if resume is not None:
        trainer.restore(checkpoint_load(resume))
    total = cfg.epochs * len(dataset)
    csv_path = out / "losses.csv"
    epoch_rng_root = RngState(cfg.seed)
    with open(csv_path, "w") as fh:
        fh.write(LOSS_CSV_HEADER + "\n")
        while trainer.step < total:
            epoch = trainer.step // len(dataset)
            order = epoch_rng_root.child(f"shuffle{epoch}").shuffled_indices(len(dataset))
            for i in order[trainer.step % len(dataset):]:
                report = trainer.train_step(dataset[int(i)])
                fh.write(f"{trainer.step},{report['d_loss']!r},{report['g_gan']!r},{report['g_id']!r}\n")
                if progress and trainer.step % progress == 0:
                    print(f"step {trainer.step}/{total} "
                          f"d={report['d_loss']:.4f} gan={report['g_gan']:.4f} id={report['g_id']:.4f}",
                          flush=True)
                if trainer.step % cfg.checkpoint_every == 0:
                    checkpoint_save(out / f"checkpoint_{trainer.step:06d}.pgan", trainer.to_checkpoint())
                if trainer.step >= total:
                    break
    final = trainer.to_checkpoint()
    checkpoint_save(out / "checkpoint_final.pgan", final)
    return final, csv_path
