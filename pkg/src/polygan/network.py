"""Generator and discriminator architectures.

The generator is an encoder-decoder.  Every encoder stage re-ingests the full
condition stack: the stack is average-pooled to the stage resolution, run
through that stage's condition encoder (three conv+ReLU layers), and the
result is concatenated with the residual-block features before a two-layer
conv+instance-norm fusion.  Skip connections run only from the coarse encoder
stages (4x4/8x8/16x16) to the matching decoder stages; requesting a skip at
any finer resolution is rejected.

The discriminator is a strided conv stack with leaky ReLUs and a
flatten/dense head producing one unbounded score per batch element (no
sigmoid: the losses are least-squares on raw scores).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ShapeError, SpecError
from .layers import (Conv2d, ConvTranspose2d, InstanceNorm, Linear,
                     Module, Tape, avg_pool2d)
from .rng import RngState
from .tensor import TRAIN_DTYPE, Tensor

COARSE_SKIP_LIMIT = 16
WIDTH_CAP_EXP = 3  # widths grow base * 2^min(stage, 3)


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """Ordered condition images, each (B, c_i, H, W).

    Order is part of the identity: permuting the images gives an unequal set,
    and the network consumes the stack in the given order.
    """

    images: Tuple[Tensor, ...]

    def __post_init__(self):
        if not self.images:
            raise ShapeError("ConditionSet: need at least one condition image")
        object.__setattr__(self, "images", tuple(np.asarray(im) for im in self.images))
        first = self.images[0]
        if first.ndim != 4:
            raise ShapeError(f"ConditionSet: images must be (B,C,H,W), got {first.shape}")
        for im in self.images[1:]:
            if im.ndim != 4 or im.shape[0] != first.shape[0] or im.shape[2:] != first.shape[2:]:
                raise ShapeError(
                    f"ConditionSet: image shapes {[i.shape for i in self.images]} disagree on B/H/W"
                )

    @property
    def channels(self) -> int:
        return sum(im.shape[1] for im in self.images)

    @property
    def batch(self) -> int:
        return self.images[0].shape[0]

    @property
    def size(self) -> int:
        return self.images[0].shape[2]

    def __eq__(self, other):
        if not isinstance(other, ConditionSet):
            return NotImplemented
        return len(self.images) == len(other.images) and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.images, other.images)
        )


def _halving(resolutions: Sequence[int]) -> bool:
    return all(a == 2 * b for a, b in zip(resolutions, resolutions[1:]))


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int
    condition_channels: int
    base_width: int = 64
    resolutions: Tuple[int, ...] = (128, 64, 32, 16, 8, 4)
    skip_resolutions: Tuple[int, ...] = (16, 8, 4)
    output_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "skip_resolutions",
                           tuple(sorted({int(r) for r in self.skip_resolutions}, reverse=True)))
        if self.input_channels != self.condition_channels:
            raise SpecError("generator input is the condition stack; channel counts must match")
        if len(self.resolutions) < 2 or not _halving(self.resolutions):
            raise SpecError(f"resolutions must strictly halve, got {self.resolutions}")
        if self.skip_resolutions and max(self.skip_resolutions) > COARSE_SKIP_LIMIT:
            raise SpecError(
                f"skip connections above {COARSE_SKIP_LIMIT}x{COARSE_SKIP_LIMIT} are rejected "
                f"(requested {self.skip_resolutions})")
        if not set(self.skip_resolutions) <= set(self.resolutions):
            raise SpecError(f"skip resolutions {self.skip_resolutions} not all in {self.resolutions}")
        if self.base_width < 1 or self.output_channels < 1:
            raise SpecError("base_width and output_channels must be positive")

    @classmethod
    def for_size(cls, size: int, condition_channels: int, base_width: int = 64,
                 output_channels: int = 3) -> "GeneratorSpec":
        if size < 8 or size & (size - 1):
            raise SpecError(f"image size must be a power of two >= 8, got {size}")
        resolutions = []
        r = size
        while r >= 4:
            resolutions.append(r)
            r //= 2
        skips = tuple(r for r in resolutions if r <= COARSE_SKIP_LIMIT)
        return cls(input_channels=condition_channels, condition_channels=condition_channels,
                   base_width=base_width, resolutions=tuple(resolutions),
                   skip_resolutions=skips, output_channels=output_channels)

    def width(self, stage: int) -> int:
        return self.base_width * (2 ** min(stage, WIDTH_CAP_EXP))

    @property
    def image_size(self) -> int:
        return self.resolutions[0]


class ResNetBlock(Module):
    """Two 3x3 conv + instance-norm layers with an identity shortcut."""

    def __init__(self, channels: int, rng: RngState, dtype=TRAIN_DTYPE):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng.child("conv1"), dtype)
        self.norm1 = InstanceNorm(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng.child("conv2"), dtype)
        self.norm2 = InstanceNorm(channels, dtype=dtype)

    def forward(self, x: Node, tape: Tape) -> Node:
        h = ad.relu(self.norm1.forward(self.conv1.forward(x, tape), tape))
        h = self.norm2.forward(self.conv2.forward(h, tape), tape)
        return ad.relu(ad.add(x, h))


class CondConvModule(Module):
    """Condition encoder: three 3x3 convolutions, each followed by ReLU."""

    def __init__(self, cond_ch: int, out_ch: int, rng: RngState, dtype=TRAIN_DTYPE):
        self.conv1 = Conv2d(cond_ch, out_ch, 3, 1, 1, rng.child("conv1"), dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng.child("conv2"), dtype)
        self.conv3 = Conv2d(out_ch, out_ch, 3, 1, 1, rng.child("conv3"), dtype)

    def forward(self, cond: Node, tape: Tape) -> Node:
        h = ad.relu(self.conv1.forward(cond, tape))
        h = ad.relu(self.conv2.forward(h, tape))
        h = ad.relu(self.conv3.forward(h, tape))
        h.tag = "cond_inject"
        return h


class ConvNormModule(Module):
    """Feature fusion: two convolutions, each with instance norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: RngState, dtype=TRAIN_DTYPE):
        self.conv1 = Conv2d(in_ch, out_ch, 3, 1, 1, rng.child("conv1"), dtype)
        self.norm1 = InstanceNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng.child("conv2"), dtype)
        self.norm2 = InstanceNorm(out_ch, dtype=dtype)

    def forward(self, x: Node, tape: Tape) -> Node:
        h = ad.relu(self.norm1.forward(self.conv1.forward(x, tape), tape))
        return ad.relu(self.norm2.forward(self.conv2.forward(h, tape), tape))


class EncoderStage(Module):
    """Residual trunk + condition encoder + fusion at one resolution."""

    def __init__(self, width: int, cond_ch: int, rng: RngState, dtype=TRAIN_DTYPE):
        self.resnet = ResNetBlock(width, rng.child("resnet"), dtype)
        self.cond_conv_module = CondConvModule(cond_ch, width, rng.child("cond"), dtype)
        self.conv_norm_module = ConvNormModule(2 * width, width, rng.child("fuse"), dtype)

    def forward(self, x: Node, cond: Node, tape: Tape) -> Node:
        feats = self.resnet.forward(x, tape)
        c = self.cond_conv_module.forward(cond, tape)
        return self.conv_norm_module.forward(ad.concat([feats, c], axis=1), tape)


class Generator(Module):
    """Encoder-decoder generator; a deterministic function of its conditions."""

    def __init__(self, spec: GeneratorSpec, rng: RngState, dtype=TRAIN_DTYPE):
        self.spec = spec
        self.dtype = dtype
        res = spec.resolutions
        nstages = len(res)
        self.stem = Conv2d(spec.condition_channels, spec.width(0), 3, 1, 1, rng.child("stem"), dtype)
        self.enc_stages = [
            EncoderStage(spec.width(s), spec.condition_channels, rng.child(f"enc{s}"), dtype)
            for s in range(nstages)
        ]
        self.downs = [
            Conv2d(spec.width(s), spec.width(s + 1), 4, 2, 1, rng.child(f"down{s}"), dtype)
            for s in range(nstages - 1)
        ]
        self.dec_resnets = [
            ResNetBlock(spec.width(s), rng.child(f"dec{s}"), dtype) for s in range(nstages)
        ]
        self.skip_fuses = [
            Conv2d(2 * spec.width(s), spec.width(s), 1, 1, 0, rng.child(f"skipfuse{r}"), dtype)
            for s, r in enumerate(res) if r in spec.skip_resolutions
        ]
        self._skip_index = {r: i for i, r in enumerate(r for r in res if r in spec.skip_resolutions)}
        self.ups = [
            ConvTranspose2d(spec.width(s), spec.width(s - 1), 4, 2, 1, rng.child(f"up{s}"), dtype)
            for s in range(1, nstages)
        ]
        self.head = Conv2d(spec.width(0), spec.output_channels, 3, 1, 1, rng.child("head"), dtype)

    def forward(self, conditions: ConditionSet, tape: Optional[Tape] = None) -> Node:
        tape = tape if tape is not None else Tape()
        spec = self.spec
        if conditions.channels != spec.condition_channels:
            raise ShapeError(
                f"condition stack has {conditions.channels} channels, spec expects {spec.condition_channels}")
        if conditions.images[0].shape[2] != spec.image_size or conditions.images[0].shape[3] != spec.image_size:
            raise ShapeError(
                f"condition resolution {conditions.images[0].shape[2:]} != spec {spec.image_size}")
        stack = ad.concat([ad.leaf(im.astype(self.dtype, copy=False)) for im in conditions.images], axis=1)

        trunk = ad.relu(self.stem.forward(stack, tape))
        skips: Dict[int, Node] = {}
        res = spec.resolutions
        for s, r in enumerate(res):
            cond_r = avg_pool2d(stack, spec.image_size // r)
            trunk = self.enc_stages[s].forward(trunk, cond_r, tape)
            if r in spec.skip_resolutions:
                skips[r] = trunk
            if s < len(res) - 1:
                trunk = ad.relu(self.downs[s].forward(trunk, tape))

        dec = trunk
        for s in range(len(res) - 1, -1, -1):
            r = res[s]
            dec = self.dec_resnets[s].forward(dec, tape)
            if r in skips:
                merged = ad.concat([dec, skips[r]], axis=1)
                merged.tag = f"skip@{r}"
                dec = self.skip_fuses[self._skip_index[r]].forward(merged, tape)
            if s > 0:
                dec = ad.relu(self.ups[s - 1].forward(dec, tape))
        return ad.tanh(self.head.forward(dec, tape))


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Strided conv stack widths/strides plus the dense head width."""

    input_size: int
    in_channels: int = 3
    widths: Tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512, 512)
    strides: Tuple[int, ...] = (1, 2, 1, 2, 1, 2, 1, 2)
    head_width: int = 1024

    def __post_init__(self):
        if len(self.widths) != len(self.strides) or not self.widths:
            raise SpecError("widths and strides must be equal-length and nonempty")
        if self.final_extent < 1:
            raise SpecError(f"conv stack collapses a {self.input_size}-pixel input")

    @classmethod
    def for_size(cls, size: int, base_width: int = 64, head_width: int = 1024,
                 in_channels: int = 3) -> "DiscriminatorSpec":
        blocks = {32: 4, 64: 6}.get(size, 8)
        full = [base_width, base_width, 2 * base_width, 2 * base_width,
                4 * base_width, 4 * base_width, 8 * base_width, 8 * base_width]
        return cls(input_size=size, in_channels=in_channels,
                   widths=tuple(full[:blocks]), strides=(1, 2, 1, 2, 1, 2, 1, 2)[:blocks],
                   head_width=head_width)

    @property
    def final_extent(self) -> int:
        e = self.input_size
        for s in self.strides:
            e = (e + 2 - 3) // s + 1  # 3x3 conv, pad 1
        return e


class Discriminator(Module):
    """Conv stack + dense head scoring images (no conditions, linear output)."""

    def __init__(self, spec: DiscriminatorSpec, rng: RngState, dtype=TRAIN_DTYPE):
        self.spec = spec
        self.dtype = dtype
        self.convs = []
        in_ch = spec.in_channels
        for i, (w, s) in enumerate(zip(spec.widths, spec.strides)):
            self.convs.append(Conv2d(in_ch, w, 3, s, 1, rng.child(f"conv{i}"), dtype))
            in_ch = w
        # first block is conv+activation only; the rest carry instance norm
        self._norm_list = [InstanceNorm(w, dtype=dtype) for w in spec.widths[1:]]
        flat = spec.widths[-1] * spec.final_extent * spec.final_extent
        self.fc1 = Linear(flat, spec.head_width, rng.child("fc1"), dtype)
        self.fc2 = Linear(spec.head_width, 1, rng.child("fc2"), dtype)

    def forward(self, image: Node, tape: Optional[Tape] = None) -> Node:
        tape = tape if tape is not None else Tape()
        spec = self.spec
        if image.value.ndim != 4 or image.value.shape[1] != spec.in_channels:
            raise ShapeError(f"discriminator: want (B,{spec.in_channels},H,W), got {image.value.shape}")
        if image.value.shape[2] != spec.input_size or image.value.shape[3] != spec.input_size:
            raise ShapeError(
                f"discriminator: input extent {image.value.shape[2:]} != spec {spec.input_size}")
        h = image
        for i, conv in enumerate(self.convs):
            h = conv.forward(h, tape)
            if i > 0:
                h = self._norm_list[i - 1].forward(h, tape)
            h = ad.leaky_relu(h, 0.2)
        b = h.value.shape[0]
        flat = Node(h.value.reshape(b, -1), "reshape", (h,),
                    vjp=lambda g: (g.reshape(h.value.shape),))
        score = ad.leaky_relu(self.fc1.forward(flat, tape), 0.2)
        return self.fc2.forward(score, tape)


def build_generator(spec: GeneratorSpec, rng: RngState, dtype=TRAIN_DTYPE) -> Generator:
    return Generator(spec, rng.child("generator"), dtype)


def build_discriminator(spec: DiscriminatorSpec, rng: RngState, dtype=TRAIN_DTYPE) -> Discriminator:
    return Discriminator(spec, rng.child("discriminator"), dtype)


@dataclass
class AuditReport:
    encoder_stages: int
    condition_injections: int
    skip_resolutions: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    output_min: float
    output_max: float


def audit_generator(gen: Generator, batch: int = 1) -> AuditReport:
    """Run a dummy forward pass and count condition injections and skip
    concatenations by walking the produced graph."""
    spec = gen.spec
    size = spec.image_size
    dummy = ConditionSet(images=(
        np.zeros((batch, spec.condition_channels, size, size), dtype=gen.dtype),))
    out = gen.forward(dummy)
    tags = ad.walk_tags(out)
    skips = sorted(
        (int(t.split("@")[1]) for t in tags if t.startswith("skip@")), reverse=True)
    return AuditReport(
        encoder_stages=len(spec.resolutions),
        condition_injections=sum(1 for t in tags if t == "cond_inject"),
        skip_resolutions=tuple(skips),
        output_shape=tuple(out.value.shape),
        output_min=float(out.value.min()),
        output_max=float(out.value.max()),
    )
