"""Least-squares adversarial objective plus L1 identity term.

The discriminator minimizes
    lambda1 * mean((D(real) - R)^2) + lambda2 * mean((D(fake) - F)^2)
and the generator minimizes
    lambda3 * mean((D(G(...)) - R)^2) + lambda4 * mean(|G(...) - target|)
with real/fake labels R=1, F=0.  Every expectation is a mean so the lambdas
are independent of batch and spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 1.0
    lambda4: float = 10.0
    real_label: float = 1.0
    fake_label: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.real_label == self.fake_label:
            raise ConfigError("real and fake labels must differ")


def _label_like(scores: Node, label: float) -> Node:
    return ad.leaf(np.full(scores.value.shape, label, dtype=scores.value.dtype))


def discriminator_loss(d_real: Node, d_fake: Node, cfg: LossConfig) -> Node:
    """lambda1 * mean((d_real - R)^2) + lambda2 * mean((d_fake - F)^2)."""
    real_term = ad.scale(ad.l2(d_real, _label_like(d_real, cfg.real_label)), cfg.lambda1)
    fake_term = ad.scale(ad.l2(d_fake, _label_like(d_fake, cfg.fake_label)), cfg.lambda2)
    return ad.add(real_term, fake_term)


def generator_gan_loss(d_fake: Node, cfg: LossConfig) -> Node:
    """lambda3 * mean((d_fake - R)^2)."""
    return ad.scale(ad.l2(d_fake, _label_like(d_fake, cfg.real_label)), cfg.lambda3)


def identity_loss(generated: Node, target: Node, cfg: LossConfig) -> Node:
    """lambda4 * mean(|generated - target|)."""
    return ad.scale(ad.l1(generated, target), cfg.lambda4)


def total_generator_loss(gan: Node, identity: Node) -> Node:
    return ad.add(gan, identity)
