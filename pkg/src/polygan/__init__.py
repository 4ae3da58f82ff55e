"""Multi-conditioned encoder-decoder GAN with a four-stage garment pipeline,
built on an in-package tensor/autodiff core and a procedural synthetic world."""

__version__ = "0.1.0"
