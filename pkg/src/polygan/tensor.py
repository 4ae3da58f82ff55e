"""Dense tensor values and factories.

Tensors are plain C-contiguous numpy arrays (row-major, so flat index of a
multi-index follows the usual stride formula).  Two precisions are used:
float32 for training, float64 for gradient verification.  Tensors are treated
as immutable once built; every op allocates its output.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .rng import RngState

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64

Tensor = np.ndarray


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be >= 1")
    return shape


def zeros(shape, dtype=TRAIN_DTYPE) -> Tensor:
    return np.zeros(check_shape(shape), dtype=dtype)


def full(shape, v: float, dtype=TRAIN_DTYPE) -> Tensor:
    return np.full(check_shape(shape), v, dtype=dtype)


def randn(shape, rng: RngState, dtype=TRAIN_DTYPE) -> Tensor:
    """I.i.d. standard normals, deterministic given the rng state."""
    shape = check_shape(shape)
    n = int(np.prod(shape))
    return rng.normal(n).reshape(shape).astype(dtype)


def as_tensor(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim > 0:
        check_shape(arr.shape)
        arr = np.ascontiguousarray(arr)  # keep 0-d arrays 0-d
    return arr
