"""8-bit PNG read/write with byte-stable encoding.

Images are (3|4, H, W) float arrays in [0, 1]; writing quantizes to the 8-bit
grid, so values already on that grid round-trip exactly.  Only 8-bit RGB and
RGBA files are accepted on read; anything else (16-bit, palette, grayscale)
is an unsupported format.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

# fixed encoder settings so re-runs are byte-identical
_COMPRESS_LEVEL = 6


def png_write(path, img: Tensor) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (3, 4):
        raise ShapeError(f"png_write: want (3|4, H, W), got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    mode = "RGB" if img.shape[0] == 3 else "RGBA"
    Image.fromarray(np.transpose(data, (1, 2, 0)), mode=mode).save(
        Path(path), format="PNG", optimize=False, compress_level=_COMPRESS_LEVEL)


def png_read(path, channels: Optional[int] = None) -> Tensor:
    """Read an 8-bit RGB/RGBA PNG into (C, H, W) floats in [0, 1].

    channels=3 drops the alpha channel of RGBA input (with a warning);
    channels=4 demands RGBA.
    """
    try:
        with Image.open(Path(path)) as im:
            im.load()
            mode = im.mode
            if mode not in ("RGB", "RGBA"):
                raise DecodeError(f"unsupported format: mode {mode!r} (need 8-bit RGB/RGBA): {path}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise DecodeError(f"not a decodable PNG: {path}") from e
    out = np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0
    if channels == 3 and out.shape[0] == 4:
        log.warning("dropping alpha channel of RGBA image %s", path)
        out = out[:3]
    elif channels == 4 and out.shape[0] == 3:
        raise DecodeError(f"alpha channel required but {path} is RGB")
    elif channels is not None and out.shape[0] != channels:
        raise DecodeError(f"{path}: has {out.shape[0]} channels, wanted {channels}")
    return np.ascontiguousarray(out)
