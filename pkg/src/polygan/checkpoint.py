"""Binary checkpoint serialization.

Layout (all little-endian):

    magic b"PGAN" | u16 version | u32 header_len | header UTF-8
    u32 tensor_count | tensor records...

The header is `key=value` lines carrying the config echo plus integer state
(step, rng seed/counter, Adam step counters, buffer fill).  Each tensor
record is: u16 name_len | name UTF-8 | u8 rank | rank * u32 extents |
float32 data.  Saving and loading round-trips training state bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointCorruptionError, CheckpointFormatError
from .tensor import Tensor

MAGIC = b"PGAN"
VERSION = 1


@dataclass
class Checkpoint:
    config: Dict[str, str]
    step: int
    rng_seed: int
    rng_counter: int
    adam_t_g: int
    adam_t_d: int
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    version: int = VERSION

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        """Tensors under `prefix.`, with the prefix stripped."""
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


_INT_KEYS = ("step", "rng_seed", "rng_counter", "adam_t_g", "adam_t_d")


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    lines = [f"{k}={v}" for k, v in sorted(ckpt.config.items())]
    lines += [f"@{k}={getattr(ckpt, k)}" for k in _INT_KEYS]
    header = "\n".join(lines).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", ckpt.version, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointCorruptionError(f"truncated checkpoint while reading {what}")
    return data


def checkpoint_load(path) -> Checkpoint:
    with open(Path(path), "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, header_len = struct.unpack("<HI", _read_exact(fh, 6, "version/header length"))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        header = _read_exact(fh, header_len, "header").decode("utf-8")
        config: Dict[str, str] = {}
        ints = {k: 0 for k in _INT_KEYS}
        for line in header.splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            if key.startswith("@"):
                name = key[1:]
                if name not in ints:
                    raise CheckpointCorruptionError(f"unknown state key {name!r} in header")
                ints[name] = int(value)
            else:
                config[key] = value
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: Dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 4 * n, f"data of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointCorruptionError("trailing bytes after last tensor record")
    return Checkpoint(config=config, tensors=tensors, version=version, **ints)
