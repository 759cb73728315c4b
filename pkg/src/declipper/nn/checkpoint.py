"""Binary checkpoints.

Layout (all integers little-endian)::

    b"UNDC"            magic
    u32                format version
    u32 n + n bytes    UNetConfig as UTF-8 JSON
    per conv layer, in UNet.layers() order:
        float64[...]   weights (out, in, k, k), then biases (out,)
    u32                CRC-32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .unet import UNet, UNetConfig

MAGIC = b"UNDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def save_model(model: UNet, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    for conv in model.layers():
        parts.append(conv.weight.astype("<f8").tobytes())
        parts.append(conv.bias.astype("<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path, expected: UNetConfig | None = None) -> UNet:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a U-Net checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack("<I", body[8:12])
    try:
        config = UNetConfig(**json.loads(body[12 : 12 + n].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad config block") from exc
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} != expected {expected}")
    model = UNet(config, seed=None)
    pos = 12 + n
    for conv in model.layers():
        for arr in (conv.weight, conv.bias):
            nbytes = arr.size * 8
            if pos + nbytes > len(body):
                raise CorruptCheckpointError(f"{path}: parameter data ends early")
            arr[...] = np.frombuffer(body[pos : pos + nbytes], dtype="<f8").reshape(arr.shape)
            pos += nbytes
    if pos != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes after parameters")
    return model
