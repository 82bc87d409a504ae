"""Binary checkpoint files.

Layout: ``b"PCKP"``, version (u32 LE), header length (u32 LE), UTF-8 JSON
header, raw little-endian float64 parameters in canonical order, then a
CRC-32 (u32 LE) of every preceding byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prcnn.audio_frontend import NormStats, atomic_write
from prcnn.errors import CorruptionError, VersionError
from prcnn.model import ModelConfig, ModelParams

MAGIC = b"PCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    norm_stats: NormStats
    label_names: list[str]
    params: ModelParams
    version: int = VERSION
    extra: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    flat = np.ascontiguousarray(ckpt.params.flatten(), dtype="<f8").tobytes()
    header = {
        "config": ckpt.config.to_dict(),
        "labels": list(ckpt.label_names),
        "norm_stats": {"mean": ckpt.norm_stats.mean, "std": ckpt.norm_stats.std},
        "param_bytes": len(flat),
        "extra": ckpt.extra,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(hdr)) + hdr + flat
    return body + struct.pack("<I", zlib.crc32(body))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic or too short)")
    version, hdr_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (this build reads version {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError("checkpoint checksum mismatch; file is truncated or corrupted")
    start = 12 + hdr_len
    try:
        header = json.loads(data[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from None
    n = header["param_bytes"]
    if start + n != len(data) - 4:
        raise CorruptionError("checkpoint parameter block has the wrong length")
    config = ModelConfig.from_dict(header["config"])
    flat = np.frombuffer(data, dtype="<f8", count=n // 8, offset=start).astype(np.float64)
    params = ModelParams.unflatten(config, flat)
    stats = NormStats(header["norm_stats"]["mean"], header["norm_stats"]["std"])
    return Checkpoint(config, stats, header["labels"], params, version, header.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
