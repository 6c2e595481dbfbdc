"""Binary checkpoint format.

Layout (little-endian)::

    b"DSVAE1" | u32 version | u32 len | config text (UTF-8 key=value lines)
    repeated until EOF:
        u32 len | name (UTF-8) | u32 rank | u32 extents[rank] | f64 payload (row-major)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DSVAE1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def format_config(config: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.items())


def parse_config_text(text: str) -> "OrderedDict[str, str]":
    out = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def encode_checkpoint(params: dict, config: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = format_config(config).encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple["OrderedDict[str, str]", "OrderedDict[str, np.ndarray]"]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a DSVAE1 checkpoint")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = parse_config_text(take(n).decode("utf-8"))
    params = OrderedDict()
    while pos < len(blob):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = arr.astype(np.float64)
    return config, params


def save_checkpoint(path, params: dict, config: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
