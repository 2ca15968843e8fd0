"""Model checkpoint container.

Layout (little-endian):

    magic  "MCKP"
    u16    format version
    u32    config block length, then that many bytes of UTF-8 key=value
           lines (one per model-config field)
    u32    tensor count, then per tensor:
               u16  name length, name bytes
               u8   ndim, u32 dims...
               f32  payload (C order)
               u32  CRC32 of the payload bytes

Round trips are bit-exact. Loading verifies the magic, version, every CRC,
and that the stored tensor set matches the config's parameter table exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .model import ModelConfig, parameter_names
from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"MCKP"
_VERSION = 1


def _config_block(config: ModelConfig) -> bytes:
    lines = [f"{f.name}={getattr(config, f.name)!r}" for f in fields(config)]
    return "\n".join(lines).encode("utf-8")


def _parse_config_block(blob: bytes) -> ModelConfig:
    kwargs = {}
    declared = {f.name: str(f.type) for f in fields(ModelConfig)}
    for line in blob.decode("utf-8").splitlines():
        name, _, raw = line.partition("=")
        if name not in declared:
            raise FormatError(f"checkpoint config has unknown field {name!r}")
        kwargs[name] = float(raw) if declared[name] == "float" else int(raw)
    missing = set(declared) - set(kwargs)
    if missing:
        raise FormatError(f"checkpoint config is missing fields {sorted(missing)}")
    return ModelConfig(**kwargs)


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def save_checkpoint(
    path: str | Path, config: ModelConfig, params: dict[str, Tensor]
) -> None:
    names = parameter_names(config)
    if set(params) != set(names):
        raise ContractError(
            "parameter set does not match the config's parameter table"
        )
    block = _config_block(config)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<I", len(block)))
        f.write(block)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            payload = data.tobytes()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (block_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config = _parse_config_block(_read_exact(f, block_len, "config block"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(f, 4 * ndim, "shape")
            )
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(f, 4 * size, f"tensor {name!r}")
            (crc,) = struct.unpack("<I", _read_exact(f, 4, "crc"))
            if zlib.crc32(payload) != crc:
                raise FormatError(f"{path}: CRC mismatch on tensor {name!r}")
            if name in params:
                raise FormatError(f"{path}: duplicate tensor {name!r}")
            array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            params[name] = Tensor(array)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    if set(params) != set(parameter_names(config)):
        raise FormatError(f"{path}: tensor set does not match the model config")
    return config, params
