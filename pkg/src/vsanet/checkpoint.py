"""Language-neutral checkpoint container.

Layout (all integers little-endian unsigned 32-bit)::

    magic       8 bytes   b"VSANCKPT"
    version     u32       1
    meta_len    u32       length of the UTF-8 JSON metadata block
    meta        bytes     JSON object (config, stage, ...)
    count       u32       number of tensors
    then per tensor:
      name_len  u32
      name      bytes     UTF-8, e.g. "svae.encoder.conv1.conv.weight"
      ndim      u32
      dims      u32 * ndim
      data      float32 little-endian, C order, prod(dims) values
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

MAGIC = b"VSANCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor],
                     meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().to(torch.float32).numpy()
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        return _parse(path, data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc


def _parse(path, data: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, meta


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items() if v.is_floating_point()}


def load_into(module: nn.Module, prefix: str, tensors: dict[str, torch.Tensor]) -> None:
    """Copy ``prefix.*`` entries into ``module``; every float tensor must be present."""
    state = module.state_dict()
    missing = []
    with torch.no_grad():
        for key, target in state.items():
            if not target.is_floating_point():
                continue
            src = tensors.get(f"{prefix}.{key}")
            if src is None:
                missing.append(f"{prefix}.{key}")
                continue
            if tuple(src.shape) != tuple(target.shape):
                raise CheckpointError(
                    f"{prefix}.{key}: shape {tuple(src.shape)} != expected {tuple(target.shape)}"
                )
            target.copy_(src.to(target.dtype))
    if missing:
        raise CheckpointError(f"missing tensors: {', '.join(missing[:5])}")


def load_module(path: str | os.PathLike, module: nn.Module, prefix: str) -> dict[str, Any]:
    tensors, meta = read_checkpoint(path)
    load_into(module, prefix, tensors)
    return meta
