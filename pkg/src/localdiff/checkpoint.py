"""Versioned binary weight container.

Byte layout (all integers little-endian):

    bytes 0..7    magic ``b"LDCKPT01"``
    bytes 8..11   uint32 header length ``n``
    bytes 12..12+n  UTF-8 JSON header
    remainder     raw tensor payloads, concatenated

The JSON header carries::

    {
      "format_version": 1,
      "arch": {...ModelConfig fields...},
      "arch_hash": "<sha256 of the canonical arch JSON>",
      "dtype": "float32" | "float64",
      "vocab": [...],
      "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
      "extra": {"train_steps": int, "control_train_steps": int, ...}
    }

Tensor payloads are little-endian row-major scalars at the stated
offsets (relative to the end of the header).  Optimizer state is stored
under ``opt/<param>/<slot>`` names so training can resume bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Optional

import numpy as np
import torch

from .errors import FileFormatError
from .model import Denoiser, ModelConfig

__all__ = ["save_checkpoint", "load_checkpoint", "checkpoint_hash"]

MAGIC = b"LDCKPT01"

_DTYPES = {"float32": (np.float32, torch.float32),
           "float64": (np.float64, torch.float64)}


def _dtype_name(dtype: torch.dtype) -> str:
    for name, (_, td) in _DTYPES.items():
        if td == dtype:
            return name
    raise FileFormatError(f"unsupported dtype {dtype}")


def save_checkpoint(path, model: Denoiser,
                    extra_tensors: Optional[dict] = None,
                    extra_meta: Optional[dict] = None) -> None:
    tensors = {name: p.detach() for name, p in model.named_parameters()}
    for name, t in (extra_tensors or {}).items():
        tensors[f"opt/{name}"] = t.detach()

    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.cpu().numpy()
        dtype_name = {np.dtype(np.float32): "float32",
                      np.dtype(np.float64): "float64"}.get(arr.dtype)
        if dtype_name is None:
            arr = arr.astype(np.int64)
            dtype_name = "int64"
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype_name, "offset": len(payload),
                        "nbytes": len(raw)})
        payload.extend(raw)

    extra = {"train_steps": model.train_steps,
             "control_train_steps": model.control_train_steps}
    extra.update(extra_meta or {})
    header = {
        "format_version": 1,
        "arch": json.loads(json.dumps(
            {k: v for k, v in model.config.__dict__.items()})),
        "arch_hash": model.config.arch_hash(),
        "dtype": _dtype_name(model.dtype),
        "vocab": list(model.config.vocab),
        "tensors": entries,
        "extra": extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def _load_raw(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise FileFormatError("bad checkpoint magic", offset=0)
    if len(data) < 12:
        raise FileFormatError("truncated checkpoint header", offset=len(data))
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise FileFormatError("truncated checkpoint header", offset=len(data))
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"unreadable header: {e}", offset=12) from None
    return header, data[12 + hlen:]


def load_checkpoint(path, dtype: Optional[torch.dtype] = None):
    """Rebuild ``(model, optimizer_tensors, extra_meta)`` from a file.

    ``dtype`` overrides the stored precision (weights are cast), which
    the gradient tests use to run a float32-trained model in float64.
    """
    header, payload = _load_raw(path)
    arch = dict(header["arch"])
    arch["channels"] = tuple(arch["channels"])
    arch["vocab"] = tuple(arch["vocab"])
    config = ModelConfig(**arch)
    if header["arch_hash"] != config.arch_hash():
        raise FileFormatError("architecture hash mismatch")
    target_dtype = dtype or _DTYPES[header["dtype"]][1]
    model = Denoiser(config, dtype=target_dtype)

    tensors = {}
    for entry in header["tensors"]:
        np_dtype = {"float32": np.float32, "float64": np.float64,
                    "int64": np.int64}[entry["dtype"]]
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FileFormatError(
                f"tensor {entry['name']} payload out of bounds",
                offset=12 + len(json.dumps(header)) + start)
        arr = np.frombuffer(payload[start:start + n], dtype=np_dtype)
        tensors[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy())

    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise FileFormatError(f"missing tensor {name} in checkpoint")
            p.copy_(tensors[name].to(p.dtype))

    opt_tensors = {name[len("opt/"):]: t for name, t in tensors.items()
                   if name.startswith("opt/")}
    extra = dict(header.get("extra", {}))
    model.train_steps = int(extra.get("train_steps", 0))
    model.control_train_steps = int(extra.get("control_train_steps", 0))
    return model, opt_tensors, extra


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
