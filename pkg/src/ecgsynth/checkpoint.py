"""Versioned binary checkpoints.

Layout::

    b"ECGCKPT" + version byte
    uint64 LE  header length in bytes
    header     UTF-8 JSON: {"config": ..., "meta": ..., "tensors": [{name, shape, offset}]}
    payload    little-endian float32 tensors, offsets counted in floats

The header's ``config`` must match the architecture a caller expects; loading
into a mismatched config raises :class:`CheckpointMismatchError`.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ECGCKPT"
VERSION = 1


class CheckpointMismatchError(ValueError):
    pass


def _normalize(obj):
    # tuples vs lists must not make equal configs compare unequal
    return json.loads(json.dumps(obj))


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config: dict,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": index},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config: dict | None = None):
    """Returns (tensors, config, meta)."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointMismatchError(f"{path} is not a checkpoint")
    version = data[len(MAGIC)]
    if version != VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint version {version}")
    pos = len(MAGIC) + 1
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    config = header["config"]
    if expected_config is not None and _normalize(expected_config) != _normalize(config):
        raise CheckpointMismatchError("checkpoint config does not match the requested architecture")
    payload = np.frombuffer(data, dtype="<f4", offset=pos)
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > payload.size:
            raise CheckpointMismatchError(f"tensor {entry['name']} runs past the end of the file")
        arr = payload[start:start + size].reshape(entry["shape"]).astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, config, header.get("meta", {})


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[f"{prefix}.{name}"] = t
        else:
            # integer buffers (batch counters) stored as float; exact below 2**24
            out[f"{prefix}.{name}"] = t.to(torch.float32)
    return out


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    state = module.state_dict()
    missing = [k for k in state if f"{prefix}.{k}" not in tensors]
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks {prefix} tensors: {missing[:5]}")
    new_state = {}
    for k, ref in state.items():
        t = tensors[f"{prefix}.{k}"]
        if tuple(t.shape) != tuple(ref.shape):
            raise CheckpointMismatchError(f"shape mismatch for {prefix}.{k}")
        new_state[k] = t.to(ref.dtype)
    module.load_state_dict(new_state)
