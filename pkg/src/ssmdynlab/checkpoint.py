"""Binary tensor container and block-parameter checkpoints.

Layout: magic b"SSMD", little-endian u32 version (= 1), u64 header length,
a UTF-8 JSON header, then each tensor's float64 payload little-endian,
concatenated in header order. The header lists tensors as
{"name", "shape", "count"} in canonical (lexicographic by name) order plus a
free-form "meta" object for whoever owns the checkpoint. Round trips are
bit-exact; truncated or doctored files fail loudly rather than load.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .ssm import BufferMode, FusedBuffer, MambaParams

MAGIC = b"SSMD"
VERSION = 1

__all__ = [
    "CheckpointError",
    "save_tensors",
    "load_tensors",
    "save_checkpoint",
    "load_checkpoint",
]


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named float64 tensors plus a metadata object to ``path``."""
    names = sorted(tensors)
    arrays = {n: np.ascontiguousarray(tensors[n], dtype=np.float64) for n in names}
    header = {
        "tensors": [
            {"name": n, "shape": list(arrays[n].shape), "count": int(arrays[n].size)}
            for n in names
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(arrays[n].astype("<f8", copy=False).tobytes())


def load_tensors(path):
    """Read a container; returns (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 16:
        raise CheckpointError("unexpected end of header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise CheckpointError("unexpected end of header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc

    tensors = {}
    offset = 16 + hlen
    for entry in header.get("tensors", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        count = int(entry["count"])
        expected = 1
        for s in shape:
            expected *= int(s)
        if expected != count:
            raise CheckpointError(
                f"element count mismatch for tensor {name!r}: shape {shape} "
                f"implies {expected}, header says {count}"
            )
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(f"unexpected end of tensor data in {name!r}")
        tensors[name] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset
        ).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after tensor data")
    return tensors, header.get("meta", {})


def save_checkpoint(params: MambaParams, path) -> None:
    """Persist one block's parameters."""
    tensors = {
        "a_log": params.a_log,
        "delta_bias": params.delta_bias,
        "fused_weight": params.fused.weight,
    }
    if params.gate_enabled:
        tensors["gate_weight"] = params.gate_weight
    meta = {
        "kind": "mamba_params",
        "d": params.d,
        "mode": params.fused.mode.value,
        "gate_enabled": params.gate_enabled,
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> MambaParams:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "mamba_params":
        raise CheckpointError(f"not a block checkpoint (kind={meta.get('kind')!r})")
    for required in ("a_log", "delta_bias", "fused_weight"):
        if required not in tensors:
            raise CheckpointError(f"missing tensor {required!r}")
    mode = BufferMode.parse(meta["mode"])
    gate_enabled = bool(meta.get("gate_enabled", False))
    return MambaParams(
        a_log=tensors["a_log"],
        fused=FusedBuffer(mode=mode, weight=tensors["fused_weight"]),
        delta_bias=tensors["delta_bias"],
        gate_enabled=gate_enabled,
        gate_weight=tensors.get("gate_weight"),
    )
