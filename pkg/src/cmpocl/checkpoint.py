"""The ``CMPC`` checkpoint container.

Layout (little-endian)::

    b"CMPC" | u32 version | u32 descriptor length | descriptor (UTF-8 JSON)
    | float64 blobs in descriptor order | u32 CRC-32 of everything before it

The descriptor records the network spec, each array's name, group and
shape, and free-form metadata (e.g. replay-buffer bookkeeping).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .models import EncoderState, NetworkSpec

MAGIC = b"CMPC"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable or corrupted checkpoint file."""


def _spec_to_json(spec: NetworkSpec) -> dict:
    return asdict(spec)


def _spec_from_json(d: dict) -> NetworkSpec:
    d = dict(d)
    for key in ("hidden", "channels", "image_shape"):
        if d.get(key) is not None:
            d[key] = tuple(d[key])
    return NetworkSpec(**d)


def encode_checkpoint(state: EncoderState, extra: Optional[dict[str, np.ndarray]] = None,
                      meta: Optional[dict[str, Any]] = None) -> bytes:
    groups = [("online", state.online), ("predictor", state.predictor), ("target", state.target),
              ("extra", extra)]
    arrays = []
    for group, params in groups:
        for name, value in (params or {}).items():
            arrays.append((group, name, np.ascontiguousarray(value, dtype="<f8")))
    descriptor = {
        "spec": _spec_to_json(state.spec),
        "ema_tau": state.ema_tau,
        "groups": [g for g, p in groups if p is not None],
        "arrays": [{"group": g, "name": n, "shape": list(a.shape)} for g, n, a in arrays],
        "meta": meta or {},
    }
    desc = json.dumps(descriptor, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(desc)) + desc + b"".join(a.tobytes() for _, _, a in arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[EncoderState, dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a CMPC checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    version, desc_len = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        descriptor = json.loads(body[12:12 + desc_len])
    except ValueError as exc:
        raise CheckpointError("malformed descriptor") from exc
    offset = 12 + desc_len
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in descriptor["groups"]}
    for entry in descriptor["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CheckpointError(f"truncated blob for {entry['name']} at byte {offset}")
        arr = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{len(body) - offset} trailing bytes after blobs")
    state = EncoderState(
        spec=_spec_from_json(descriptor["spec"]),
        online=groups["online"],
        predictor=groups.get("predictor"),
        target=groups.get("target"),
        ema_tau=descriptor["ema_tau"],
    )
    return state, groups.get("extra", {}), descriptor["meta"]


def save_checkpoint(path, state: EncoderState, extra=None, meta=None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(state, extra, meta))
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
