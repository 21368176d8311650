"""Binary checkpoints holding named float64 tensors plus run metadata.

Layout::

    b"MSCKPT\\0\\0"  magic
    uint32 LE      format version
    uint64 LE      header length n
    n bytes        JSON header (sorted keys, no whitespace)
    payload        tensors back to back, little-endian float64

The header lists each tensor's group, name, shape and byte offset, the rng
state, iteration, method tag, config digest and a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metashot.diffcore import ParamSet, Tensor
from metashot.errors import CheckpointError

MAGIC = b"MSCKPT\0\0"
VERSION = 1
_PRE = struct.Struct("<IQ")


@dataclass
class Checkpoint:
    method: str
    iteration: int
    groups: dict  # group name -> ParamSet
    rng_state: dict | None = None
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def group(self, name):
        if name not in self.groups:
            raise CheckpointError(f"checkpoint has no {name!r} tensors")
        return self.groups[name]


def encode(ckpt):
    tensors = []
    chunks = []
    offset = 0
    for gname in sorted(ckpt.groups):
        for name, t in ckpt.groups[gname].items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            tensors.append({"group": gname, "name": name, "shape": list(t.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "method": ckpt.method,
        "iteration": int(ckpt.iteration),
        "rng": ckpt.rng_state,
        "config_digest": ckpt.config_digest,
        "extra": ckpt.extra,
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _PRE.pack(VERSION, len(hb)) + hb + payload


def decode(blob, source="<bytes>"):
    if len(blob) < len(MAGIC) + _PRE.size or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source} is not a checkpoint (bad magic or truncated preamble)")
    version, hlen = _PRE.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source} has format version {version}; this build reads version {VERSION}")
    start = len(MAGIC) + _PRE.size
    if len(blob) < start + hlen:
        raise CheckpointError(f"{source} is truncated inside its header")
    try:
        header = json.loads(blob[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{source} has a corrupt header: {exc}") from None
    payload = blob[start + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{source} is truncated or padded: payload is {len(payload)} bytes, "
            f"header says {header.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{source} payload checksum mismatch (file is corrupt)")
    groups = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"]).astype(np.float64)
        groups.setdefault(entry["group"], []).append((entry["name"], Tensor(a.reshape(shape))))
    return Checkpoint(
        method=header["method"],
        iteration=header["iteration"],
        groups={g: ParamSet(items) for g, items in groups.items()},
        rng_state=header["rng"],
        config_digest=header["config_digest"],
        extra=header["extra"],
    )


def save_checkpoint(path, ckpt):
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes(), str(path))


def rng_state(rng):
    return rng.bit_generator.state


def restore_rng(state):
    if state is None:
        return np.random.default_rng()
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported rng {state.get('bit_generator')!r}")
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
