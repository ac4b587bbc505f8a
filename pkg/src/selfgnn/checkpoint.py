"""SGNNCKPT binary checkpoints.

Layout: ``b"SGNNCKPT"``, version (u32), then sections until end of file, each
``name length (u32) | name (utf-8) | dtype tag (u8) | rank (u32) |
dims (u64 each) | payload``.  All integers and payloads are little-endian.
The model configuration travels as a JSON byte section named
``meta.config`` so a checkpoint can be loaded without other files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_params

MAGIC = b"SGNNCKPT"
VERSION = 1
DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1"}
TAG_OF = {np.dtype(v): k for k, v in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def encode_sections(sections: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in sections.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if np.dtype(dt) not in TAG_OF:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for section {name!r}")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", TAG_OF[np.dtype(dt)], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_sections(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not an SGNNCKPT file (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        sections = {}
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            tag, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dt = np.dtype(DTYPE_TAGS[tag])
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(blob):
                raise CheckpointError(f"section {name!r} is truncated")
            sections[name] = np.frombuffer(blob, dt, count=size // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return sections


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode()
    sections = {"meta.config": np.frombuffer(cfg, dtype=np.uint8)}
    sections.update(params.state_dict())
    sections.update(extra or {})
    Path(path).write_bytes(encode_sections(sections))


def load_checkpoint(path: str | Path) -> ModelParams:
    sections = decode_sections(Path(path).read_bytes())
    if "meta.config" not in sections:
        raise CheckpointError("checkpoint lacks the meta.config section")
    raw = json.loads(sections.pop("meta.config").tobytes().decode())
    raw["layers"] = tuple(raw["layers"])
    params = init_params(ModelConfig(**raw), 0)
    try:
        params.load_state_dict(sections)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return params
