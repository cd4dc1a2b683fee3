"""Binary checkpoint container.

Layout (little-endian)::

    b"EPCK" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    u32 blob_count | blobs...
    blob: u16 name_len | name | u8 rank | u32 dims[rank] | f32 values

``meta`` carries Adam scalars, the RNG state and provenance; array data
(parameters, batch-norm statistics, Adam moments) lives in blobs.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .optim import AdamState

MAGIC = b"EPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, meta_len = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(buf[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
            arrays[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint blobs")
    return arrays, meta


def save(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def adam_to_blobs(prefix: str, state: AdamState) -> tuple[dict[str, np.ndarray], dict]:
    blobs = {}
    for k, arr in state.m.items():
        blobs[f"{prefix}/m/{k}"] = arr
        blobs[f"{prefix}/v/{k}"] = state.v[k]
    scalars = dict(base_lr=state.base_lr, decay_rate=state.decay_rate, beta1=state.beta1,
                   beta2=state.beta2, epsilon=state.epsilon, step=state.step, epoch=state.epoch)
    return blobs, scalars


def adam_from_blobs(prefix: str, arrays: Mapping[str, np.ndarray], scalars: Mapping,
                    dtype=np.float32) -> AdamState:
    state = AdamState(**scalars)
    mp, vp = f"{prefix}/m/", f"{prefix}/v/"
    for name, arr in arrays.items():
        if name.startswith(mp):
            state.m[name[len(mp):]] = arr.astype(dtype)
        elif name.startswith(vp):
            state.v[name[len(vp):]] = arr.astype(dtype)
    return state
