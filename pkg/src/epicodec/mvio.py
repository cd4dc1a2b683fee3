"""Frame manifests, raw frame files, EPI containers and the reference-view path."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .epi import EpiError, EpiVolume, MultiViewFrameSet, StripGeometry

EPI_MAGIC = b"EPIV"
EPI_VERSION = 1
REF_MAGIC = b"EPRF"


def yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """BT.601 limited-range planar 4:2:0 to 8-bit RGB."""
    uu = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)[: y.shape[0], : y.shape[1]].astype(np.float64) - 128
    vv = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)[: y.shape[0], : y.shape[1]].astype(np.float64) - 128
    yy = 1.164 * (y.astype(np.float64) - 16)
    rgb = np.stack([yy + 1.596 * vv, yy - 0.392 * uu - 0.813 * vv, yy + 2.017 * uu], axis=-1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def read_yuv420(path, width: int, height: int, frames: int) -> np.ndarray:
    cw, ch = (width + 1) // 2, (height + 1) // 2
    frame_bytes = width * height + 2 * cw * ch
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < frame_bytes * frames:
        raise EpiError(f"{path}: holds {raw.size // frame_bytes} frames, manifest asks for {frames}")
    out = np.empty((frames, height, width, 3), dtype=np.uint8)
    for t in range(frames):
        base = t * frame_bytes
        y = raw[base : base + width * height].reshape(height, width)
        u = raw[base + width * height : base + width * height + cw * ch].reshape(ch, cw)
        v = raw[base + width * height + cw * ch : base + frame_bytes].reshape(ch, cw)
        out[t] = yuv420_to_rgb(y, u, v)
    return out


def read_rgb24_dir(directory, width: int, height: int, frames: int) -> np.ndarray:
    files = sorted(Path(directory).glob("*.rgb24"))
    if len(files) < frames:
        raise EpiError(f"{directory}: {len(files)} .rgb24 frames, manifest asks for {frames}")
    out = np.empty((frames, height, width, 3), dtype=np.uint8)
    for t, f in enumerate(files[:frames]):
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size != width * height * 3:
            raise EpiError(f"{f}: {raw.size} bytes, expected {width * height * 3}")
        out[t] = raw.reshape(height, width, 3)
    return out


def write_frames(frames: MultiViewFrameSet, directory, fps: float | None = None) -> Path:
    """Write one .rgb24 file per (view, time) plus ``manifest.json``; returns the manifest path."""
    root = Path(directory)
    views = []
    for v in range(frames.K):
        vdir = root / f"view{v}"
        vdir.mkdir(parents=True, exist_ok=True)
        for t in range(frames.T):
            (vdir / f"frame{t:05d}.rgb24").write_bytes(np.ascontiguousarray(frames.frames[v, t]).tobytes())
        views.append({"format": "rgb24", "dir": f"view{v}"})
    manifest = {"K": frames.K, "M": frames.M, "N": frames.N, "frames": frames.T,
                "view_order": list(frames.view_order), "strip_width": frames.strip_width, "views": views}
    if fps is not None:
        manifest["fps"] = fps
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> MultiViewFrameSet:
    path = Path(path)
    spec = json.loads(path.read_text())
    try:
        k, m, n, count = int(spec["K"]), int(spec["M"]), int(spec["N"]), int(spec["frames"])
        views = spec["views"]
    except KeyError as exc:
        raise EpiError(f"{path}: manifest lacks field {exc}") from exc
    if len(views) != k:
        raise EpiError(f"{path}: {len(views)} view entries for K={k}")
    data = np.empty((k, count, n, m, 3), dtype=np.uint8)
    for v, entry in enumerate(views):
        fmt = entry.get("format", "rgb24")
        if fmt == "rgb24":
            data[v] = read_rgb24_dir(path.parent / entry["dir"], m, n, count)
        elif fmt == "yuv420p":
            data[v] = read_yuv420(path.parent / entry["path"], m, n, count)
        else:
            raise EpiError(f"{path}: unknown frame format {fmt!r}")
    return MultiViewFrameSet(data, spec.get("view_order"), int(spec.get("strip_width", 8)))


def pack_volume(vol: EpiVolume) -> bytes:
    g = vol.geometry
    head = struct.pack("<4sB9I", EPI_MAGIC, EPI_VERSION, g.K, g.M, g.N, g.L, g.m,
                       g.pad_left, g.pad_right, vol.t, vol.j)
    head += struct.pack(f"<I{g.K}I", g.strip_width, *g.view_order)
    return head + np.ascontiguousarray(vol.data, dtype="<f4").tobytes()


def unpack_volume(buf: bytes) -> EpiVolume:
    if buf[:4] != EPI_MAGIC:
        raise EpiError("not an EPI container (bad magic)")
    try:
        _, version, k, m, n, L, mm, pl, pr, t, j = struct.unpack_from("<4sB9I", buf, 0)
        if version != EPI_VERSION:
            raise EpiError(f"unsupported EPI container version {version}")
        pos = struct.calcsize("<4sB9I")
        (sw,) = struct.unpack_from("<I", buf, pos)
        order = struct.unpack_from(f"<{k}I", buf, pos + 4)
        pos += 4 + 4 * k
    except struct.error as exc:
        raise EpiError(f"truncated EPI container: {exc}") from exc
    g = StripGeometry(k, m, n, L, tuple(order), sw)
    if (g.m, g.pad_left, g.pad_right) != (mm, pl, pr):
        raise EpiError("EPI container header is internally inconsistent")
    count = int(np.prod(g.volume_shape))
    if len(buf) - pos != 4 * count:
        raise EpiError(f"EPI payload has {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(g.volume_shape).astype(np.float32)
    return EpiVolume(data, j, t, g)


def volume_filename(vol: EpiVolume) -> str:
    return f"w{vol.t:04d}_s{vol.j:04d}.epiv"


def write_volumes(volumes, directory) -> list[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for vol in volumes:
        p = root / volume_filename(vol)
        p.write_bytes(pack_volume(vol))
        paths.append(p)
    return paths


def read_volumes(directory) -> list[EpiVolume]:
    files = sorted(Path(directory).glob("*.epiv"))
    if not files:
        raise EpiError(f"no .epiv containers in {directory}")
    return [unpack_volume(f.read_bytes()) for f in files]


class LosslessReference:
    """Pass-through coding of the even (anchor) views.

    Stands in for an external anchor codec: frames are stored raw, so the
    decoded views equal the input bit for bit and the bit cost is the raw size.
    """

    name = "lossless"

    def encode(self, frames: MultiViewFrameSet) -> bytes:
        views = list(range(0, frames.K, 2))
        head = struct.pack("<4sB5I", REF_MAGIC, 1, len(views), frames.T, frames.N, frames.M, frames.K)
        body = np.ascontiguousarray(frames.frames[views]).tobytes()
        return head + body

    def decode(self, buf: bytes) -> dict[int, np.ndarray]:
        if buf[:4] != REF_MAGIC:
            raise EpiError("not a reference-view container")
        _, _, nv, t, n, m, k = struct.unpack_from("<4sB5I", buf, 0)
        pos = struct.calcsize("<4sB5I")
        data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
        if data.size != nv * t * n * m * 3:
            raise EpiError("reference container payload size mismatch")
        data = data.reshape(nv, t, n, m, 3)
        return {v: data[i].copy() for i, v in enumerate(range(0, k, 2))}

    def bits(self, buf: bytes) -> int:
        return 8 * len(buf)
