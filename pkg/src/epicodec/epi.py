"""Spatio-temporal EPI construction and its exact inverse.

Every frame is cut into vertical strips ``strip_width`` pixels wide. Strip
``j`` of every view, stacked along the width axis in ``view_order``, forms
spatial EPI ``j``; ``L`` consecutive spatial EPIs concatenated on channels
form one spatio-temporal EPI volume of shape ``(8K_pad, N, 3L)``. Axis 0 is
the EPI width (views x strip columns), axis 1 the image rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

STRIP_WIDTH = 8


class EpiError(ValueError):
    pass


def padded_width(views: int, strip_width: int = STRIP_WIDTH) -> int:
    """Smallest multiple of 3 that holds ``views * strip_width`` columns."""
    w = views * strip_width
    return -(-w // 3) * 3


@dataclass
class MultiViewFrameSet:
    """8-bit RGB frames indexed ``[view, time, row, column, channel]``."""

    frames: np.ndarray
    view_order: list[int] | None = None
    strip_width: int = STRIP_WIDTH

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 5 or f.shape[-1] != 3:
            raise EpiError(f"frames must be (K, T, N, M, 3), got {f.shape}")
        if f.dtype != np.uint8:
            raise EpiError(f"frames must be uint8, got {f.dtype}")
        self.frames = f
        if self.M % self.strip_width:
            raise EpiError(f"width M={self.M} is not divisible by strip width {self.strip_width}")
        if self.view_order is None:
            self.view_order = list(range(self.K))
        self.view_order = [int(v) for v in self.view_order]
        if sorted(self.view_order) != list(range(self.K)):
            raise EpiError(f"view_order {self.view_order} is not a permutation of 0..{self.K - 1}")

    @property
    def K(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    @property
    def N(self) -> int:
        return self.frames.shape[2]

    @property
    def M(self) -> int:
        return self.frames.shape[3]


@dataclass(frozen=True)
class StripGeometry:
    K: int
    M: int
    N: int
    L: int
    view_order: tuple[int, ...]
    strip_width: int = STRIP_WIDTH
    pad_left: int = field(init=False)
    pad_right: int = field(init=False)

    def __post_init__(self):
        if self.M % self.strip_width:
            raise EpiError(f"width M={self.M} is not divisible by strip width {self.strip_width}")
        if sorted(self.view_order) != list(range(self.K)):
            raise EpiError("view_order must be a permutation of the views")
        extra = padded_width(self.K, self.strip_width) - self.K * self.strip_width
        object.__setattr__(self, "pad_left", extra // 2)
        object.__setattr__(self, "pad_right", extra - extra // 2)

    @property
    def m(self) -> int:
        return self.M // self.strip_width

    @property
    def width(self) -> int:
        return self.K * self.strip_width

    @property
    def padded_width(self) -> int:
        return self.width + self.pad_left + self.pad_right

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.padded_width, self.N, 3 * self.L)

    @classmethod
    def for_frames(cls, frames: MultiViewFrameSet, L: int = 3) -> "StripGeometry":
        return cls(frames.K, frames.M, frames.N, L, tuple(frames.view_order), frames.strip_width)


@dataclass
class EpiVolume:
    data: np.ndarray
    j: int
    t: int
    geometry: StripGeometry

    def __post_init__(self):
        if self.data.shape != self.geometry.volume_shape:
            raise EpiError(f"volume shape {self.data.shape} != {self.geometry.volume_shape}")


def build_spatial_epis(frames: MultiViewFrameSet, t: int) -> list[np.ndarray]:
    """The ``m`` unpadded spatial EPIs ``(8K, N, 3)`` of time step ``t``, scaled to [0, 1]."""
    if not 0 <= t < frames.T:
        raise EpiError(f"time index {t} outside [0, {frames.T})")
    sw = frames.strip_width
    # (K, N, M, 3) -> views in stacking order -> (K, m, sw, N, 3)
    img = frames.frames[frames.view_order, t].astype(np.float32) / 255.0
    k, n, mw, _ = img.shape
    strips = img.reshape(k, n, mw // sw, sw, 3).transpose(2, 0, 3, 1, 4)
    return [s.reshape(k * sw, n, 3) for s in strips]


def build_spatio_temporal(spatial: Sequence[np.ndarray], j: int, t: int,
                          geometry: StripGeometry) -> EpiVolume:
    """Stack ``L`` spatial EPIs of one strip on channels (time order) and zero-pad the width."""
    if len(spatial) != geometry.L:
        raise EpiError(f"need {geometry.L} spatial EPIs, got {len(spatial)}")
    stacked = np.concatenate(list(spatial), axis=2)
    data = np.pad(stacked, ((geometry.pad_left, geometry.pad_right), (0, 0), (0, 0)))
    return EpiVolume(data.astype(np.float32), j, t, geometry)


def build_volumes(frames: MultiViewFrameSet, L: int = 3) -> list[EpiVolume]:
    """All volumes, window-major then strip. Trailing frames that do not fill a window are dropped."""
    geometry = StripGeometry.for_frames(frames, L)
    out = []
    for t in range(frames.T // L):
        per_time = [build_spatial_epis(frames, t * L + i) for i in range(L)]
        for j in range(geometry.m):
            out.append(build_spatio_temporal([per_time[i][j] for i in range(L)], j, t, geometry))
    return out


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def reassemble(volumes: Sequence[EpiVolume]) -> np.ndarray:
    """Frames ``(K, L, N, M, 3)`` of one temporal window from its ``m`` volumes."""
    if not volumes:
        raise EpiError("no volumes to reassemble")
    g = volumes[0].geometry
    t = volumes[0].t
    by_strip: dict[int, EpiVolume] = {}
    for v in volumes:
        if v.geometry != g or v.t != t:
            raise EpiError("volumes of one window must share geometry and window index")
        by_strip[v.j] = v
    missing = sorted(set(range(g.m)) - set(by_strip))
    if missing:
        raise EpiError(f"missing strip indices {missing}")
    sw = g.strip_width
    out = np.empty((g.K, g.L, g.N, g.M, 3), dtype=np.uint8)
    for j in range(g.m):
        d = by_strip[j].data[g.pad_left : g.pad_left + g.width]
        px = to_uint8(d).reshape(g.K, sw, g.N, g.L, 3)  # (pos, col, row, time, rgb)
        for pos, view in enumerate(g.view_order):
            out[view, :, :, j * sw : (j + 1) * sw, :] = px[pos].transpose(2, 1, 0, 3)
    return out


def reassemble_all(volumes: Sequence[EpiVolume]) -> MultiViewFrameSet:
    """Frame set covering every window present in ``volumes``."""
    if not volumes:
        raise EpiError("no volumes to reassemble")
    g = volumes[0].geometry
    windows: dict[int, list[EpiVolume]] = {}
    for v in volumes:
        windows.setdefault(v.t, []).append(v)
    order = sorted(windows)
    if order != list(range(len(order))):
        raise EpiError(f"temporal windows {order} are not contiguous from 0")
    parts = [reassemble(windows[t]) for t in order]
    return MultiViewFrameSet(np.concatenate(parts, axis=1), list(g.view_order), g.strip_width)


def even_views(k: int) -> list[int]:
    return list(range(0, k, 2))


def odd_views(k: int) -> list[int]:
    return list(range(1, k, 2))


def splice_views(reconstructed: MultiViewFrameSet,
                 reference: Mapping[int, np.ndarray]) -> MultiViewFrameSet:
    """Replace the even views of ``reconstructed`` with decoded reference frames."""
    expected = even_views(reconstructed.K)
    if sorted(reference) != expected:
        raise EpiError(f"reference must cover exactly views {expected}, got {sorted(reference)}")
    out = reconstructed.frames.copy()
    for v, frames in reference.items():
        frames = np.asarray(frames)
        if frames.shape != out[v].shape:
            raise EpiError(f"reference view {v} has shape {frames.shape}, reconstruction {out[v].shape}")
        out[v] = frames
    return MultiViewFrameSet(out, list(reconstructed.view_order), reconstructed.strip_width)
