"""Layered synthetic multi-view scenes with pure horizontal disparity."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .epi import MultiViewFrameSet


@dataclass
class Layer:
    x: int
    y: int
    width: int
    height: int
    disparity: int = 2
    velocity: int = 0
    seed: int = 1


@dataclass
class SyntheticSceneSpec:
    K: int = 3
    M: int = 64
    N: int = 48
    frames: int = 3
    seed: int = 0
    background_disparity: int = 1
    texture_sigma: float = 2.0
    layers: list[Layer] = field(default_factory=lambda: [Layer(x=20, y=14, width=20, height=18,
                                                                disparity=3, velocity=1, seed=7)])

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        layers = [Layer(**ly) for ly in d.pop("layers", [])] if "layers" in d else None
        spec = cls(**d)
        if layers is not None:
            spec.layers = layers
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = rng.random((h, w, 3))
    if sigma > 0:
        noise = np.stack([gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(3)], axis=-1)
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo + 1e-12)


def make_synthetic_dataset(spec: SyntheticSceneSpec) -> MultiViewFrameSet:
    """Render ``K`` views x ``frames`` time steps; identical seeds give identical bytes.

    View ``v`` sees the background shifted by ``v * background_disparity`` and
    each layer by ``v * disparity + t * velocity`` pixels to the right.
    """
    K, M, N, T = spec.K, spec.M, spec.N, spec.frames
    for ly in spec.layers:
        for v in (0, K - 1):
            for t in (0, T - 1):
                x0 = ly.x + v * ly.disparity + t * ly.velocity
                if x0 < 0 or x0 + ly.width > M or ly.y < 0 or ly.y + ly.height > N:
                    raise ValueError(f"layer at x={ly.x} leaves the frame (view {v}, frame {t})")
    rng = np.random.default_rng(spec.seed)
    span = abs(spec.background_disparity) * (K - 1)
    bg = _texture(rng, N, M + span, spec.texture_sigma)
    textures = [_texture(np.random.default_rng([spec.seed, ly.seed]), ly.height, ly.width, spec.texture_sigma)
                for ly in spec.layers]
    out = np.empty((K, T, N, M, 3), dtype=np.uint8)
    for v in range(K):
        shift = v * spec.background_disparity
        off = span - shift if spec.background_disparity >= 0 else -shift
        base = bg[:, off : off + M]
        for t in range(T):
            img = base.copy()
            for ly, tex in zip(spec.layers, textures):
                x0 = ly.x + v * ly.disparity + t * ly.velocity
                img[ly.y : ly.y + ly.height, x0 : x0 + ly.width] = tex
            out[v, t] = np.round(img * 255).astype(np.uint8)
    return MultiViewFrameSet(out)
