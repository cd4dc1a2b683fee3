"""Uniform scalar quantizer, its soft relaxation, and the soft entropy model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffengine.tensor import Tensor, make_node

DEFAULT_LEVELS = 90_000
DEFAULT_SOFTNESS = 50.0  # sigma * spacing**2


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerSpec:
    """``levels`` uniformly spaced centers on ``[lo, hi]``.

    ``sigma`` defaults to ``DEFAULT_SOFTNESS / spacing**2`` so that the weight
    of a neighbouring center is about ``exp(-50)`` of the nearest one.
    ``window`` is the number of nearest centers kept in the soft sums.
    """

    levels: int = DEFAULT_LEVELS
    lo: float = -1.0
    hi: float = 1.0
    sigma: float | None = None
    window: int = 9
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.levels < 2:
            raise QuantizerError(f"need at least 2 levels, got {self.levels}")
        if not self.hi > self.lo:
            raise QuantizerError(f"empty range [{self.lo}, {self.hi}]")
        if self.window < 1 or self.window % 2 == 0:
            raise QuantizerError(f"window must be a positive odd integer, got {self.window}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", DEFAULT_SOFTNESS / self.spacing ** 2)
        if not self.sigma > 0:
            raise QuantizerError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "centers", np.linspace(self.lo, self.hi, self.levels))

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.levels - 1)

    @property
    def softness(self) -> float:
        return self.sigma * self.spacing ** 2

    def with_softness(self, softness: float) -> "QuantizerSpec":
        return QuantizerSpec(self.levels, self.lo, self.hi, softness / self.spacing ** 2, self.window)

    def to_dict(self) -> dict:
        return dict(levels=self.levels, lo=self.lo, hi=self.hi, sigma=self.sigma, window=self.window)


@dataclass
class ProbabilityModel:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if np.any(p < 0):
            raise QuantizerError("negative probability mass")
        total = p.sum()
        if total <= 0:
            raise QuantizerError("probability model has zero total mass")
        self.probs = p / total

    @property
    def total_mass(self) -> float:
        return float(self.probs.sum())


def hard_quantize(z, spec: QuantizerSpec) -> np.ndarray:
    """Index of the nearest center; ties go to the lower index; out-of-range values clamp."""
    z = np.clip(np.asarray(z, dtype=np.float64), spec.lo, spec.hi)
    c = spec.centers
    k = np.clip(np.ceil((z - spec.lo) / spec.spacing - 0.5), 0, spec.levels - 1).astype(np.int64)
    # the arithmetic guess can be off by one at bin edges; settle it on real distances
    up = np.minimum(k + 1, spec.levels - 1)
    k = np.where(np.abs(z - c[up]) < np.abs(z - c[k]), up, k)
    down = np.maximum(k - 1, 0)
    k = np.where(np.abs(z - c[down]) <= np.abs(z - c[k]), down, k)
    return k


def dequantize(indices, spec: QuantizerSpec) -> np.ndarray:
    q = np.asarray(indices)
    if q.size and (q.min() < 0 or q.max() >= spec.levels):
        raise QuantizerError(f"quantization index outside [0, {spec.levels})")
    return spec.centers[q]


def _window(z: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Indices of the ``window`` centers around each element's nearest center."""
    w = min(spec.window, spec.levels)
    k = hard_quantize(z, spec)
    start = np.clip(k - w // 2, 0, spec.levels - w)
    return start[..., None] + np.arange(w)


def soft_weights(z, spec: QuantizerSpec):
    """Normalized ``exp(-sigma (z - c)^2)`` over each element's window.

    Returns ``(idx, weights, dlogits)`` where ``dlogits`` is the derivative of
    each logit with respect to ``z``.
    """
    z = np.clip(np.asarray(z, dtype=np.float64), spec.lo, spec.hi)
    idx = _window(z, spec)
    d = z[..., None] - spec.centers[idx]
    logits = -spec.sigma * d * d
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return idx, w, -2.0 * spec.sigma * d


def soft_quantize(z: Tensor, spec: QuantizerSpec) -> Tensor:
    """Differentiable softmax-weighted center average (gradient is zero outside ``[lo, hi]``)."""
    zd = z.data
    inside = (zd >= spec.lo) & (zd <= spec.hi)
    idx, w, da = soft_weights(zd, spec)
    c = spec.centers[idx]
    out = (w * c).sum(axis=-1)
    da_mean = (w * da).sum(axis=-1, keepdims=True)
    deriv = (w * (c - out[..., None]) * (da - da_mean)).sum(axis=-1)
    deriv = np.where(inside, deriv, 0.0)

    def back(g):
        return ((g * deriv).astype(zd.dtype),)

    return make_node("soft_quantize", out.astype(zd.dtype), (z,), back)


def estimate_probs(z, spec: QuantizerSpec) -> ProbabilityModel:
    """Average of the per-element soft assignments over all latent scalars."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if z.size == 0:
        raise QuantizerError("cannot estimate probabilities from an empty latent")
    idx, w, _ = soft_weights(z, spec)
    p = np.bincount(idx.reshape(-1), weights=w.reshape(-1), minlength=spec.levels) / z.size
    return ProbabilityModel(p)


def entropy(p) -> float:
    """Shannon entropy in nats, with ``0 ln 0 = 0``."""
    probs = p.probs if isinstance(p, ProbabilityModel) else np.asarray(p, dtype=np.float64)
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def rate_loss(z: Tensor, spec: QuantizerSpec) -> Tensor:
    """Entropy (nats) of the soft probability model, differentiable in ``z``."""
    zd = z.data
    if zd.size == 0:
        raise QuantizerError("cannot estimate probabilities from an empty latent")
    inside = (zd >= spec.lo) & (zd <= spec.hi)
    idx, w, da = soft_weights(zd, spec)
    n = zd.size
    p = np.bincount(idx.reshape(-1), weights=w.reshape(-1), minlength=spec.levels) / n
    p /= p.sum()
    nz = p > 0
    h = float(-(p[nz] * np.log(p[nz])).sum())
    logp = np.log(np.where(nz, p, 1.0))[idx]
    dw = w * (da - (w * da).sum(axis=-1, keepdims=True))
    # the "+1" of d(-p ln p)/dp cancels because each element's weights sum to one
    deriv = -(logp * dw).sum(axis=-1) / n
    deriv = np.where(inside, deriv, 0.0)

    def back(g):
        return ((g * deriv).astype(zd.dtype),)

    return make_node("rate_loss", np.asarray(h, dtype=zd.dtype), (z,), back)
