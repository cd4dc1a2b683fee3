"""PSNR/SSIM, rate accounting and Bjontegaard-style curve comparison."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0


def _frames(a: np.ndarray) -> np.ndarray:
    """Collapse to (frames, pixels...) treating the last three axes as one image."""
    if a.ndim <= 3:
        return a[None]
    return a.reshape((-1,) + a.shape[-3:])


def psnr(a, b, peak: float = 255.0, cap: float = PSNR_CAP) -> float:
    """Per-frame ``10 log10(peak^2 / MSE)`` averaged over frames; zero error gives ``cap``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    fa = _frames(a).astype(np.float64)
    fb = _frames(b).astype(np.float64)
    mse = ((fa - fb) ** 2).reshape(len(fa), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        vals = np.where(mse > 0, 10 * np.log10(peak * peak / np.where(mse > 0, mse, 1)), cap)
    return float(np.minimum(vals, cap).mean())


def luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def _gaussian(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim_image(a: np.ndarray, b: np.ndarray, peak: float = 255.0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of two 2-D images over all fully-covered Gaussian windows."""
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"ssim: image {a.shape} smaller than the {size}x{size} window")
    win = _gaussian(size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a * mu_a
    sbb = _filter_valid(b * b, win) - mu_b * mu_b
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float((num / den).mean())


def ssim(a, b, peak: float = 255.0) -> float:
    """Luma SSIM averaged over frames. RGB input (last axis 3) is converted to BT.601 luma."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim >= 3 and a.shape[-1] == 3:
        a, b = luma(a), luma(b)
    ya = a.reshape((-1,) + a.shape[-2:])
    yb = b.reshape((-1,) + b.shape[-2:])
    return float(np.mean([ssim_image(x, y, peak) for x, y in zip(ya, yb)]))


def rate_account(bitstream_bytes: Sequence[int], pixels: int, frames: int, fps: float = 30.0,
                 reference_bits: int = 0) -> dict:
    """Total bits, bits per reconstructed pixel and kbps of the coded streams."""
    if len(bitstream_bytes) == 0:
        raise ValueError("rate_account needs at least one bitstream")
    if pixels <= 0 or frames <= 0:
        raise ValueError("rate_account needs a positive pixel and frame count")
    bits = 8 * int(sum(bitstream_bytes)) + int(reference_bits)
    return {"bits": bits, "bpp": bits / pixels, "kbps": bits * fps / (frames * 1000.0)}


@dataclass
class RDPoint:
    label: str
    rate_bpp: float
    rate_kbps: float
    psnr_db: float
    ssim: float

    def quality(self, key: str) -> float:
        return {"psnr": self.psnr_db, "ssim": self.ssim}[key]


@dataclass
class RDCurve:
    points: list[RDPoint]

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.rate_bpp)
        if any(p.rate_bpp <= 0 for p in self.points):
            raise ValueError("RD rates must be positive")

    @property
    def monotone(self) -> bool:
        r = [p.rate_bpp for p in self.points]
        return all(x < y for x, y in zip(r, r[1:]))

    def arrays(self, key: str = "psnr") -> tuple[np.ndarray, np.ndarray]:
        return (np.array([p.rate_bpp for p in self.points]),
                np.array([p.quality(key) for p in self.points]))


RD_FIELDS = ("label", "rate_bpp", "rate_kbps", "psnr_db", "ssim")


def write_rd_csv(path, curve: RDCurve | Sequence[RDPoint]) -> None:
    points = curve.points if isinstance(curve, RDCurve) else list(curve)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RD_FIELDS)
        for p in points:
            w.writerow([p.label, repr(p.rate_bpp), repr(p.rate_kbps), repr(p.psnr_db), repr(p.ssim)])


def read_rd_csv(path) -> RDCurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return RDCurve([RDPoint(r["label"], float(r["rate_bpp"]), float(r["rate_kbps"]),
                            float(r["psnr_db"]), float(r["ssim"])) for r in rows])


@dataclass
class BDResult:
    quality_key: str
    bd_rate_percent: float
    bd_quality: float
    quality_interval: tuple[float, float]
    rate_interval: tuple[float, float]


def _overlap(a: np.ndarray, b: np.ndarray, what: str) -> tuple[float, float]:
    lo, hi = max(a.min(), b.min()), min(a.max(), b.max())
    if not lo < hi:
        raise ValueError(f"no {what} overlap: [{a.min():g}, {a.max():g}] vs [{b.min():g}, {b.max():g}]")
    return float(lo), float(hi)


def _mean_cubic_gap(xa, ya, xb, yb, lo, hi) -> float:
    pa, pb = np.polyint(np.polyfit(xa, ya, 3)), np.polyint(np.polyfit(xb, yb, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    return float((ib - ia) / (hi - lo))


def _as_arrays(curve, key):
    if isinstance(curve, RDCurve):
        return curve.arrays(key)
    pts = np.asarray(curve, dtype=np.float64)
    return pts[:, 0], pts[:, 1]


def bd_metrics(curve_a, curve_b, quality_key: str = "psnr") -> BDResult:
    """Average quality and rate differences of ``curve_b`` relative to ``curve_a``.

    Cubic fits of quality against log10(rate) (and the inverse fit for rate)
    are integrated over the overlapping interval. Positive ``bd_rate_percent``
    means ``curve_b`` spends more bits for the same quality.
    """
    ra, qa = _as_arrays(curve_a, quality_key)
    rb, qb = _as_arrays(curve_b, quality_key)
    if len(ra) < 4 or len(rb) < 4:
        raise ValueError("bd_metrics needs at least 4 points per curve")
    if np.any(ra <= 0) or np.any(rb <= 0):
        raise ValueError("rates must be positive")
    la, lb = np.log10(ra), np.log10(rb)
    r_lo, r_hi = _overlap(la, lb, "log-rate")
    q_lo, q_hi = _overlap(qa, qb, "quality")
    dq = _mean_cubic_gap(la, qa, lb, qb, r_lo, r_hi)
    dr = _mean_cubic_gap(qa, la, qb, lb, q_lo, q_hi)
    return BDResult(quality_key, (10.0 ** dr - 1.0) * 100.0, dq, (q_lo, q_hi), (r_lo, r_hi))


BD_FIELDS = ("quality_key", "delta_rate_name", "bd_rate_percent", "delta_quality_name", "bd_quality")


def bd_rows(curve_a: RDCurve, curve_b: RDCurve) -> list[dict]:
    rows = []
    for key, rate_name, q_name in (("psnr", "BDBR", "BDPSNR"), ("ssim", "ADBR", "ADSSIM")):
        res = bd_metrics(curve_a, curve_b, key)
        rows.append({"quality_key": key, "delta_rate_name": rate_name, "bd_rate_percent": res.bd_rate_percent,
                     "delta_quality_name": q_name, "bd_quality": res.bd_quality})
    return rows


def write_bd_csv(path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BD_FIELDS)
        for r in rows:
            w.writerow([r["quality_key"], r["delta_rate_name"], repr(float(r["bd_rate_percent"])),
                        r["delta_quality_name"], repr(float(r["bd_quality"]))])


def format_bd_table(rows: Sequence[dict]) -> str:
    lines = [f"{'metric':<8}{'delta rate (%)':>16}{'delta quality':>16}"]
    for r in rows:
        lines.append(f"{r['delta_rate_name'] + '/' + r['delta_quality_name']:<14}"
                     f"{r['bd_rate_percent']:>10.4f}{r['bd_quality']:>16.6f}")
    return "\n".join(lines)
