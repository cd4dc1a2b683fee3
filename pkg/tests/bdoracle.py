"""Independent Bjontegaard reference: exact cubic interpolation plus dense Simpson quadrature."""
from __future__ import annotations

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import lagrange

GRID = 20_001


def _mean_gap(xa, ya, xb, yb):
    lo, hi = max(min(xa), min(xb)), min(max(xa), max(xb))
    x = np.linspace(lo, hi, GRID)
    fa, fb = lagrange(xa, ya), lagrange(xb, yb)
    return simpson(fb(x) - fa(x), x=x) / (hi - lo)


def bd_oracle(rates_a, q_a, rates_b, q_b):
    """(bd_rate_percent, bd_quality) of curve b against curve a for 4-point curves."""
    la, lb = np.log10(rates_a), np.log10(rates_b)
    dq = _mean_gap(la, q_a, lb, q_b)
    dr = _mean_gap(q_a, la, q_b, lb)
    return (10.0 ** dr - 1.0) * 100.0, dq


def random_pair(rng):
    """Two 4-point curves with increasing quality in rate and overlapping ranges."""
    ra = np.sort(rng.uniform(0.02, 0.6, 4)) * np.array([1.0, 1.3, 1.6, 2.0])
    qa = 28 + np.cumsum(rng.uniform(1.0, 3.0, 4))
    rb = ra * rng.uniform(0.6, 1.4) * rng.uniform(0.95, 1.05, 4)
    rb = np.sort(rb)
    qb = qa + rng.uniform(-0.8, 0.8) + rng.uniform(-0.2, 0.2, 4)
    qb = np.maximum.accumulate(qb + np.arange(4) * 1e-3)
    return ra, qa, rb, qb
