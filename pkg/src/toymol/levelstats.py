"""Nearest-neighbour spacing statistics.

Spacings are scaled by their mean inside the selected window; no further
unfolding is done. The Brody family

    P(s) = (1 + q) b s^q exp(-b s^(1+q)),   b = Gamma((2+q)/(1+q))^(1+q)

has unit norm and unit mean for every ``q`` in ``[0, 1]`` and interpolates
between Poisson (q=0) and Wigner-Dyson (q=1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

KDE_GRID = np.round(np.arange(0.0, 4.0 + 1e-9, 0.02), 10)
MIN_FIT_SIZE = 20
NEAR_ZERO = 1e-10


@dataclass(frozen=True, eq=False)
class SpacingSample:
    levels: np.ndarray
    s: np.ndarray
    mean_spacing: float
    window: tuple[float, float] | None = None

    @property
    def n(self) -> int:
        return len(self.s)


def spacings(levels, window=None, dedupe_tol: float | None = None) -> SpacingSample:
    """Consecutive gaps of the sorted levels divided by their mean.

    ``dedupe_tol`` drops levels closer than that to their predecessor; by
    default nothing is dropped so near-degeneracies survive as ``s ~ 0``.
    """
    lv = np.sort(np.asarray(levels, dtype=float).ravel())
    if dedupe_tol is not None and len(lv):
        keep = np.r_[True, np.diff(lv) > dedupe_tol]
        lv = lv[keep]
    if len(lv) < 3:
        raise ValueError(f"need at least 3 levels, got {len(lv)}")
    gaps = np.diff(lv)
    mean = gaps.mean()
    if not mean > 0:
        raise ValueError("zero mean spacing")
    return SpacingSample(lv, gaps / mean, float(mean), window)


def kde(sample, bandwidth: float = 0.2):
    """Gaussian-kernel density ``p(s) = sum_i exp(-((s - s_i)/h)^2 / 2) / (sqrt(2 pi) n h)``."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    s_i = np.asarray(sample.s if isinstance(sample, SpacingSample) else sample, dtype=float)
    n = len(s_i)
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * n * bandwidth)

    def p(s):
        s = np.asarray(s, dtype=float)
        z = (s[..., None] - s_i) / bandwidth
        return norm * np.exp(-0.5 * z * z).sum(axis=-1)

    return p


def brody_b(q: float) -> float:
    return math.exp((q + 1.0) * gammaln((2.0 + q) / (1.0 + q)))


def _check_q(q):
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"Brody parameter must lie in [0, 1], got {q}")


def brody_pdf(s, q: float):
    _check_q(q)
    s = np.asarray(s, dtype=float)
    b = brody_b(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (1.0 + q) * b * np.power(s, q) * np.exp(-b * np.power(s, q + 1.0))
    return np.where(s >= 0, out, 0.0)


def brody_cdf(s, q: float):
    _check_q(q)
    s = np.clip(np.asarray(s, dtype=float), 0.0, None)
    return -np.expm1(-brody_b(q) * np.power(s, q + 1.0))


def brody_sample(q: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws by inverting the Brody CDF."""
    u = rng.random(n)
    return (-np.log1p(-u) / brody_b(q)) ** (1.0 / (q + 1.0))


def reference_pdf(kind: str, s, q: float | None = None):
    """``"poisson"``, ``"wigner_dyson"`` or ``"brody"`` (needs ``q``)."""
    s = np.asarray(s, dtype=float)
    kind = kind.lower()
    if kind == "poisson":
        return np.where(s >= 0, np.exp(-s), 0.0)
    if kind in ("wigner_dyson", "goe", "wigner"):
        return np.where(s >= 0, 0.5 * math.pi * s * np.exp(-0.25 * math.pi * s * s), 0.0)
    if kind == "brody":
        if q is None:
            raise ValueError("brody needs q")
        return brody_pdf(s, q)
    raise ValueError(f"unknown reference distribution {kind!r}")


def brody_loglik(s, q: float) -> float:
    s = np.asarray(s, dtype=float)
    b = brody_b(q)
    with np.errstate(divide="ignore"):
        logs = np.log(s)
    if q > 0 and np.any(s == 0):
        return -np.inf
    qlogs = q * logs if q > 0 else np.zeros_like(s)
    return float(np.sum(math.log1p(q) + math.log(b) + qlogs - b * np.power(s, q + 1.0)))


@dataclass(frozen=True)
class BrodyFit:
    q: float
    b: float
    ks: float
    n: int
    loglik: float = float("nan")
    near_zero_fraction: float = 0.0
    low_confidence: bool = False
    degenerate: bool = False
    flags: tuple[str, ...] = field(default=())


def fit_brody(sample) -> BrodyFit:
    """Maximum-likelihood Brody parameter on ``[0, 1]``.

    A 0.01 grid brackets the optimum, which is then refined by a bounded
    scalar minimisation. The Kolmogorov-Smirnov distance to the fitted CDF is
    reported. Plain arrays are rescaled to unit mean first.
    """
    if isinstance(sample, SpacingSample):
        s = sample.s
    else:
        s = np.asarray(sample, dtype=float)
        s = s / s.mean()
    n = len(s)
    near_zero = float(np.mean(s < NEAR_ZERO)) if n else 0.0
    flags = []
    if n == 0 or np.ptp(s) <= 1e-12:
        return BrodyFit(float("nan"), float("nan"), float("nan"), n, near_zero_fraction=near_zero,
                        low_confidence=True, degenerate=True, flags=("degenerate",))
    low = n < MIN_FIT_SIZE
    if low:
        flags.append("low_confidence")
    if near_zero > 0:
        flags.append("near_zero_spacings")
    grid = np.linspace(0.0, 1.0, 101)
    ll = np.array([brody_loglik(s, q) for q in grid])
    k = int(np.argmax(ll))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, 100)]
    if np.isfinite(ll[k]) and b > a:
        res = minimize_scalar(lambda q: -brody_loglik(s, q), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-7})
        q = float(res.x) if -res.fun >= ll[k] else float(grid[k])
    else:
        q = float(grid[k])
    ks = float(stats.kstest(s, lambda x: brody_cdf(x, q)).statistic)
    return BrodyFit(q, brody_b(q), ks, n, brody_loglik(s, q), near_zero, low, False, tuple(flags))


def gaussian_weights(points: int = 10, width: float = 1.58) -> np.ndarray:
    k = np.arange(points) - 0.5 * (points - 1)
    w = np.exp(-0.5 * (k / width) ** 2)
    return w / w.sum()


def gaussian_smooth(R, q, points: int = 10, width: float = 1.58):
    """Forward moving average of ``(R_n, q_n)`` over ``points`` samples.

    Output ``i`` is ``sum_{n=i}^{i+points-1} f_n (R_n, q_n)`` with ``f`` a
    normalised Gaussian (standard deviation ``width`` grid steps) centred on
    the window. Returns two arrays of length ``len(R) - points + 1``.
    """
    R = np.asarray(R, dtype=float)
    q = np.asarray(q, dtype=float)
    if len(R) != len(q):
        raise ValueError("R and q must have the same length")
    if len(R) < points:
        raise ValueError(f"series shorter than the {points}-point window")
    f = gaussian_weights(points, width)
    Rs = np.convolve(R, f[::-1], mode="valid")
    qs = np.convolve(q, f[::-1], mode="valid")
    return Rs, qs


def l1_distance(p, ref, grid=KDE_GRID) -> float:
    """``int |p - ref| ds`` over ``grid`` (trapezoid rule)."""
    return float(np.trapezoid(np.abs(p(grid) - ref(grid)), grid))


def kde_table(sample, bandwidth: float = 0.2, grid=KDE_GRID) -> np.ndarray:
    """Rows ``(s, p_kde, p_poisson, p_wigner_dyson)`` for plotting."""
    p = kde(sample, bandwidth)
    return np.column_stack([grid, p(grid), reference_pdf("poisson", grid), reference_pdf("wigner_dyson", grid)])


def chaos_distances(levels, bandwidth: float = 0.2) -> dict:
    """L1 distances of the spacing KDE to the Poisson and Wigner-Dyson laws."""
    p = kde(spacings(levels), bandwidth)
    return {"poisson": l1_distance(p, lambda s: reference_pdf("poisson", s)),
            "wigner_dyson": l1_distance(p, lambda s: reference_pdf("wigner_dyson", s))}


def brody_vs_R(spec, window, points: int = 10, width: float = 1.58):
    """Per-R Brody fits of the in-window levels, raw and smoothed.

    ``spec`` is an :class:`~toymol.adiabatic.AdiabaticSpectrum`. Returns
    ``(raw, smoothed)``: ``raw`` rows are ``(R, n_levels, q, ks)`` and
    ``smoothed`` rows ``(R_avg, q_avg)``. Grid points with fewer than three
    levels get ``q = nan``.
    """
    rows = []
    for i, R in enumerate(spec.R_grid):
        lv = window.select(spec.levels(i))
        if len(lv) < 3:
            rows.append((R, len(lv), np.nan, np.nan))
            continue
        fit = fit_brody(spacings(lv))
        rows.append((R, len(lv), fit.q, fit.ks))
    raw = np.array(rows, dtype=float)
    Rs, qs = gaussian_smooth(raw[:, 0], raw[:, 2], points, width)
    return raw, np.column_stack([Rs, qs])
