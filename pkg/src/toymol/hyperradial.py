"""Zero-coupling hyperradial bound states and the four-body density of states.

Each adiabatic curve is treated as an independent potential in ``R``::

    [-(1/2 mu) d^2/dR^2 + U_nu(R)] F(R) = E F(R),   F(R_min) = F(R_max) = 0,

with the curve interpolated by a cubic spline on the computed grid and held
at its last value beyond it.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from .adiabatic import AdiabaticSpectrum, EnergyWindow
from .model import PairPotential
from .spline_galerkin import BSplineBasis, Edge, GalerkinMatrices, assemble_1d, solve_lowest
from .twobody import wkb_count

EDGE_GUARD = 1e-6  # times E_b
FLATNESS_TOL = 1e-3  # times the mean spacing


@dataclass(frozen=True, eq=False)
class ChannelCurve:
    """One adiabatic curve ``U_nu(R)`` sampled on an ascending grid."""

    R_grid: np.ndarray
    values: np.ndarray
    nu: int = 0
    spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        R = np.asarray(self.R_grid, dtype=float)
        U = np.asarray(self.values, dtype=float)
        if R.shape != U.shape or len(R) < 2:
            raise ValueError("need at least two (R, U) samples of equal length")
        if not np.all(np.isfinite(U)):
            raise ValueError(f"channel {self.nu} has non-finite samples")
        object.__setattr__(self, "R_grid", R)
        object.__setattr__(self, "values", U)
        object.__setattr__(self, "spline", CubicSpline(R, U))

    @property
    def asymptote(self) -> float:
        return float(self.values[-1])

    @property
    def minimum(self) -> float:
        return float(self.values.min())

    def __call__(self, R):
        R = np.asarray(R, dtype=float)
        out = np.where(R > self.R_grid[-1], self.asymptote, self.spline(np.minimum(R, self.R_grid[-1])))
        return out if out.ndim else float(out)

    def shifted(self, c: float) -> "ChannelCurve":
        return ChannelCurve(self.R_grid, self.values + c, self.nu)


def channel_curves(spec: AdiabaticSpectrum) -> list[ChannelCurve]:
    """Sorted-order channels of a spectrum.

    Where a row has fewer eigenvalues than ``nu + 1`` the curve is known only
    to lie above that row's ceiling; it is filled with the ceiling there.
    """
    out = []
    for nu in range(spec.curves.shape[1]):
        col = spec.curves[:, nu]
        out.append(ChannelCurve(spec.R_grid, np.where(np.isfinite(col), col, spec.ceilings), nu))
    return out


def radial_step(curve: ChannelCurve, mu: float, top: float) -> float:
    kmax = math.sqrt(2.0 * mu * max(top - curve.minimum, 1.0))
    return min(0.1, 0.6 / kmax)


def solve_channel(curve: ChannelCurve, mu: float, domain=None, *, edge: float = 0.0,
                  top: float | None = None, n_intervals: int | None = None) -> np.ndarray:
    """Bound energies of one channel below ``asymptote - edge``.

    Parameters
    ----------
    curve : ChannelCurve
    mu : float
        Hyperradial mass.
    domain : (R_min, R_max), optional
        Defaults to the curve's own grid. ``R_max`` may exceed the grid.
    edge : float
        Guard band below the asymptote; states above it are dropped.
    top : float, optional
        Only states below ``top`` are wanted; sets the spline resolution.
    n_intervals : int, optional
        Override the number of B-spline intervals.
    """
    lo, hi = domain if domain is not None else (curve.R_grid[0], curve.R_grid[-1])
    if not hi > lo:
        raise ValueError("empty hyperradial domain")
    if lo < curve.R_grid[0] - 1e-12:
        raise ValueError("domain starts below the sampled curve")
    cutoff = curve.asymptote - edge
    if top is not None:
        cutoff = min(cutoff, top)
    if n_intervals is None:
        n_intervals = max(16, int(math.ceil((hi - lo) / radial_step(curve, mu, cutoff))))
    basis = BSplineBasis(lo, hi, n_intervals, 5, Edge.DIRICHLET, Edge.DIRICHLET)
    S = assemble_1d(basis, "overlap")
    K = -assemble_1d(basis, "second_derivative") / (2.0 * mu)
    V = assemble_1d(basis, "multiply", f=curve)
    x, _ = basis.quadrature()
    m = GalerkinMatrices(S, K, V, lower_bound=float(np.min(curve(x))))
    return solve_lowest(m, cutoff=cutoff).values


@dataclass(frozen=True, eq=False)
class BoundStateSet:
    energies: np.ndarray
    channels: np.ndarray
    window: EnergyWindow
    approximation: str = "zero-coupling"
    diagnostics: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.energies)

    def __len__(self):
        return self.count


def flatness(spec: AdiabaticSpectrum, window: EnergyWindow, r0: float = 1.0) -> dict:
    """Slope of the in-window curves over the last grid step against the local spacing."""
    if len(spec.R_grid) < 2:
        return {"max_slope_r0": float("nan"), "mean_spacing": float("nan"), "ratio": float("nan"), "flat": False}
    a, b = spec.curves[-2], spec.curves[-1]
    sel = np.isfinite(a) & np.isfinite(b) & window.mask(b)
    dR = spec.R_grid[-1] - spec.R_grid[-2]
    slope = float(np.max(np.abs(b[sel] - a[sel]) / dR) * r0) if sel.any() else 0.0
    lv = window.select(spec.levels(len(spec.R_grid) - 1))
    spacing = float(np.mean(np.diff(lv))) if len(lv) > 1 else float("nan")
    ratio = slope / spacing if spacing > 0 else float("inf")
    return {"max_slope_r0": slope, "mean_spacing": spacing, "ratio": ratio,
            "flat": bool(ratio < FLATNESS_TOL)}


def pool_bound_states(spec: AdiabaticSpectrum, window: EnergyWindow, mu: float, *, R_max: float | None = None,
                      E_b: float | None = None, r0: float = 1.0, strict: bool = False) -> BoundStateSet:
    """Zero-coupling bound states of every channel that dips below the window top.

    ``R_max`` defaults to ``20 r0``. Curves that are not flat at the end of the
    grid make the constant extension questionable: this warns, or raises if
    ``strict``. The flatness numbers are kept in ``diagnostics``.
    """
    R_max = 20.0 * r0 if R_max is None else R_max
    E_b = abs(window.center) if E_b is None else E_b
    flat = flatness(spec, window, r0)
    if not flat["flat"]:
        msg = (f"curves not flat at R={spec.R_grid[-1]}: slope*r0 / spacing = {flat['ratio']:.3g} "
               f"(want < {FLATNESS_TOL})")
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    energies, channels = [], []
    solved = 0
    for curve in channel_curves(spec):
        if curve.minimum >= window.hi:
            continue
        solved += 1
        E = solve_channel(curve, mu, (spec.R_grid[0], R_max), edge=EDGE_GUARD * E_b, top=window.hi)
        E = window.select(E)
        energies.append(E)
        channels.append(np.full(len(E), curve.nu))
    E = np.concatenate(energies) if energies else np.empty(0)
    nu = np.concatenate(channels) if channels else np.empty(0, dtype=int)
    order = np.lexsort((nu, E))
    diag = {"channels_solved": solved, "R_max": R_max, "flatness": flat}
    return BoundStateSet(E[order], nu[order].astype(int), window, diagnostics=diag)


def rho4(states: BoundStateSet, width: float = 3.0, center: float | None = None) -> float:
    """Count of pooled states in ``[center - width/2, center + width/2)`` divided by ``width``."""
    if not width > 0:
        raise ValueError("width must be positive")
    center = states.window.center if center is None else center
    a, b = center - 0.5 * width, center + 0.5 * width
    if a < states.window.lo - 1e-12 or b > states.window.hi + 1e-12:
        raise ValueError(f"sub-window [{a}, {b}] leaves the pooled window [{states.window.lo}, {states.window.hi}]")
    E = states.energies
    return float(np.count_nonzero((E >= a) & (E < b)) / width)


def rho4_estimate(p: PairPotential, E: float = 0.0) -> float:
    """Closed-form estimate ``N2^3 (D + E) / D^2`` (arbitrary overall constant).

    Channel thresholds are pairs of dimer levels with a flat two-atom density
    ``N2 / D`` on ``[-D, 0]``, which gives a channel density
    ``(N2 / D)^2 (D + E)``; each channel holds about ``N2`` states.
    """
    n2 = wkb_count(p, 0.5)
    D = p.depth
    return n2 ** 3 * (D + E) / D ** 2


# -- scaling ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingFit:
    variable: str
    values: tuple[float, ...]
    densities: tuple[float, ...]
    exponent: float
    stderr: float
    amplitude: float
    residual: float
    fixed_exponent: float | None = None
    fixed_amplitude: float | None = None
    fixed_residuals: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


EXPECTED_EXPONENT = {"D": 0.5, "r0": 3.0}


def fit_scaling(variable: str, values, densities, fixed_exponent: float | None = None) -> ScalingFit:
    """Power-law fit ``rho4 = A x^p`` by least squares in log-log space.

    Also fits the one-parameter form with ``p`` held at ``fixed_exponent``
    (default: 1/2 for ``D``, 3 for ``r0``) and reports the relative residual
    of every point.
    """
    x = np.asarray(values, dtype=float)
    y = np.asarray(densities, dtype=float)
    if len(x) < 4:
        raise ValueError("need at least 4 sweep values")
    if np.any(y <= 0):
        raise ValueError(f"sweep point with no counted states: {variable}={x[y <= 0][0]}")
    lx, ly = np.log(x), np.log(y)
    fit = stats.linregress(lx, ly)
    resid = float(np.sqrt(np.mean((ly - fit.intercept - fit.slope * lx) ** 2)))
    pf = EXPECTED_EXPONENT.get(variable) if fixed_exponent is None else fixed_exponent
    famp, fres = None, ()
    if pf is not None:
        famp = float(np.exp(np.mean(ly - pf * lx)))
        fres = tuple(float(r) for r in y / (famp * x ** pf) - 1.0)
    return ScalingFit(variable, tuple(map(float, x)), tuple(map(float, y)), float(fit.slope),
                      float(fit.stderr), float(np.exp(fit.intercept)), resid, pf, famp, fres)


def scaling_sweep(variable: str, values, density) -> ScalingFit:
    """Evaluate ``density(value)`` for each sweep value and fit the power law.

    ``density`` does the expensive work (adiabatic scan, pooling, counting);
    the pipeline passes a cached one.
    """
    if variable not in ("D", "r0"):
        raise ValueError(f"sweep variable must be 'D' or 'r0', got {variable!r}")
    values = [float(v) for v in values]
    rho = [float(density(v)) for v in values]
    return fit_scaling(variable, values, rho)


# -- persistence ------------------------------------------------------------------


def save_bound_states(states: BoundStateSet, path, meta: dict | None = None) -> None:
    path = os.fspath(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("nu,E\n")
        for nu, E in zip(states.channels, states.energies):
            fh.write(f"{int(nu) + 1},{float(E)!r}\n")
    side = {"window": {"center": states.window.center, "half_width": states.window.half_width},
            "approximation": states.approximation, "diagnostics": states.diagnostics, **(meta or {})}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bound_states(path) -> BoundStateSet:
    path = os.fspath(path)
    with open(path + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    nu = data[:, 0].astype(int) - 1 if data.size else np.empty(0, dtype=int)
    E = data[:, 1] if data.size else np.empty(0)
    w = side["window"]
    return BoundStateSet(E, nu, EnergyWindow(w["center"], w["half_width"]), side.get("approximation", "zero-coupling"),
                         side.get("diagnostics", {}))
