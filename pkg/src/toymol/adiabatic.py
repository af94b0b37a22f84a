"""Hyperspherical adiabatic potential curves ``U_nu(R)``.

At each hyperradius the hyperangular Hamiltonian is diagonalised on the
symmetry-reduced octant ``theta, phi in [0, pi/2]``. Edge conditions:

* ``phi = 0`` and ``phi = pi/2``: Dirichlet (fermion antisymmetry)
* ``theta = 0``: Dirichlet
* ``theta = pi/2``: Dirichlet for odd parity, Neumann for even parity

Channels are labelled by ascending order at each ``R``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .model import PairPotential, Parity, SystemParams, potential_on_grid
from .spline_galerkin import (AngularOperators, BSplineBasis, Edge, Eigenpairs, GalerkinMatrices,
                              assemble_hyperangular, solve_lowest, sturm_count)

log = logging.getLogger(__name__)

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class EnergyWindow:
    center: float
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("window half-width must be positive")

    @property
    def lo(self) -> float:
        return self.center - self.half_width

    @property
    def hi(self) -> float:
        return self.center + self.half_width

    @property
    def width(self) -> float:
        return 2.0 * self.half_width

    def mask(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (v >= self.lo) & (v <= self.hi)

    def select(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        return v[self.mask(v)]


@dataclass(frozen=True)
class BasisSpec:
    """Number of retained B-splines per direction and the operator form."""

    n_theta: int = 150
    n_phi: int = 150
    order: int = 5
    form: str = "standard"
    quad_nodes: int = 10

    def scaled(self, factor: float) -> "BasisSpec":
        return BasisSpec(int(round(self.n_theta * factor)), int(round(self.n_phi * factor)), self.order,
                         self.form, self.quad_nodes)


def default_basis(p: PairPotential, form: str = "standard") -> BasisSpec:
    """100-160 functions per direction, growing with ``sqrt(D) r0``."""
    n = int(np.clip(round(15 * math.sqrt(p.depth) * p.width), 100, 160))
    return BasisSpec(n, n, 5, form)


def _theta_basis(spec: BasisSpec, parity: Parity) -> BSplineBasis:
    right = Edge.NEUMANN if parity is Parity.EVEN else Edge.DIRICHLET
    n_int = spec.n_theta + 2 - (spec.order - 1)
    return BSplineBasis(0.0, HALF_PI, n_int, spec.order, Edge.DIRICHLET, right, spec.quad_nodes)


def _phi_basis(spec: BasisSpec) -> BSplineBasis:
    n_int = spec.n_phi + 2 - (spec.order - 1)
    return BSplineBasis(0.0, HALF_PI, n_int, spec.order, Edge.DIRICHLET, Edge.DIRICHLET, spec.quad_nodes)


class HyperangularSolver:
    """Holds the R-independent operators for one parity sector."""

    def __init__(self, potential: PairPotential | None, params: SystemParams, basis: BasisSpec):
        self.potential = potential
        self.params = params
        self.basis = basis
        self.basis_theta = _theta_basis(basis, params.parity)
        self.basis_phi = _phi_basis(basis)
        self.operators = AngularOperators(self.basis_theta, self.basis_phi, basis.form)

    def matrices(self, R: float) -> GalerkinMatrices:
        if self.potential is None:
            pot = None
        else:
            p, params = self.potential, self.params

            def pot(theta, phi):
                return potential_on_grid(R, theta, phi, p, params)

        return assemble_hyperangular(self.basis_theta, self.basis_phi, R, pot, self.params.mu,
                                     self.basis.form, self.operators)

    def ceiling_for(self, m: GalerkinMatrices, window: EnergyWindow, spacings: float = 5.0) -> float:
        """Window top plus ``spacings`` local mean spacings, from inertia counts."""
        n_in = sturm_count(m, window.hi) - sturm_count(m, window.lo)
        spacing = window.width / n_in if n_in > 0 else window.half_width
        return window.hi + spacings * spacing

    def solve(self, R: float, ceiling: float | None = None, window: EnergyWindow | None = None,
              count: int | None = None) -> tuple[Eigenpairs, float]:
        m = self.matrices(R)
        if count is not None:
            res = solve_lowest(m, count=count)
            return res, float(res.values[-1]) if len(res.values) else -np.inf
        if ceiling is None:
            if window is None:
                raise ValueError("need a ceiling, a window or a count")
            ceiling = self.ceiling_for(m, window)
        return solve_lowest(m, cutoff=ceiling), ceiling


def solve_at_R(R: float, p: PairPotential | None, params: SystemParams, ceiling: float | None = None, *,
               basis: BasisSpec | None = None, window: EnergyWindow | None = None,
               count: int | None = None) -> Eigenpairs:
    """Hyperangular eigenpairs at one hyperradius (parity taken from ``params``)."""
    basis = basis or (default_basis(p) if p is not None else BasisSpec(60, 60))
    solver = HyperangularSolver(p, params, basis)
    res, _ = solver.solve(R, ceiling, window, count)
    return res


@dataclass(frozen=True, eq=False)
class AdiabaticSpectrum:
    """Sorted eigenvalues on an R grid, NaN-padded to a rectangle.

    ``curves[i, nu]`` is ``U_nu(R_i)`` (0-based ``nu``); ``ceilings[i]`` is
    the energy below which row ``i`` is complete.
    """

    R_grid: np.ndarray
    curves: np.ndarray
    ceilings: np.ndarray
    parity: str
    basis: dict
    params: dict
    potential: dict
    window: dict | None = None
    meta: dict = field(default_factory=dict)

    def levels(self, i: int) -> np.ndarray:
        row = self.curves[i]
        return row[np.isfinite(row)]

    def counts(self) -> np.ndarray:
        return np.isfinite(self.curves).sum(axis=1)

    def index_of(self, R: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.R_grid - R)))
        if abs(self.R_grid[i] - R) > tol:
            raise KeyError(f"R={R} is not on the grid")
        return i

    def sidecar(self) -> dict:
        return {"parity": self.parity, "basis": self.basis, "params": self.params,
                "potential": self.potential, "window": self.window,
                "ceilings": [float(c) for c in self.ceilings], "code_version": __version__, **self.meta}


def _describe(p: PairPotential | None, params: SystemParams, basis: BasisSpec):
    pot = None if p is None else {"kind": p.kind.value, "depth": p.depth, "width": p.width}
    prm = {"m1": params.m1, "m3": params.m3, "mu": params.mu, "mu_convention": params.mu_convention.value}
    return pot, prm, asdict(basis)


_WORKER: dict = {}


def _worker_init(p, params, basis):
    _WORKER["solver"] = HyperangularSolver(p, params, basis)


def _worker_solve(args):
    R, ceiling, window = args
    res, ceil = _WORKER["solver"].solve(R, ceiling, window)
    return res.values, ceil


def scan(R_grid, p: PairPotential, params: SystemParams, *, window: EnergyWindow | None = None,
         ceiling: float | None = None, basis: BasisSpec | None = None, workers: int = 1,
         progress=None) -> AdiabaticSpectrum:
    """Adiabatic curves over ``R_grid`` (ascending), one solve per point.

    Results are ordered by grid index whatever the completion order.
    """
    R_grid = np.asarray(R_grid, dtype=float)
    if np.any(np.diff(R_grid) <= 0):
        raise ValueError("R grid must be strictly ascending")
    basis = basis or default_basis(p)
    tasks = [(float(R), ceiling, window) for R in R_grid]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(p, params, basis)) as ex:
            for i, out in enumerate(ex.map(_worker_solve, tasks)):
                results.append(out)
                if progress:
                    progress(i, R_grid[i], out)
    else:
        _worker_init(p, params, basis)
        for i, t in enumerate(tasks):
            try:
                out = _worker_solve(t)
            except Exception as exc:
                raise RuntimeError(f"adiabatic solve failed at R={t[0]}: {exc}") from exc
            results.append(out)
            if progress:
                progress(i, R_grid[i], out)
    width = max((len(v) for v, _ in results), default=0)
    curves = np.full((len(R_grid), width), np.nan)
    for i, (v, _) in enumerate(results):
        curves[i, : len(v)] = v
    ceilings = np.array([c for _, c in results])
    pot, prm, bas = _describe(p, params, basis)
    win = None if window is None else {"center": window.center, "half_width": window.half_width}
    return AdiabaticSpectrum(R_grid, curves, ceilings, params.parity.value, bas, prm, pot, win)


def channel_density(spec: AdiabaticSpectrum, window: EnergyWindow) -> np.ndarray:
    """Rows ``(R, count, rho_a)`` with ``rho_a`` = in-window count per unit energy."""
    if np.any(window.hi > spec.ceilings):
        bad = spec.R_grid[window.hi > spec.ceilings]
        raise ValueError(f"window top {window.hi} exceeds the computed ceiling at R={bad[0]}")
    rows = []
    for i, R in enumerate(spec.R_grid):
        n = len(window.select(spec.levels(i)))
        rows.append((R, n, n / window.width))
    return np.array(rows)


# -- persistence ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def save_spectrum(spec: AdiabaticSpectrum, path, extra_meta: dict | None = None) -> None:
    """CSV ``R,U_1,...,U_N`` plus a JSON sidecar ``<path>.json``.

    Floats are written with ``repr`` so the round trip is bit-exact; cells
    beyond a row's eigenvalue count are left empty.
    """
    path = os.fspath(path)
    n = spec.curves.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["R"] + [f"U_{k + 1}" for k in range(n)]) + "\n")
        for R, row in zip(spec.R_grid, spec.curves):
            fh.write(",".join([_fmt(R)] + [_fmt(v) for v in row]) + "\n")
    meta = spec.sidecar()
    if extra_meta:
        meta.update(extra_meta)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_spectrum(path) -> AdiabaticSpectrum:
    path = os.fspath(path)
    with open(path + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if header[0] != "R":
        raise ValueError(f"{path}: not an adiabatic spectrum file")
    n = len(header) - 1
    R = np.array([float(r[0]) for r in rows])
    curves = np.full((len(rows), n), np.nan)
    for i, r in enumerate(rows):
        for j, cell in enumerate(r[1:]):
            if cell:
                curves[i, j] = float(cell)
    known = {"parity", "basis", "params", "potential", "window", "ceilings", "code_version"}
    extra = {k: v for k, v in meta.items() if k not in known}
    return AdiabaticSpectrum(R, curves, np.array(meta["ceilings"], dtype=float), meta["parity"],
                             meta["basis"], meta["params"], meta["potential"], meta.get("window"), extra)


def merge_parities(a: AdiabaticSpectrum, b: AdiabaticSpectrum) -> AdiabaticSpectrum:
    """Combined level set of two parity sectors on a shared grid."""
    if not np.array_equal(a.R_grid, b.R_grid):
        raise ValueError("spectra must share the R grid")
    rows = [np.sort(np.concatenate([a.levels(i), b.levels(i)])) for i in range(len(a.R_grid))]
    width = max(len(r) for r in rows)
    curves = np.full((len(rows), width), np.nan)
    for i, r in enumerate(rows):
        curves[i, : len(r)] = r
    return AdiabaticSpectrum(a.R_grid, curves, np.minimum(a.ceilings, b.ceilings), "both", a.basis,
                             a.params, a.potential, a.window)


def threshold_deviation(levels, thresholds, window: EnergyWindow) -> dict:
    """Distance of each in-window level to the nearest threshold, in mean spacings."""
    lv = window.select(levels)
    t = np.sort(np.asarray(thresholds, dtype=float))
    if len(lv) < 2 or len(t) == 0:
        return {"n": len(lv), "mean_spacing": float("nan"), "max_ratio": float("nan"), "matched_fraction": 0.0}
    spacing = float(np.mean(np.diff(lv)))
    k = np.clip(np.searchsorted(t, lv), 1, len(t) - 1) if len(t) > 1 else np.zeros(len(lv), dtype=int)
    d = np.abs(lv - t[k]) if len(t) == 1 else np.minimum(np.abs(lv - t[k - 1]), np.abs(lv - t[k]))
    ratio = d / spacing
    return {"n": int(len(lv)), "mean_spacing": spacing, "max_ratio": float(ratio.max()),
            "median_ratio": float(np.median(ratio)), "matched_fraction": float(np.mean(ratio <= 0.01))}


def parity_pairing(even, odd, window: EnergyWindow) -> dict:
    """How closely in-window levels of one sector have a partner in the other.

    Partners are searched in the full other-sector list so that pairs split by
    the window edge still count. Gaps are in units of the mean spacing of the
    combined in-window set.
    """
    e, o = np.sort(np.asarray(even, float)), np.sort(np.asarray(odd, float))
    ew, ow = window.select(e), window.select(o)
    comb = np.sort(np.concatenate([ew, ow]))
    if len(comb) < 2 or len(e) == 0 or len(o) == 0:
        return {"n_even": len(ew), "n_odd": len(ow), "max_gap": float("nan"), "paired_fraction": 0.0}
    spacing = float(np.mean(np.diff(comb)))

    def nearest(x, ref):
        k = np.clip(np.searchsorted(ref, x), 1, max(len(ref) - 1, 1))
        lo = np.abs(x - ref[np.maximum(k - 1, 0)])
        hi = np.abs(x - ref[np.minimum(k, len(ref) - 1)])
        return np.minimum(lo, hi)

    gaps = np.concatenate([nearest(ew, o), nearest(ow, e)]) / spacing
    return {"n_even": int(len(ew)), "n_odd": int(len(ow)), "mean_spacing": spacing,
            "max_gap": float(gaps.max()), "median_gap": float(np.median(gaps)),
            "paired_fraction": float(np.mean(gaps < 1e-3))}
