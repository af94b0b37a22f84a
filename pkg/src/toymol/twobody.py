"""Two-atom bound states, the analytic Morse ladder and the WKB count.

On a line the relative coordinate spans all reals, so the pair problem is

    -(1/2 mu2) psi'' + U(|x|) psi = E psi,

whose spectrum splits into even and odd states. It is solved on the
half-line ``[0, L]`` with a Neumann (even) or Dirichlet (odd) condition at
the origin, which is equivalent and labels the parity for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .model import PairPotential, PotentialKind, SystemParams, evaluate_potential
from .spline_galerkin import (BSplineBasis, Edge, GalerkinMatrices, assemble_1d,
                              solve_lowest)

ENERGY_TOL = 1e-8


@dataclass(frozen=True)
class TwoBodySpectrum:
    potential: PairPotential
    reduced_mass: float
    energies: np.ndarray
    parities: tuple[str, ...]
    box: float

    @property
    def count(self) -> int:
        return len(self.energies)

    @property
    def ground(self) -> float:
        return float(self.energies[0])

    def by_parity(self, parity: str) -> np.ndarray:
        return np.array([e for e, p in zip(self.energies, self.parities) if p == parity])


@dataclass(frozen=True)
class DimerReference:
    E12: float
    E34: float
    E13: float
    E24: float

    @property
    def E_b(self) -> float:
        return 0.5 * (abs(self.E12 + self.E34) + abs(self.E13 + self.E24))


def morse_oracle(D: float, r0: float, mu2: float) -> np.ndarray:
    """Closed-form Morse levels ``E_n = -D + w (n+1/2) - (a^2 / 2 mu2)(n+1/2)^2``."""
    if min(D, r0, mu2) <= 0:
        raise ValueError("D, r0 and mu2 must be positive")
    a = 1.0 / r0
    lam = math.sqrt(2.0 * mu2 * D) / a
    n = np.arange(int(math.ceil(lam - 0.5)) + 1)
    x = n + 0.5
    x = x[x < lam]
    return -(a * a / (2.0 * mu2)) * (lam - x) ** 2


def poschl_teller_oracle(D: float, r0: float, mu2: float) -> np.ndarray:
    """Full-line levels of ``-D / cosh^2(x / r0)``: ``E_n = -(lam - n)^2 / (2 mu2 r0^2)``."""
    s = 2.0 * mu2 * D * r0 * r0
    lam = 0.5 * (math.sqrt(1.0 + 4.0 * s) - 1.0)
    n = np.arange(int(math.ceil(lam)))
    n = n[n < lam]
    return -((lam - n) ** 2) / (2.0 * mu2 * r0 * r0)


def _estimate_levels(p: PairPotential, mu2: float) -> np.ndarray:
    if p.kind is PotentialKind.MORSE:
        return morse_oracle(p.depth, p.width, mu2)
    return poschl_teller_oracle(p.depth, p.width, mu2)


def _half_line_solve(p: PairPotential, mu2: float, box: float, parity: str, h: float) -> np.ndarray:
    n_int = max(16, int(math.ceil(box / h)))
    left = Edge.NEUMANN if parity == "even" else Edge.DIRICHLET
    basis = BSplineBasis(0.0, box, n_int, 5, left, Edge.DIRICHLET)
    S = assemble_1d(basis, "overlap")
    K = -assemble_1d(basis, "second_derivative") / (2.0 * mu2)
    V = assemble_1d(basis, "multiply", f=lambda x: evaluate_potential(p, x))
    m = GalerkinMatrices(S, K, V, lower_bound=-p.depth)
    w = solve_lowest(m, cutoff=0.0).values
    return w


def solve_two_body(p: PairPotential, mu2: float, *, box: float | None = None,
                   max_doublings: int = 6) -> TwoBodySpectrum:
    """All bound levels of both parities, converged in box size.

    The box is doubled until the level count is stable and every energy
    moves by less than ``ENERGY_TOL``; a level only counts as bound if it
    stays negative after the final doubling.
    """
    if mu2 <= 0:
        raise ValueError("reduced mass must be positive")
    est = _estimate_levels(p, mu2)
    shallow = max(abs(est[-1]) if len(est) else 0.0, 1e-4 * p.depth)
    kappa = math.sqrt(2.0 * mu2 * shallow)
    L = box if box is not None else 12.0 * p.width + 6.0 / kappa
    kmax = math.sqrt(2.0 * mu2 * p.depth)
    h = min(p.width / 10.0, 0.6 / kmax)

    def solve(L):
        e = _half_line_solve(p, mu2, L, "even", h)
        o = _half_line_solve(p, mu2, L, "odd", h)
        return e, o

    prev = solve(L)
    for _ in range(max_doublings):
        L *= 2.0
        cur = solve(L)
        same_count = all(len(a) == len(b) for a, b in zip(prev, cur))
        if same_count and all(np.all(np.abs(a - b) < ENERGY_TOL) for a, b in zip(prev, cur)):
            break
        prev = cur
    else:
        raise RuntimeError(f"two-body levels not converged in box size (L={L})")
    even, odd = cur
    energies = np.concatenate([even, odd])
    labels = np.array(["even"] * len(even) + ["odd"] * len(odd))
    order = np.argsort(energies, kind="stable")
    return TwoBodySpectrum(p, mu2, energies[order], tuple(labels[order]), L)


def wkb_count(p: PairPotential, mu2: float = 0.5) -> float:
    """Semiclassical bound-state count of one parity: ``(1/pi) int sqrt(2 mu2 (-U)) dr``.

    The integral runs from the zero-energy turning point to infinity. For
    Morse it is done in closed form (``sqrt(2 mu2 D) r0``).
    """
    if p.kind is PotentialKind.MORSE:
        return math.sqrt(2.0 * mu2 * p.depth) * p.width
    r_t = turning_point(p)
    val, _ = quad(lambda r: math.sqrt(max(0.0, -2.0 * mu2 * evaluate_potential(p, r))), r_t, np.inf,
                  limit=200)
    return val / math.pi


def turning_point(p: PairPotential) -> float:
    """Smallest ``r >= 0`` with ``U(r) <= 0``."""
    if evaluate_potential(p, 0.0) <= 0:
        return 0.0
    return brentq(lambda r: evaluate_potential(p, r), 0.0, p.minimum_location + p.width)


def compute_Eb(p: PairPotential, params: SystemParams) -> DimerReference:
    """Ground-state energies of every pair type and their dimer-dimer average."""
    cache = {}

    def ground(mu):
        key = round(mu, 14)
        if key not in cache:
            spec = solve_two_body(p, mu)
            if spec.count == 0:
                raise ValueError(f"pair with reduced mass {mu} has no bound state")
            cache[key] = spec.ground
        return cache[key]

    return DimerReference(E12=ground(params.mu12), E34=ground(params.mu34),
                          E13=ground(params.mu13), E24=ground(params.mu13))


def pair_levels(p: PairPotential, params: SystemParams) -> dict[str, TwoBodySpectrum]:
    """Two-body spectra for the like pairs (12), (34) and the mixed pair (13)."""
    out = {"12": solve_two_body(p, params.mu12)}
    out["34"] = out["12"] if params.mu34 == params.mu12 else solve_two_body(p, params.mu34)
    out["13"] = out["12"] if params.mu13 == params.mu12 else solve_two_body(p, params.mu13)
    return out


def threshold_sums(levels: dict[str, TwoBodySpectrum]) -> np.ndarray:
    """Sorted energies of two separated dimers, ``(12)+(34)`` or ``(13)+(24)``.

    The ``(14)+(23)`` arrangement has the same levels as ``(13)+(24)``.
    """
    a = levels["12"].energies[:, None] + levels["34"].energies[None, :]
    b = levels["13"].energies[:, None] + levels["13"].energies[None, :]
    return np.unique(np.concatenate([a.ravel(), b.ravel()]))
