"""Pair potentials, masses and coordinate maps for four atoms on a line.

Atoms 1 and 2 are identical fermions, as are 3 and 4. The centre of mass is
removed and the remaining three degrees of freedom are written as
mass-scaled Jacobi coordinates ``(rho1, rho2, rho3)`` and, from those, as
hyperspherical coordinates ``(R, theta, phi)``::

    rho1 = R cos(phi) sin(theta)
    rho2 = R sin(phi) sin(theta)
    rho3 = R cos(theta)

All functions are pure and accept numpy arrays where that makes sense.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class PotentialKind(str, enum.Enum):
    MORSE = "morse"
    POSCHL_TELLER = "poschl_teller"


class Parity(str, enum.Enum):
    EVEN = "even"
    ODD = "odd"


class MuConvention(str, enum.Enum):
    """How the hyperradial reference mass is derived from the four masses."""

    ATOM = "atom"  # mu = m1
    GEOMETRIC = "geometric"  # mu = (m1 m2 m3 m4 / M) ** (1/3)


@dataclass(frozen=True)
class PairPotential:
    """Two-atom interaction ``U(r)``, identical for every pair.

    ``inverse_range`` is always ``1 / width``; it is derived, not free.
    """

    kind: PotentialKind
    depth: float
    width: float = 1.0
    inverse_range: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", PotentialKind(self.kind))
        if not (self.depth > 0 and math.isfinite(self.depth)):
            raise ValueError(f"depth must be positive, got {self.depth}")
        if not (self.width > 0 and math.isfinite(self.width)):
            raise ValueError(f"width must be positive, got {self.width}")
        object.__setattr__(self, "inverse_range", 1.0 / self.width)

    @classmethod
    def morse(cls, depth: float, width: float = 1.0) -> "PairPotential":
        return cls(PotentialKind.MORSE, depth, width)

    @classmethod
    def poschl_teller(cls, depth: float, width: float = 1.0) -> "PairPotential":
        return cls(PotentialKind.POSCHL_TELLER, depth, width)

    def __call__(self, r):
        return evaluate_potential(self, r)

    @property
    def minimum_location(self) -> float:
        return self.width if self.kind is PotentialKind.MORSE else 0.0


def evaluate_potential(p: PairPotential, r):
    """Evaluate ``U(r)`` for ``r >= 0``. Callers pass ``|separation|``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("pair potential needs r >= 0; pass |separation|")
    if p.kind is PotentialKind.MORSE:
        y = -np.expm1(-p.inverse_range * (r - p.width))
        out = p.depth * y * y - p.depth
    else:
        y = np.exp(-2.0 * r / p.width)  # sech^2 without overflow
        out = -4.0 * p.depth * y / (1.0 + y) ** 2
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SystemParams:
    """Masses, reduced masses and the parity sector.

    ``m1 == m2`` and ``m3 == m4`` are enforced because the pairs are
    identical fermions.
    """

    m1: float = 1.0
    m3: float = 1.0
    parity: Parity = Parity.EVEN
    mu_convention: MuConvention = MuConvention.ATOM

    def __post_init__(self):
        object.__setattr__(self, "parity", Parity(self.parity))
        object.__setattr__(self, "mu_convention", MuConvention(self.mu_convention))
        if not (self.m1 > 0 and self.m3 > 0):
            raise ValueError("masses must be positive")

    @classmethod
    def from_ratio(cls, mass_ratio: float, parity="even", mu_convention="atom"):
        return cls(m1=1.0, m3=float(mass_ratio), parity=parity, mu_convention=mu_convention)

    @property
    def masses(self) -> tuple[float, float, float, float]:
        return (self.m1, self.m1, self.m3, self.m3)

    @property
    def m2(self) -> float:
        return self.m1

    @property
    def m4(self) -> float:
        return self.m3

    @property
    def total_mass(self) -> float:
        return 2 * self.m1 + 2 * self.m3

    @property
    def mu12(self) -> float:
        return self.m1 * self.m2 / (self.m1 + self.m2)

    @property
    def mu34(self) -> float:
        return self.m3 * self.m4 / (self.m3 + self.m4)

    @property
    def mu1234(self) -> float:
        return (self.m1 + self.m2) * (self.m3 + self.m4) / self.total_mass

    @property
    def mu13(self) -> float:
        """Reduced mass of a mixed pair (1,3), equal to that of (2,4), (1,4), (2,3)."""
        return self.m1 * self.m3 / (self.m1 + self.m3)

    @property
    def mu(self) -> float:
        if self.mu_convention is MuConvention.ATOM:
            return self.m1
        return (self.m1 * self.m2 * self.m3 * self.m4 / self.total_mass) ** (1.0 / 3.0)

    def with_parity(self, parity) -> "SystemParams":
        return SystemParams(self.m1, self.m3, Parity(parity), self.mu_convention)


@dataclass(frozen=True)
class HypersphericalPoint:
    R: float
    theta: float
    phi: float

    def __post_init__(self):
        if self.R < 0:
            raise ValueError("hyperradius must be non-negative")


def jacobi_from_lab(positions, params: SystemParams):
    """Mass-scaled Jacobi coordinates from lab positions ``r1..r4``.

    ``positions`` may have shape ``(4,)`` or ``(..., 4)``.
    """
    x = np.asarray(positions, dtype=float)
    r1, r2, r3, r4 = (x[..., i] for i in range(4))
    m1, m2, m3, m4 = params.masses
    mu = params.mu
    rho1 = math.sqrt(params.mu12 / mu) * (r1 - r2)
    rho2 = math.sqrt(params.mu34 / mu) * (r3 - r4)
    com12 = (m1 * r1 + m2 * r2) / (m1 + m2)
    com34 = (m3 * r3 + m4 * r4) / (m3 + m4)
    rho3 = math.sqrt(params.mu1234 / mu) * (com12 - com34)
    return rho1, rho2, rho3


def lab_from_jacobi(rho1, rho2, rho3, params: SystemParams):
    """Lab positions with the centre of mass at the origin, shape ``(..., 4)``."""
    m1, m2, m3, m4 = params.masses
    mu = params.mu
    d12 = np.sqrt(mu / params.mu12) * np.asarray(rho1, dtype=float)
    d34 = np.sqrt(mu / params.mu34) * np.asarray(rho2, dtype=float)
    sep = np.sqrt(mu / params.mu1234) * np.asarray(rho3, dtype=float)
    M = params.total_mass
    com12 = (m3 + m4) / M * sep
    com34 = -(m1 + m2) / M * sep
    r1 = com12 + m2 / (m1 + m2) * d12
    r2 = com12 - m1 / (m1 + m2) * d12
    r3 = com34 + m4 / (m3 + m4) * d34
    r4 = com34 - m3 / (m3 + m4) * d34
    return np.stack(np.broadcast_arrays(r1, r2, r3, r4), axis=-1)


def hyper_from_jacobi(rho1, rho2, rho3):
    """Return ``(R, theta, phi)`` with ``theta in [0, pi]``, ``phi in [-pi, pi)``.

    At the origin ``R = 0`` and the angles are meaningless; a
    ``RuntimeWarning`` is emitted in that case.
    """
    rho1, rho2, rho3 = (np.asarray(v, dtype=float) for v in (rho1, rho2, rho3))
    R = np.sqrt(rho1 ** 2 + rho2 ** 2 + rho3 ** 2)
    if np.any(R == 0):
        import warnings

        warnings.warn("hyperspherical angles undefined at R = 0", RuntimeWarning, stacklevel=2)
    theta = np.arctan2(np.hypot(rho1, rho2), rho3)
    phi = np.arctan2(rho2, rho1)
    phi = np.where(phi >= np.pi, phi - 2 * np.pi, phi)
    if R.ndim == 0:
        return float(R), float(theta), float(phi)
    return R, theta, phi


def jacobi_from_hyper(R, theta, phi):
    R, theta, phi = (np.asarray(v, dtype=float) for v in (R, theta, phi))
    st = np.sin(theta)
    return R * np.cos(phi) * st, R * np.sin(phi) * st, R * np.cos(theta)


def separations_from_angles(R, theta, phi, params: SystemParams):
    """Signed separations ``(r12, r34, r13, r24, r14, r23)`` as arrays.

    Broadcasts over ``R``, ``theta`` and ``phi``.
    """
    rho1, rho2, rho3 = jacobi_from_hyper(R, theta, phi)
    r = lab_from_jacobi(rho1, rho2, rho3, params)
    r1, r2, r3, r4 = (r[..., i] for i in range(4))
    return r1 - r2, r3 - r4, r1 - r3, r2 - r4, r1 - r4, r2 - r3


def pair_separations(pt: HypersphericalPoint, params: SystemParams):
    """Signed pair separations ``(r12, r34, r13, r24, r14, r23)`` at one point."""
    return tuple(float(s) for s in separations_from_angles(pt.R, pt.theta, pt.phi, params))


def potential_on_grid(R, theta, phi, p: PairPotential, params: SystemParams):
    """``V = sum_{i<j} U(|r_ij|)``, broadcasting over the angle arrays."""
    total = 0.0
    for s in separations_from_angles(R, theta, phi, params):
        total = total + evaluate_potential(p, np.abs(s))
    return total


def total_potential(pt: HypersphericalPoint, p: PairPotential, params: SystemParams) -> float:
    return float(potential_on_grid(pt.R, pt.theta, pt.phi, p, params))
