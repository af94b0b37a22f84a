import math

import numpy as np
import pytest

from toymol.adiabatic import (AdiabaticSpectrum, BasisSpec, EnergyWindow, HyperangularSolver, channel_density,
                              default_basis, load_spectrum, merge_parities, parity_pairing, save_spectrum, scan,
                              solve_at_R, threshold_deviation)
from toymol.config import GridConfig
from toymol.model import PairPotential, SystemParams
from toymol.spline_galerkin import assemble_hyperangular, solve_lowest

SMALL = BasisSpec(30, 30)


def _free_levels(parity, lmax=30):
    # l(l+1) for every admissible (l, m): m even, 2 <= m <= l, parity of l + m fixed
    out = [l * (l + 1) for l in range(lmax + 1) for m in range(2, l + 1, 2)
           if ((l + m) % 2 == 0) == (parity == "even")]
    return np.sort(np.array(out, dtype=float))


@pytest.mark.parametrize("parity,lowest", [("even", 6.0), ("odd", 12.0)])
def test_free_spectrum(parity, lowest):
    R = 2.3
    prm = SystemParams(parity=parity, mu_convention="geometric")
    mu = prm.mu
    got = solve_at_R(R, None, prm, count=20, basis=BasisSpec(40, 40)).values
    want = _free_levels(parity)[:20] / (2 * mu * R * R)
    assert got[0] * 2 * mu * R * R == pytest.approx(lowest, rel=1e-8)
    assert np.allclose(got, want, rtol=1e-6)


def test_free_scaling_covariance():
    prm = SystemParams(parity="even")
    alpha = 1.7
    a = solve_at_R(2.0, None, prm, count=12, basis=SMALL).values
    solver = HyperangularSolver(None, prm, SMALL)
    m = assemble_hyperangular(solver.basis_theta, solver.basis_phi, alpha * 2.0, None, prm.mu / alpha ** 2,
                              operators=solver.operators)
    b = solve_lowest(m, count=12).values
    assert np.allclose(a, b, rtol=1e-12)


def _on_edge(solver, vectors):
    # values of each eigenvector along theta = pi/2
    phi = np.linspace(0.05, math.pi / 2 - 0.05, 17)
    Bt = solver.basis_theta.evaluate(np.array([math.pi / 2]))[0]
    Bp = solver.basis_phi.evaluate(phi)
    nt = solver.basis_theta.size
    C = vectors.T.reshape(vectors.shape[1], solver.basis_phi.size, nt)
    return np.einsum("kpt,t,fp->kf", C, Bt, Bp)


def test_parity_sectors_disjoint():
    p = PairPotential.morse(20.0)
    even = HyperangularSolver(p, SystemParams.from_ratio(1.3, parity="even"), SMALL)
    odd = HyperangularSolver(p, SystemParams.from_ratio(1.3, parity="odd"), SMALL)
    ev, _ = even.solve(3.0, count=10)
    od, _ = odd.solve(3.0, count=10)
    assert np.all(np.max(np.abs(_on_edge(even, ev.vectors)), axis=1) > 1e-6)
    assert np.max(np.abs(_on_edge(odd, od.vectors))) < 1e-12


def test_shallow_potential_has_fewer_curves():
    window = EnergyWindow(-181.65, 30.0)
    counts = {}
    for D in (10.0, 100.0):
        vals = solve_at_R(3.8, PairPotential.morse(D), SystemParams.from_ratio(1.3), window.hi + 1,
                          basis=SMALL).values
        counts[D] = len(window.select(vals))
    assert counts[10.0] < counts[100.0]


def test_default_basis_range():
    assert default_basis(PairPotential.morse(100.0)).n_theta == 150
    assert default_basis(PairPotential.morse(10.0)).n_theta == 100
    assert default_basis(PairPotential.morse(200.0, 1.5)).n_phi == 160
    assert BasisSpec(100, 120).scaled(1.25) == BasisSpec(125, 150)


def test_grid_has_43_rows():
    R = GridConfig().values()
    assert len(R) == 43
    assert R[0] == 1.6 and R[-1] == 10.0


@pytest.fixture(scope="module")
def small_scan():
    p = PairPotential.morse(10.0)
    prm = SystemParams.from_ratio(1.3)
    return p, prm, scan([2.0, 2.5, 3.0], p, prm, window=EnergyWindow(-18.0, 6.0), basis=SMALL)


def test_scan_shape_and_order(small_scan):
    _, _, spec = small_scan
    assert spec.curves.shape[0] == 3
    for i in range(3):
        lv = spec.levels(i)
        assert np.all(np.diff(lv) >= 0)
        assert np.all(lv < spec.ceilings[i])
        assert spec.ceilings[i] > -12.0


def test_scan_with_workers_matches_serial(small_scan):
    p, prm, spec = small_scan
    par = scan([2.0, 2.5, 3.0], p, prm, window=EnergyWindow(-18.0, 6.0), basis=SMALL, workers=2)
    assert np.array_equal(par.curves, spec.curves, equal_nan=True)
    assert np.array_equal(par.ceilings, spec.ceilings)


def test_scan_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        scan([2.0, 1.0], PairPotential.morse(10.0), SystemParams(), ceiling=0.0, basis=SMALL)


def test_ceiling_is_complete(small_scan):
    # everything below the ceiling is returned: compare against a larger count-based solve
    p, prm, spec = small_scan
    solver = HyperangularSolver(p, prm, SMALL)
    n = spec.counts()[1]
    more, _ = solver.solve(2.5, count=n + 3)
    assert np.allclose(more.values[:n], spec.levels(1), rtol=1e-10)
    assert more.values[n] >= spec.ceilings[1]


def test_round_trip_bit_exact(small_scan, tmp_path):
    _, _, spec = small_scan
    path = tmp_path / "spectrum.csv"
    save_spectrum(spec, path, {"config_hash": "x"})
    back = load_spectrum(path)
    assert np.array_equal(back.R_grid, spec.R_grid)
    assert np.array_equal(back.curves, spec.curves, equal_nan=True)
    assert np.array_equal(back.ceilings, spec.ceilings)
    assert back.parity == spec.parity and back.basis == spec.basis
    assert back.meta["config_hash"] == "x"
    assert path.read_text().splitlines()[0].startswith("R,U_1,U_2")


def _synthetic(rows, ceilings, parity="even"):
    width = max(len(r) for r in rows)
    curves = np.full((len(rows), width), np.nan)
    for i, r in enumerate(rows):
        curves[i, : len(r)] = r
    return AdiabaticSpectrum(np.arange(1.0, len(rows) + 1), curves, np.asarray(ceilings, float), parity, {}, {}, {})


def test_channel_density_rows():
    spec = _synthetic([[-3.0, -1.0, 0.5], [-2.5, -1.5, -0.5, 0.2]], [1.0, 1.0])
    rho = channel_density(spec, EnergyWindow(-1.0, 1.0))
    assert np.array_equal(rho[:, 1], [1, 2])
    assert np.allclose(rho[:, 2], [0.5, 1.0])


def test_channel_density_needs_ceiling():
    spec = _synthetic([[-3.0, -1.0]], [-0.5])
    with pytest.raises(ValueError):
        channel_density(spec, EnergyWindow(-1.0, 1.0))


def test_window_validation():
    with pytest.raises(ValueError):
        EnergyWindow(-10.0, 0.0)
    w = EnergyWindow(-10.0, 2.0)
    assert (w.lo, w.hi, w.width) == (-12.0, -8.0, 4.0)


def test_merge_parities():
    a = _synthetic([[-3.0, -1.0], [-2.0]], [0.0, 0.0])
    b = _synthetic([[-2.0], [-2.5, -1.0, -0.5]], [0.0, -0.2], parity="odd")
    m = merge_parities(a, b)
    assert m.parity == "both"
    assert np.array_equal(m.levels(0), [-3.0, -2.0, -1.0])
    assert np.array_equal(m.levels(1), [-2.5, -2.0, -1.0, -0.5])
    assert np.array_equal(m.ceilings, [0.0, -0.2])


def test_threshold_deviation():
    t = np.array([-10.0, -8.0, -6.0])
    d = threshold_deviation([-10.0, -8.0 + 0.01, -6.0 + 0.5], t, EnergyWindow(-8.0, 3.0))
    assert d["n"] == 3
    assert d["mean_spacing"] == pytest.approx(2.25)
    assert d["max_ratio"] == pytest.approx(0.5 / 2.25)
    assert d["matched_fraction"] == pytest.approx(2 / 3)


def test_parity_pairing():
    e = np.array([-5.0, -3.0, -1.0])
    w = EnergyWindow(-3.0, 2.5)
    exact = parity_pairing(e, e + 1e-6, w)
    assert exact["max_gap"] < 1e-3 and exact["paired_fraction"] == 1.0
    off = parity_pairing(e, e + 0.5, w)
    assert off["max_gap"] > 0.1 and off["paired_fraction"] == 0.0


@pytest.mark.long
def test_basis_converged_at_large_R():
    p = PairPotential.morse(100.0)
    prm = SystemParams.from_ratio(1.3)
    window = EnergyWindow(-181.6516, 30.0)
    base = default_basis(p)
    a = solve_at_R(10.0, p, prm, window.hi + 5, basis=base).values
    b = solve_at_R(10.0, p, prm, window.hi + 5, basis=base.scaled(1.25)).values
    la, lb = window.select(a), window.select(b)
    assert len(la) == len(lb)
    spacing = np.mean(np.diff(lb))
    assert np.max(np.abs(la - lb)) <= 0.01 * spacing
