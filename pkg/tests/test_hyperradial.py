import math
import warnings

import numpy as np
import pytest

from toymol.adiabatic import AdiabaticSpectrum, EnergyWindow
from toymol.hyperradial import (BoundStateSet, ChannelCurve, channel_curves, fit_scaling, flatness,
                                load_bound_states, pool_bound_states, rho4, rho4_estimate, save_bound_states,
                                scaling_sweep, solve_channel)
from toymol.model import PairPotential
from toymol.twobody import morse_oracle


def _morse(R, D=100.0):
    return D * np.expm1(-(R - 1.0)) ** 2 - D


@pytest.fixture(scope="module")
def morse_curve():
    # the ladder belongs to the untruncated well, so the domain reaches past R = 0
    R = np.linspace(-3.0, 14.0, 3401)
    return ChannelCurve(R, _morse(R))


def test_curve_interpolates_samples(morse_curve):
    assert np.allclose(morse_curve(morse_curve.R_grid), morse_curve.values, rtol=0, atol=1e-12)
    assert morse_curve(100.0) == morse_curve.asymptote
    assert morse_curve.minimum == pytest.approx(-100.0, abs=1e-9)


def test_curve_rejects_bad_samples():
    with pytest.raises(ValueError):
        ChannelCurve(np.array([1.0, 2.0]), np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        ChannelCurve(np.array([1.0]), np.array([0.0]))


def test_particle_in_box():
    L, mu = 3.0, 0.8
    curve = ChannelCurve(np.linspace(0, L, 7), np.zeros(7))
    # a negative guard raises the cutoff above the flat floor so box states survive
    e = solve_channel(curve, mu, edge=-40.0)
    n = np.arange(1, len(e) + 1)
    assert len(e) >= 5
    assert np.allclose(e, n ** 2 * math.pi ** 2 / (2 * mu * L * L), rtol=1e-6)


def test_morse_curve_against_oracle(morse_curve):
    e = solve_channel(morse_curve, 0.5)
    ref = morse_oracle(100.0, 1.0, 0.5)
    deep = ref < -20
    assert np.allclose(e[: deep.sum()], ref[deep], atol=1e-5)


def test_gauge_shift(morse_curve):
    c = 17.25
    a = solve_channel(morse_curve, 0.5, n_intervals=600)
    b = solve_channel(morse_curve.shifted(c), 0.5, n_intervals=600)
    assert len(a) == len(b)
    assert np.allclose(b - a, c, atol=1e-9, rtol=0)


def test_refinement_is_variational(morse_curve):
    prev = None
    for n in (100, 200, 400):
        e = solve_channel(morse_curve, 0.5, n_intervals=n)[:6]
        if prev is not None:
            assert np.all(e <= prev + 1e-10)
        prev = e


def test_domain_errors(morse_curve):
    with pytest.raises(ValueError):
        solve_channel(morse_curve, 0.5, (5.0, 5.0))
    with pytest.raises(ValueError):
        solve_channel(morse_curve, 0.5, (-4.0, 5.0))


# -- pooling on synthetic spectra ----------------------------------------------------------


def _spectrum(R, columns):
    curves = np.column_stack(columns)
    return AdiabaticSpectrum(R, curves, np.full(len(R), np.inf), "even", {}, {}, {})


R_GRID = np.linspace(1.0, 20.0, 381)


def _well(depth, asymptote, centre=4.0):
    return asymptote - depth * np.exp(-((R_GRID - centre) / 1.2) ** 2)


def _pool(spec, window, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return pool_bound_states(spec, window, 1.0, R_max=20.0, E_b=100.0, **kw)


def test_empty_pool():
    spec = _spectrum(R_GRID, [_well(5.0, -10.0), _well(5.0, 0.0)])
    states = _pool(spec, EnergyWindow(-200.0, 10.0))
    assert states.count == 0
    assert states.approximation == "zero-coupling"


def test_single_channel_pool():
    deep = _well(60.0, -80.0)
    high = np.full_like(R_GRID, 50.0)
    spec = _spectrum(R_GRID, [deep, high, high + 1])
    window = EnergyWindow(-120.0, 25.0)
    states = _pool(spec, window)
    alone = solve_channel(ChannelCurve(R_GRID, deep), 1.0, (R_GRID[0], 20.0), edge=1e-4, top=window.hi)
    assert np.array_equal(states.energies, window.select(alone))
    assert np.all(states.channels == 0)
    assert states.diagnostics["channels_solved"] == 1


def test_pool_is_additive():
    a, b = _well(40.0, -90.0), _well(30.0, -75.0, centre=6.0)
    window = EnergyWindow(-100.0, 20.0)
    both = _pool(_spectrum(R_GRID, [a, b]), window)
    only_a = _pool(_spectrum(R_GRID, [a, a + 500]), window)
    only_b = _pool(_spectrum(R_GRID, [b - 500, b]), window)
    assert both.count == only_a.count + only_b.count
    assert np.all(np.diff(both.energies) >= 0)
    assert np.all(window.mask(both.energies))


def test_pooled_states_below_their_asymptote():
    a, b = _well(40.0, -90.0), _well(30.0, -75.0, centre=6.0)
    states = _pool(_spectrum(R_GRID, [a, b]), EnergyWindow(-100.0, 30.0))
    asym = np.array([a[-1], b[-1]])
    assert np.all(states.energies < asym[states.channels])


def test_flatness_flags_sloped_tail():
    slope = np.linspace(-50, -40, len(R_GRID))
    spec = _spectrum(R_GRID, [slope, slope + 1, slope + 2])
    f = flatness(spec, EnergyWindow(-45.0, 10.0))
    assert not f["flat"]
    with pytest.warns(RuntimeWarning):
        pool_bound_states(spec, EnergyWindow(-45.0, 10.0), 1.0)
    with pytest.raises(ValueError):
        pool_bound_states(spec, EnergyWindow(-45.0, 10.0), 1.0, strict=True)
    flat = _spectrum(R_GRID, [_well(3.0, -50.0), _well(3.0, -48.0)])
    assert flatness(flat, EnergyWindow(-49.0, 5.0))["flat"]


def test_channel_fill_uses_ceiling():
    R = np.array([1.0, 2.0, 3.0])
    curves = np.array([[-5.0, -1.0], [-4.0, np.nan], [-3.0, np.nan]])
    spec = AdiabaticSpectrum(R, curves, np.array([0.0, 2.0, 3.0]), "even", {}, {}, {})
    c = channel_curves(spec)
    assert np.array_equal(c[1].values, [-1.0, 2.0, 3.0])


# -- rho4 ------------------------------------------------------------------------------------


def _uniform(spacing=0.1, window=EnergyWindow(-181.7, 30.0)):
    E = np.arange(window.lo + 0.037, window.hi, spacing)
    return BoundStateSet(E, np.zeros(len(E), dtype=int), window)


def test_rho4_uniform():
    assert rho4(_uniform(), 3.0) == pytest.approx(10.0, abs=1 / 3)


def test_rho4_doubling_width():
    s = _uniform()
    assert abs(rho4(s, 6.0) / rho4(s, 3.0) - 1) < 0.2


def test_rho4_errors():
    s = _uniform()
    with pytest.raises(ValueError):
        rho4(s, 3.0, center=s.window.hi)
    with pytest.raises(ValueError):
        rho4(s, 0.0)


def test_rho4_estimate_scaling():
    D = [50.0, 100.0, 150.0, 200.0]
    f = fit_scaling("D", D, [rho4_estimate(PairPotential.morse(d)) for d in D])
    assert f.exponent == pytest.approx(0.5, abs=1e-9)
    r = [0.8, 1.0, 1.25, 1.5]
    f = fit_scaling("r0", r, [rho4_estimate(PairPotential.morse(100.0, x)) for x in r])
    assert f.exponent == pytest.approx(3.0, abs=1e-9)
    assert rho4_estimate(PairPotential.morse(100.0), -50.0) < rho4_estimate(PairPotential.morse(100.0))


# -- scaling fits ----------------------------------------------------------------------------


def test_fit_identity():
    D = np.array([50.0, 100.0, 150.0, 200.0])
    f = fit_scaling("D", D, 7 * np.sqrt(D))
    assert f.exponent == pytest.approx(0.5, abs=1e-12)
    assert f.amplitude == pytest.approx(7.0, rel=1e-12)
    assert f.fixed_amplitude == pytest.approx(7.0, rel=1e-12)
    assert np.allclose(f.fixed_residuals, 0, atol=1e-12)
    assert f.residual < 1e-12


def test_sweep_calls_density():
    seen = []

    def density(r0):
        seen.append(r0)
        return 2.0 * r0 ** 3

    f = scaling_sweep("r0", [0.8, 1.0, 1.25, 1.5], density)
    assert seen == [0.8, 1.0, 1.25, 1.5]
    assert f.exponent == pytest.approx(3.0)
    assert f.to_json()["values"] == [0.8, 1.0, 1.25, 1.5]


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_scaling("D", [1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_scaling("D", [1, 2, 3, 4], [1, 0, 3, 4])
    with pytest.raises(ValueError):
        scaling_sweep("mu", [1, 2, 3, 4], lambda v: v)


def test_bound_states_round_trip(tmp_path):
    s = BoundStateSet(np.array([-190.123456789012345, -185.0, -170.1]), np.array([0, 3, 1]),
                      EnergyWindow(-181.7, 30.0), diagnostics={"channels_solved": 4})
    path = tmp_path / "states.csv"
    save_bound_states(s, path, {"config_hash": "abc"})
    assert path.read_text().splitlines()[:2] == ["nu,E", f"1,{-190.123456789012345!r}"]
    back = load_bound_states(path)
    assert np.array_equal(back.energies, s.energies)
    assert np.array_equal(back.channels, s.channels)
    assert back.window == s.window
    assert back.diagnostics == s.diagnostics
