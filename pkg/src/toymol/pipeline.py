"""Stages behind the command line: two-body, adiabatic scan, statistics, bound states, sweeps.

Heavy results live under ``<out>/cache/<stage>-<hash>/`` keyed by the hash of
the configuration subtree they depend on, so re-running a later stage never
repeats an eigensolve. Every file written at the top of ``<out>`` carries the
full configuration hash in itself or in a ``.json`` sidecar.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time

import numpy as np

from . import __version__
from .adiabatic import (AdiabaticSpectrum, BasisSpec, EnergyWindow, channel_density, default_basis,
                        load_spectrum, merge_parities, parity_pairing, save_spectrum, scan,
                        threshold_deviation)
from .config import AUTO, ConfigError, RunConfig, config_hash, from_dict, stage_hash
from .hyperradial import (fit_scaling, pool_bound_states, rho4, rho4_estimate, save_bound_states)
from .levelstats import (brody_vs_R, chaos_distances, fit_brody, kde_table, spacings)
from .model import PairPotential, SystemParams
from .twobody import DimerReference, pair_levels, threshold_sums, wkb_count

log = logging.getLogger(__name__)


# -- small I/O helpers --------------------------------------------------------------


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _num(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_num(v) for v in x]
    return x


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_num(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cell(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def write_csv(path, header, rows, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_cell(v) for v in r) + "\n")
    if meta is not None:
        write_json(os.fspath(path) + ".json", meta)


# -- run context --------------------------------------------------------------------


class Run:
    """Output directory, manifest bookkeeping and cached stage results for one config."""

    def __init__(self, cfg: RunConfig, out: str | None = None, workers: int | None = None,
                 cache_root: str | None = None):
        self.cfg = cfg
        self.out = out or cfg.out
        self.workers = workers or cfg.workers
        self.hash = config_hash(cfg)
        self.cache_root = cache_root or os.path.join(self.out, "cache")
        os.makedirs(self.out, exist_ok=True)
        os.makedirs(self.cache_root, exist_ok=True)
        self.manifest_path = os.path.join(self.out, "manifest.json")
        self.manifest = self._load_manifest()
        self._memo: dict = {}

    def _load_manifest(self) -> dict:
        if os.path.exists(self.manifest_path):
            m = read_json(self.manifest_path)
        else:
            m = {"artifacts": {}}
        m.update({"config_hash": self.hash, "code_version": __version__, "config": self.cfg.to_dict()})
        return m

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def cache_dir(self, key: str) -> str:
        d = os.path.join(self.cache_root, key)
        os.makedirs(d, exist_ok=True)
        return d

    def meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "code_version": __version__, **extra}

    def record(self, name: str, path: str, stage: str, cached: bool, seconds: float) -> None:
        self.manifest["artifacts"][name] = {"path": os.path.relpath(path, self.out), "stage": stage,
                                            "config_hash": self.hash, "cached": cached,
                                            "seconds": round(seconds, 3)}

    def save_manifest(self, error: dict | None = None) -> None:
        if error is not None:
            self.manifest["error"] = error
        else:
            self.manifest.pop("error", None)
        write_json(self.manifest_path, self.manifest)

    # -- physics objects --

    @property
    def potential(self) -> PairPotential:
        c = self.cfg.potential
        return PairPotential(c.kind, c.D, c.r0)

    def params(self, parity: str = "even") -> SystemParams:
        return SystemParams(1.0, self.cfg.mass_ratio, parity, self.cfg.mu_convention)

    def basis(self) -> BasisSpec:
        b = self.cfg.basis
        if b.n_theta is None:
            d = default_basis(self.potential, b.form)
            return BasisSpec(d.n_theta, d.n_phi, b.order, b.form, b.quad_nodes)
        return BasisSpec(b.n_theta, b.n_phi, b.order, b.form, b.quad_nodes)

    def window(self, E_b: float) -> EnergyWindow:
        w = self.cfg.window
        return EnergyWindow(-E_b if w.center == AUTO else w.center, w.half_width)


# -- stages ---------------------------------------------------------------------------


def twobody_stage(run: Run) -> dict:
    """Two-body levels of every pair type and the dimer-pair reference energy."""
    if "twobody" in run._memo:
        return run._memo["twobody"]
    t0 = time.perf_counter()
    key = "twobody-" + stage_hash(run.cfg, "twobody")
    cache = os.path.join(run.cache_dir(key), "levels.json")
    cached = os.path.exists(cache)
    if cached:
        data = read_json(cache)
    else:
        p, prm = run.potential, run.params()
        levels = pair_levels(p, prm)
        ref = DimerReference(levels["12"].ground, levels["34"].ground, levels["13"].ground, levels["13"].ground)
        data = {"pairs": {k: {"mu": s.reduced_mass, "energies": list(s.energies), "parities": list(s.parities),
                              "box": s.box} for k, s in levels.items()},
                "E12": ref.E12, "E34": ref.E34, "E13": ref.E13, "E24": ref.E24, "E_b": ref.E_b,
                "thresholds": list(threshold_sums(levels))}
        write_json(cache, data)
    rows = []
    for k, s in sorted(data["pairs"].items()):
        for n, (E, par) in enumerate(zip(s["energies"], s["parities"])):
            rows.append((k, s["mu"], n, par, E))
    csv_path = run.path("twobody_levels.csv")
    write_csv(csv_path, ["pair", "mu", "n", "parity", "E"], rows, run.meta())
    summary = {"E_b": data["E_b"], "E12": data["E12"], "E34": data["E34"], "E13": data["E13"], "E24": data["E24"],
               "counts": {k: len(s["energies"]) for k, s in data["pairs"].items()},
               "N2_wkb": wkb_count(run.potential, 0.5), **run.meta()}
    # per-parity count of the (12) pair, comparable with the semiclassical N2_wkb
    summary["N2"] = sum(1 for par in data["pairs"]["12"]["parities"] if par == "even")
    js = run.path("twobody.json")
    write_json(js, summary)
    dt = time.perf_counter() - t0
    run.record("twobody_levels", csv_path, "twobody", cached, dt)
    run.record("twobody", js, "twobody", cached, dt)
    out = {**summary, "thresholds": np.array(data["thresholds"])}
    run._memo["twobody"] = out
    return out


def _spectrum_for(run: Run, parity: str, window: EnergyWindow) -> tuple[AdiabaticSpectrum, AdiabaticSpectrum | None, bool]:
    key = "adiabatic-" + stage_hash(run.cfg, "adiabatic", parity)
    d = run.cache_dir(key)
    main, probe = os.path.join(d, "spectrum.csv"), os.path.join(d, "probes.csv")
    probes = sorted(set(run.cfg.R_grid.probes))
    if os.path.exists(main + ".json") and (not probes or os.path.exists(probe + ".json")):
        return load_spectrum(main), (load_spectrum(probe) if probes else None), True
    p, prm, basis = run.potential, run.params(parity), run.basis()

    def progress(i, R, out):
        log.info("%s R=%.4g: %d levels below %.6g", parity, R, len(out[0]), out[1])

    spec = scan(run.cfg.R_grid.values(), p, prm, window=window, basis=basis, workers=run.workers,
                progress=progress)
    pspec = None
    if probes:
        pspec = scan(probes, p, prm, window=window, basis=basis, workers=run.workers, progress=progress)
        save_spectrum(pspec, probe)
    save_spectrum(spec, main)
    return spec, pspec, False


def adiabatic_stage(run: Run, parity: str) -> dict:
    memo = ("adiabatic", parity)
    if memo in run._memo:
        return run._memo[memo]
    tb = twobody_stage(run)
    t0 = time.perf_counter()
    window = run.window(tb["E_b"])
    spec, pspec, cached = _spectrum_for(run, parity, window)
    meta = run.meta(stage="adiabatic")
    sp_path = run.path(f"spectrum_{parity}.csv")
    save_spectrum(spec, sp_path, meta)
    rho = channel_density(spec, window)
    rho_path = run.path(f"rho_a_{parity}.csv")
    write_csv(rho_path, ["R", "count", "rho_a"], [(r[0], int(r[1]), r[2]) for r in rho],
              run.meta(window={"center": window.center, "half_width": window.half_width}))
    last = len(spec.R_grid) - 1
    summary = {"parity": parity, "window": {"center": window.center, "half_width": window.half_width},
               "basis": spec.basis, "n_R": len(spec.R_grid),
               "rho_a_peak_R": float(rho[int(np.argmax(rho[:, 2])), 0]), "rho_a_peak": float(rho[:, 2].max()),
               "asymptotics": {"R": float(spec.R_grid[last]),
                               **threshold_deviation(spec.levels(last), tb["thresholds"], window)},
               **meta}
    if pspec is not None:
        pr_path = run.path(f"probes_{parity}.csv")
        save_spectrum(pspec, pr_path, meta)
        summary["probe_counts"] = {repr(float(R)): len(window.select(pspec.levels(i)))
                                   for i, R in enumerate(pspec.R_grid)}
        run.record(f"probes_{parity}", pr_path, "adiabatic", cached, 0.0)
    js = run.path(f"adiabatic_{parity}.json")
    write_json(js, summary)
    dt = time.perf_counter() - t0
    run.record(f"spectrum_{parity}", sp_path, "adiabatic", cached, dt)
    run.record(f"rho_a_{parity}", rho_path, "adiabatic", cached, 0.0)
    run.record(f"adiabatic_{parity}", js, "adiabatic", cached, 0.0)
    out = {"spectrum": spec, "probes": pspec, "window": window, "summary": summary, "cached": cached}
    run._memo[memo] = out
    return out


def _probe_stats(run: Run, label: str, levels_at: dict, window: EnergyWindow) -> dict:
    st = run.cfg.stats
    out = {}
    for R, levels in levels_at.items():
        lv = window.select(levels)
        tag = f"{label}_R{R:g}"
        if len(lv) < 3:
            out[repr(R)] = {"n": len(lv)}
            continue
        sample = spacings(lv, window=(window.lo, window.hi))
        write_csv(run.path(f"spacings_{tag}.csv"), ["s"], [(s,) for s in sample.s], run.meta())
        write_csv(run.path(f"kde_{tag}.csv"), ["s", "p_kde", "p_poisson", "p_wigner_dyson"],
                  kde_table(sample, st.bandwidth), run.meta(bandwidth=st.bandwidth))
        fit = fit_brody(sample)
        dist = chaos_distances(lv, st.bandwidth)
        out[repr(R)] = {"n": len(lv), "q": fit.q, "ks": fit.ks, "flags": list(fit.flags),
                        "near_zero_fraction": fit.near_zero_fraction,
                        "l1_poisson": dist["poisson"], "l1_wigner_dyson": dist["wigner_dyson"]}
        for name in (f"spacings_{tag}", f"kde_{tag}"):
            run.record(name, run.path(name + ".csv"), "stats", True, 0.0)
    return out


def _q_tables(run: Run, label: str, spec: AdiabaticSpectrum, window: EnergyWindow) -> dict:
    st = run.cfg.stats
    raw, smooth = brody_vs_R(spec, window, st.points, st.width)
    write_csv(run.path(f"q_raw_{label}.csv"), ["R", "n", "q", "ks"],
              [(r[0], int(r[1]), r[2], r[3]) for r in raw], run.meta())
    write_csv(run.path(f"q_smooth_{label}.csv"), ["R", "q"], smooth,
              run.meta(points=st.points, width=st.width))
    for name in (f"q_raw_{label}", f"q_smooth_{label}"):
        run.record(name, run.path(name + ".csv"), "stats", True, 0.0)
    ok = np.isfinite(smooth[:, 1])
    if not ok.any():
        return {"q_max": None, "q_min": None}
    s = smooth[ok]
    return {"q_max": float(s[:, 1].max()), "q_max_R": float(s[np.argmax(s[:, 1]), 0]),
            "q_min": float(s[:, 1].min()), "q_min_R": float(s[np.argmin(s[:, 1]), 0])}


def stats_stage(run: Run) -> dict:
    t0 = time.perf_counter()
    n_grid = len(run.cfg.R_grid.values())
    if n_grid < run.cfg.stats.points:
        raise ConfigError("stats.points", f"smoothing window of {run.cfg.stats.points} exceeds the {n_grid}-point grid")
    sectors = {par: adiabatic_stage(run, par) for par in run.cfg.parities}
    window = next(iter(sectors.values()))["window"]
    summary = {"sectors": {}, **run.meta(stage="stats")}
    for par, a in sectors.items():
        levels_at = {}
        if a["probes"] is not None:
            levels_at = {float(R): a["probes"].levels(i) for i, R in enumerate(a["probes"].R_grid)}
        summary["sectors"][par] = {"probes": _probe_stats(run, par, levels_at, window),
                                   **_q_tables(run, par, a["spectrum"], window)}
    if len(sectors) == 2:
        ev, od = sectors["even"], sectors["odd"]
        both = merge_parities(ev["spectrum"], od["spectrum"])
        levels_at = {}
        pairing = {}
        if ev["probes"] is not None:
            for i, R in enumerate(ev["probes"].R_grid):
                levels_at[float(R)] = np.sort(np.r_[ev["probes"].levels(i), od["probes"].levels(i)])
        for i, R in enumerate(both.R_grid):
            pairing[repr(float(R))] = parity_pairing(ev["spectrum"].levels(i), od["spectrum"].levels(i), window)
        summary["sectors"]["both"] = {"probes": _probe_stats(run, "both", levels_at, window),
                                      **_q_tables(run, "both", both, window), "pairing": pairing}
    js = run.path("stats.json")
    write_json(js, summary)
    run.record("stats", js, "stats", False, time.perf_counter() - t0)
    return summary


def _rho4_center(run: Run, E_b: float) -> float:
    c = run.cfg.rho4.center
    return -E_b if c == AUTO else float(c)


def _check_rho4_window(run: Run, center: float, window: EnergyWindow) -> None:
    half = 0.5 * run.cfg.rho4.width
    if center - half < window.lo - 1e-12 or center + half > window.hi + 1e-12:
        raise ConfigError("rho4.width", f"sub-window {center} +/- {half} leaves the window [{window.lo}, {window.hi}]")


def bound4_stage(run: Run) -> dict:
    t0 = time.perf_counter()
    tb = twobody_stage(run)
    summary = {"sectors": {}, **run.meta(stage="bound4")}
    r0 = run.cfg.potential.r0
    _check_rho4_window(run, _rho4_center(run, tb["E_b"]), run.window(tb["E_b"]))
    for par in run.cfg.parities:
        a = adiabatic_stage(run, par)
        window = a["window"]
        states = pool_bound_states(a["spectrum"], window, run.params(par).mu,
                                   R_max=run.cfg.rho4.R_max_r0 * r0, E_b=tb["E_b"], r0=r0)
        path = run.path(f"bound4_states_{par}.csv")
        save_bound_states(states, path, run.meta())
        center, width = _rho4_center(run, tb["E_b"]), run.cfg.rho4.width
        info = {"count": states.count, "rho4": rho4(states, width, center), "center": center, "width": width,
                "diagnostics": states.diagnostics}
        try:
            info["rho4_double_width"] = rho4(states, 2 * width, center)
        except ValueError:
            info["rho4_double_width"] = None
        sens = {}
        for shift in (-10.0, 10.0):
            try:
                sens[repr(shift)] = rho4(states, width, center + shift)
            except ValueError:
                sens[repr(shift)] = None
        info["rho4_center_shift"] = sens
        if states.count >= 3:
            fit = fit_brody(spacings(states.energies))
            info["brody"] = {"q": fit.q, "ks": fit.ks, "n": fit.n, "flags": list(fit.flags)}
            write_csv(run.path(f"bound4_spacings_{par}.csv"), ["s"], [(s,) for s in spacings(states.energies).s],
                      run.meta())
            run.record(f"bound4_spacings_{par}", run.path(f"bound4_spacings_{par}.csv"), "bound4", False, 0.0)
        summary["sectors"][par] = info
        run.record(f"bound4_states_{par}", path, "bound4", False, 0.0)
    js = run.path("bound4.json")
    write_json(js, summary)
    run.record("bound4", js, "bound4", False, time.perf_counter() - t0)
    return summary


def sweep_config(cfg: RunConfig, variable: str, value: float) -> RunConfig:
    """Configuration for one point of a scaling sweep.

    The R grid is stretched with ``r0`` and the adiabatic window shrinks to
    the rho4 sub-window, which is all the count needs.
    """
    base_r0 = cfg.potential.r0
    r0 = value if variable == "r0" else base_r0
    D = value if variable == "D" else cfg.potential.D
    grid = cfg.R_grid.scaled(r0 / base_r0)
    d = cfg.to_dict()
    d["potential"].update({"D": D, "r0": r0})
    d["R_grid"] = {"min": grid.min, "max": grid.max, "step": grid.step, "probes": []}
    d["window"] = {"center": cfg.rho4.center, "half_width": 0.5 * cfg.rho4.width}
    d["parity"] = cfg.parities[0]
    if cfg.basis.n_theta is None:
        b = default_basis(PairPotential(cfg.potential.kind, D, r0)).scaled(cfg.sweep.basis_scale)
        d["basis"].update({"n_theta": b.n_theta, "n_phi": b.n_phi})
    return from_dict(d)


def sweep_point(run: Run, variable: str, value: float) -> dict:
    sub_dir = os.path.join(run.out, "sweep", f"{variable}-{value:g}")
    sub = Run(sweep_config(run.cfg, variable, value), sub_dir, run.workers, run.cache_root)
    par = sub.cfg.parity
    tb = twobody_stage(sub)
    a = adiabatic_stage(sub, par)
    states = pool_bound_states(a["spectrum"], a["window"], sub.params(par).mu,
                               R_max=sub.cfg.rho4.R_max_r0 * sub.cfg.potential.r0, E_b=tb["E_b"],
                               r0=sub.cfg.potential.r0)
    center = _rho4_center(sub, tb["E_b"])
    sub.save_manifest()
    return {"value": value, "E_b": tb["E_b"], "count": states.count,
            "rho4": rho4(states, sub.cfg.rho4.width, center),
            "estimate": rho4_estimate(sub.potential), "basis": a["spectrum"].basis,
            "asymptotics": a["summary"]["asymptotics"], "flatness": states.diagnostics["flatness"]}


def scan_stage(run: Run, variables=("D", "r0")) -> dict:
    """Scaling sweeps of rho4 over ``D`` and ``r0``."""
    out = {}
    for var in variables:
        t0 = time.perf_counter()
        values = getattr(run.cfg.sweep, var)
        points = [sweep_point(run, var, v) for v in values]
        fit = fit_scaling(var, [p["value"] for p in points], [p["rho4"] for p in points])
        est = fit_scaling(var, [p["value"] for p in points], [p["estimate"] for p in points])
        res = {"fit": fit.to_json(), "estimate_fit": est.to_json(), "points": points, **run.meta(stage="scan")}
        js = run.path(f"scan_{var}.json")
        write_json(js, res)
        write_csv(run.path(f"scan_{var}.csv"), [var, "rho4", "rho4_estimate"],
                  [(p["value"], p["rho4"], p["estimate"]) for p in points], run.meta())
        dt = time.perf_counter() - t0
        run.record(f"scan_{var}", js, "scan", False, dt)
        run.record(f"scan_{var}_table", run.path(f"scan_{var}.csv"), "scan", False, 0.0)
        out[var] = res
    return out


# -- report -------------------------------------------------------------------------


class MixedHashError(ValueError):
    pass


def _get(d, *keys):
    for k in keys:
        if not isinstance(d, dict) or k not in d:
            return None
        d = d[k]
    return d


def build_report(out_dir: str) -> tuple[dict, list[str]]:
    """Summary of every headline quantity found under ``out_dir``.

    Returns the summary and the list of absent fields. Artifacts produced
    under different configuration hashes are refused.
    """
    manifest = read_json(os.path.join(out_dir, "manifest.json"))
    hashes = {a["config_hash"] for a in manifest.get("artifacts", {}).values()}
    if len(hashes) > 1:
        raise MixedHashError(f"artifacts from {len(hashes)} different configurations: {sorted(hashes)}")
    h = hashes.pop() if hashes else manifest.get("config_hash")

    def load(name):
        a = manifest.get("artifacts", {}).get(name)
        if a is None:
            return None
        path = os.path.join(out_dir, a["path"])
        if not os.path.exists(path):
            return None
        doc = read_json(path)
        if doc.get("config_hash") != h:
            raise MixedHashError(f"{a['path']} carries config hash {doc.get('config_hash')}, expected {h}")
        return doc

    tb = load("twobody")
    fields = {"E_b": _get(tb, "E_b"), "N2": _get(tb, "N2"), "N2_wkb": _get(tb, "N2_wkb")}
    cfg = manifest.get("config", {})
    parity = cfg.get("parity", "even")
    sectors = ("even", "odd") if parity == "both" else (parity,)
    for par in sectors:
        ad = load(f"adiabatic_{par}")
        fields[f"channel_counts_{par}"] = _get(ad, "probe_counts")
        fields[f"rho_a_peak_R_{par}"] = _get(ad, "rho_a_peak_R")
        fields[f"asymptotic_max_ratio_{par}"] = _get(ad, "asymptotics", "max_ratio")
    st = load("stats")
    for par in sectors + (("both",) if len(sectors) == 2 else ()):
        sec = _get(st, "sectors", par)
        fields[f"q_max_{par}"] = _get(sec, "q_max")
        fields[f"q_max_R_{par}"] = _get(sec, "q_max_R")
        fields[f"q_min_{par}"] = _get(sec, "q_min")
    b4 = load("bound4")
    for par in sectors:
        fields[f"rho4_{par}"] = _get(b4, "sectors", par, "rho4")
        fields[f"bound4_q_{par}"] = _get(b4, "sectors", par, "brody", "q")
    for var in ("D", "r0"):
        sc = load(f"scan_{var}")
        fields[f"exponent_{var}"] = _get(sc, "fit", "exponent")
        fields[f"exponent_{var}_stderr"] = _get(sc, "fit", "stderr")
    absent = sorted(k for k, v in fields.items() if v is None)
    return {"config_hash": h, "code_version": __version__, "fields": fields, "absent": absent}, absent
