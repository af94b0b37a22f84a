"""Run configuration: JSON in, validated frozen dataclasses out, plus content hashes."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

AUTO = "auto-Eb"


class ConfigError(ValueError):
    """Bad configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


@dataclass(frozen=True)
class PotentialConfig:
    kind: str = "morse"
    D: float = 100.0
    r0: float = 1.0


@dataclass(frozen=True)
class GridConfig:
    """Hyperradial grid ``min, min + step, ..., <= max`` plus off-grid probe points."""

    min: float = 1.6
    max: float = 10.0
    step: float = 0.2
    probes: tuple[float, ...] = (3.8, 9.9)

    def values(self) -> np.ndarray:
        n = int(math.floor((self.max - self.min) / self.step + 1e-9)) + 1
        return np.round(self.min + self.step * np.arange(n), 12)

    def scaled(self, factor: float) -> "GridConfig":
        return GridConfig(self.min * factor, self.max * factor, self.step * factor,
                          tuple(p * factor for p in self.probes))


@dataclass(frozen=True)
class BasisConfig:
    n_theta: int | None = None  # None: grows with sqrt(D) r0
    n_phi: int | None = None
    order: int = 5
    quad_nodes: int = 10
    form: str = "standard"


@dataclass(frozen=True)
class WindowConfig:
    center: float | str = AUTO
    half_width: float = 30.0


@dataclass(frozen=True)
class StatsConfig:
    bandwidth: float = 0.2
    points: int = 10
    width: float = 1.58


@dataclass(frozen=True)
class Rho4Config:
    width: float = 3.0
    center: float | str = AUTO
    R_max_r0: float = 20.0


@dataclass(frozen=True)
class SweepConfig:
    D: tuple[float, ...] = (50.0, 100.0, 150.0, 200.0)
    r0: tuple[float, ...] = (0.8, 1.0, 1.25, 1.5)
    basis_scale: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    mass_ratio: float = 1.3
    parity: str = "even"
    mu_convention: str = "atom"
    R_grid: GridConfig = field(default_factory=GridConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    rho4: Rho4Config = field(default_factory=Rho4Config)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    workers: int = 1
    out: str = "out"

    @property
    def parities(self) -> tuple[str, ...]:
        return ("even", "odd") if self.parity == "both" else (self.parity,)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        for k, v in overrides.items():
            _set_path(d, k, v)
        return from_dict(d)


# Not part of any hash: they change where and how fast, never what.
_RUNTIME_KEYS = ("workers", "out")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _set_path(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for i, p in enumerate(parts[:-1]):
        if not isinstance(cur.get(p), dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown section")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(key, "unknown key")
    cur[parts[-1]] = value


def _positive(key, v, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not float(v).is_integer()):
        raise ConfigError(key, f"expected a {'positive integer' if integer else 'number'}, got {v!r}")
    if not (math.isfinite(v) and v > 0):
        raise ConfigError(key, f"must be positive, got {v!r}")
    return int(v) if integer else float(v)


def _choice(key, v, options):
    if v not in options:
        raise ConfigError(key, f"expected one of {sorted(options)}, got {v!r}")
    return v


def _center(key, v):
    if v == AUTO:
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(key, f"expected {AUTO!r} or a number, got {v!r}")
    return float(v)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    names = {f.name for f in fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{prefix}{k}", "unknown key")
    defaults = cls()
    kw = {}
    for f in fields(cls):
        v = data.get(f.name, getattr(defaults, f.name))
        if is_dataclass(getattr(defaults, f.name)):
            v = _build(type(getattr(defaults, f.name)), v if f.name in data else asdict(v), f"{prefix}{f.name}.")
        kw[f.name] = v
    return kw


def _floats(key, v, min_len=0):
    if not isinstance(v, (list, tuple)) or len(v) < min_len:
        raise ConfigError(key, f"expected a list of at least {min_len} numbers")
    return tuple(_positive(f"{key}[{i}]", x) for i, x in enumerate(v))


def from_dict(data: dict) -> RunConfig:
    """Validate ``data`` against the defaults; raises :class:`ConfigError`."""
    kw = _build(RunConfig, data, "")
    pot = kw["potential"]
    pot = PotentialConfig(_choice("potential.kind", pot["kind"], {"morse", "poschl_teller"}),
                          _positive("potential.D", pot["D"]), _positive("potential.r0", pot["r0"]))
    g = kw["R_grid"]
    grid = GridConfig(_positive("R_grid.min", g["min"]), _positive("R_grid.max", g["max"]),
                      _positive("R_grid.step", g["step"]), _floats("R_grid.probes", g["probes"]))
    if grid.max < grid.min:
        raise ConfigError("R_grid.max", "must not be below R_grid.min")
    b = kw["basis"]
    basis = BasisConfig(
        None if b["n_theta"] is None else _positive("basis.n_theta", b["n_theta"], True),
        None if b["n_phi"] is None else _positive("basis.n_phi", b["n_phi"], True),
        _positive("basis.order", b["order"], True), _positive("basis.quad_nodes", b["quad_nodes"], True),
        _choice("basis.form", b["form"], {"standard", "literal"}))
    if (basis.n_theta is None) != (basis.n_phi is None):
        raise ConfigError("basis.n_phi", "set both basis sizes or neither")
    w = kw["window"]
    window = WindowConfig(_center("window.center", w["center"]), _positive("window.half_width", w["half_width"]))
    s = kw["stats"]
    st = StatsConfig(_positive("stats.bandwidth", s["bandwidth"]), _positive("stats.points", s["points"], True),
                     _positive("stats.width", s["width"]))
    r = kw["rho4"]
    rho = Rho4Config(_positive("rho4.width", r["width"]), _center("rho4.center", r["center"]),
                     _positive("rho4.R_max_r0", r["R_max_r0"]))
    sw = kw["sweep"]
    sweep = SweepConfig(_floats("sweep.D", sw["D"], 4), _floats("sweep.r0", sw["r0"], 4),
                        _positive("sweep.basis_scale", sw["basis_scale"]))
    if not isinstance(kw["out"], str) or not kw["out"]:
        raise ConfigError("out", "expected a directory path")
    return RunConfig(pot, _positive("mass_ratio", kw["mass_ratio"]),
                     _choice("parity", kw["parity"], {"even", "odd", "both"}),
                     _choice("mu_convention", kw["mu_convention"], {"atom", "geometric"}),
                     grid, basis, window, st, rho, sweep, _positive("workers", kw["workers"], True), kw["out"])


def parse_override(text: str):
    """``key=value`` with ``value`` read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None = None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
    full = RunConfig().to_dict()
    merged = _merge(full, data, "")
    for item in overrides:
        key, value = parse_override(item)
        _set_path(merged, key, value)
    return from_dict(merged)


def _merge(base: dict, new, prefix):
    if not isinstance(new, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    out = copy.deepcopy(base)
    for k, v in new.items():
        if k not in base:
            raise ConfigError(prefix + k, "unknown key")
        out[k] = _merge(base[k], v, f"{prefix}{k}.") if isinstance(base[k], dict) else v
    return out


def digest(obj) -> str:
    text = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for k in _RUNTIME_KEYS:
        d.pop(k)
    return digest(d)


def subtree(cfg: RunConfig, stage: str, parity: str | None = None) -> dict:
    """The part of the configuration a stage's output depends on."""
    d = cfg.to_dict()
    physics = {"potential": d["potential"], "mass_ratio": d["mass_ratio"]}
    if stage == "twobody":
        return {"stage": stage, **physics}
    adiabatic = {**physics, "mu_convention": d["mu_convention"], "R_grid": d["R_grid"], "basis": d["basis"],
                 "window": d["window"], "parity": parity}
    if stage == "adiabatic":
        return {"stage": stage, **adiabatic}
    if stage == "stats":
        return {"stage": stage, **adiabatic, "stats": d["stats"]}
    if stage == "bound4":
        return {"stage": stage, **adiabatic, "rho4": d["rho4"]}
    raise ValueError(stage)


def stage_hash(cfg: RunConfig, stage: str, parity: str | None = None) -> str:
    return digest(subtree(cfg, stage, parity))[:16]
