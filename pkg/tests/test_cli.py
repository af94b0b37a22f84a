import json
import os

import pytest

import toymol.pipeline
from toymol.cli import main
from toymol.config import ConfigError, config_hash, load_config, parse_override
from toymol.spline_galerkin import ConvergenceError

TINY = {
    "potential": {"D": 10.0},
    "R_grid": {"min": 2.0, "max": 4.2, "step": 0.2, "probes": [2.5]},
    "basis": {"n_theta": 20, "n_phi": 20},
    "window": {"half_width": 6.0},
    "rho4": {"width": 2.0, "R_max_r0": 8.0},
    "sweep": {"basis_scale": 0.2},
}
pytestmark = pytest.mark.filterwarnings("ignore:curves not flat:RuntimeWarning")
STAGES = ("twobody", "adiabatic", "stats", "bound4")


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _run_all(cfg, out):
    return [main([s, "--config", cfg, "--out", str(out)]) for s in STAGES]


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = _run_all(tiny_config, out)
    return out, codes


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def test_stages_succeed(tiny_run):
    out, codes = tiny_run
    assert codes == [0, 0, 0, 0]
    for name in ("twobody.json", "adiabatic_even.json", "stats.json", "bound4.json", "manifest.json",
                 "spectrum_even.csv", "q_smooth_even.csv", "bound4_states_even.csv"):
        assert (out / name).exists(), name


def test_sidecars_carry_hash(tiny_run):
    out, _ = tiny_run
    h = _load(out / "twobody.json")["config_hash"]
    for name in os.listdir(out):
        if name.endswith(".csv"):
            side = out / (name + ".json")
            assert _load(side)["config_hash"] == h


def test_twobody_fields(tiny_run):
    out, _ = tiny_run
    tb = _load(out / "twobody.json")
    assert tb["E_b"] > 0
    # per-parity count of the (12) pair tracks the semiclassical estimate
    assert abs(tb["N2"] - tb["N2_wkb"]) <= 1


def test_rerun_is_cached(tiny_run, tiny_config):
    out, _ = tiny_run
    before = (out / "spectrum_even.csv").read_bytes()
    assert main(["adiabatic", "--config", tiny_config, "--out", str(out)]) == 0
    arts = _load(out / "manifest.json")["artifacts"]
    assert arts["spectrum_even"]["cached"] is True
    assert (out / "spectrum_even.csv").read_bytes() == before


def test_fresh_runs_byte_identical(tiny_run, tiny_config, tmp_path):
    out, _ = tiny_run
    assert _run_all(tiny_config, tmp_path) == [0, 0, 0, 0]
    names = sorted(n for n in os.listdir(out) if os.path.isfile(out / n) and n not in ("manifest.json", "report.json"))
    assert names == sorted(n for n in os.listdir(tmp_path) if os.path.isfile(tmp_path / n) and n != "manifest.json")
    for n in names:
        assert (out / n).read_bytes() == (tmp_path / n).read_bytes(), n


def test_report(tiny_run, capsys):
    out, _ = tiny_run
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    fields = json.loads(captured.out)
    assert "E_b" in fields and "q_max_even" in fields and "rho4_even" in fields
    assert fields["exponent_D"] is None
    assert "exponent_D" in json.loads(captured.err)["fields"]
    first = (out / "report.json").read_bytes()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.json").read_bytes() == first


def test_report_refuses_mixed_hashes(tiny_config, tmp_path):
    assert main(["stats", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    assert main(["twobody", "--config", tiny_config, "--out", str(tmp_path), "--set", "potential.D=12"]) == 0
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_report_needs_manifest(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("extra", [
    ["--set", "potential.D=-1"],
    ["--set", "potential.nonsense=1"],
    ["--set", "potential.D"],
    ["--workers", "0"],
    ["--set", "stats.points=50"],
    ["--set", "rho4.width=40"],
])
def test_config_errors_exit_2(tiny_config, tmp_path, extra, capsys):
    cmd = "bound4" if "rho4.width=40" in extra else "stats"
    assert main([cmd, "--config", tiny_config, "--out", str(tmp_path), *extra]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["twobody", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exit_3(tiny_config, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise ConvergenceError("eigensolver stalled", 2)

    monkeypatch.setattr(toymol.pipeline, "scan", boom)
    assert main(["adiabatic", "--config", tiny_config, "--out", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "numerical" and err["type"] == "ConvergenceError"
    assert "stalled" in json.dumps(_load(tmp_path / "manifest.json"))


def test_config_hash_ignores_workers_and_out(tiny_config):
    a = load_config(tiny_config, [])
    b = load_config(tiny_config, ["workers=3", "out=/tmp/elsewhere"])
    c = load_config(tiny_config, ["potential.D=11"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_parse_override():
    assert parse_override("potential.D=50") == ("potential.D", 50)
    assert parse_override("sweep.D=[1, 2]") == ("sweep.D", [1, 2])
    assert parse_override("potential.kind=morse") == ("potential.kind", "morse")
    with pytest.raises(ConfigError):
        parse_override("potential.D")
