import json

import numpy as np
import pytest

from diffrates.cli import RunConfig, main, render_report
from conftest import CONFIGS, TARGETS


def write_config(tmp_path, target="bimodal_1d.json", **over):
    doc = {
        "target": str(TARGETS / target),
        "schedule": {"T": [25, 35, 50], "c0": 1.5, "c1": 3.5},
        "samplers": ["ODE_PLAIN", "DDPM_PLAIN"],
        "density": {"lo": -8, "hi": 8, "points": 512},
        "oracle": {"n": 20000, "seed": 0, "conditions": 3},
        "output": str(tmp_path / "out"),
    }
    for k, v in over.items():
        doc[k] = v
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.mark.parametrize("name", ["default.json", "mixture_2d.json", "point_atom.json"])
def test_shipped_configs_load(name):
    cfg = RunConfig.load(CONFIGS / name)
    assert cfg.target_path.is_file()
    assert cfg.c0 == 1.5


def test_validate_passes(tmp_path, capsys):
    assert main(["validate", str(write_config(tmp_path))]) == 0
    rep = json.loads((tmp_path / "out" / "validate.json").read_text())
    assert rep["passed"] and set(rep["oracle"]["functionals"]) == {"G", "SCORE", "NOISE_COV", "W_CORR"}


def test_validate_reports_schedule_failure(tmp_path, capsys):
    # c0 = 2 breaks the alpha_bar_T bound at these T
    cfg = write_config(tmp_path, schedule={"T": [100], "c0": 2.0, "c1": 3.5})
    assert main(["validate", str(cfg)]) == 1
    assert "property (d)" in capsys.readouterr().err


def test_bad_rate_names_schedule_error(tmp_path, capsys):
    cfg = write_config(tmp_path, schedule={"T": [10], "c0": 2.0, "c1": 4.0})
    assert main(["sweep", str(cfg)]) == 2
    assert "1/2" in capsys.readouterr().err


def test_malformed_target_named(tmp_path, capsys):
    bad = tmp_path / "oops.json"
    bad.write_text('{"dim": 1, "components": [')
    cfg = write_config(tmp_path, target=str(bad))
    assert main(["validate", str(cfg)]) == 2
    assert "oops.json" in capsys.readouterr().err


@pytest.mark.parametrize("patch,msg", [
    ({"schedule": {"T": [50, 25]}}, "increasing"),
    ({"density": {"units": "sigma"}}, "units"),
    ({"fit": {"rule": "robust"}}, "fit.rule"),
])
def test_config_errors(tmp_path, capsys, patch, msg):
    assert main(["sweep", str(write_config(tmp_path, **patch))]) == 2
    assert msg in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    assert main(["sweep", str(tmp_path / "nope.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_sweep_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["sweep", str(cfg)]) == 0
    out = tmp_path / "out"
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "T,kind,tv,tv_corrected,kl,grid_points,leaked_mass"
    assert len(lines) == 7
    assert (out / "grids" / "grid_ODE_PLAIN_T50.csv").is_file()
    assert main(["report", str(out)]) == 0
    first = (out / "report.txt").read_text()
    svg = (out / "tv_vs_T.svg").read_bytes()
    assert "ODE_PLAIN" in first and "DDPM_PLAIN" in first
    assert main(["report", str(out)]) == 0
    assert (out / "report.txt").read_text() == first
    assert (out / "tv_vs_T.svg").read_bytes() == svg
    assert (out / "density_DDPM_PLAIN_T50.svg").is_file()
    assert "DDPM_PLAIN" in (out / "slopes.csv").read_text()


def test_single_T_skips_fit(tmp_path):
    cfg = write_config(tmp_path, schedule={"T": [35], "c0": 1.5, "c1": 3.5}, samplers=["ODE_ACCEL"])
    assert main(["sweep", str(cfg)]) == 0
    doc = json.loads((tmp_path / "out" / "sweep.json").read_text())
    assert doc["slopes"] == {}
    assert any("skipped" in n for n in doc["notes"])
    assert "-" in render_report(tmp_path / "out")


def test_point_atom_sweep_matches_chain(tmp_path):
    cfg = write_config(tmp_path, target="point_atom_1d.json",
                       schedule={"T": [25, 50], "c0": 1.5, "c1": 3.5},
                       samplers=["ODE_PLAIN", "ODE_ACCEL", "DDPM_PLAIN", "DDPM_ACCEL"],
                       density={"lo": -16, "hi": 16, "points": 2048, "units": "forward_std"})
    assert main(["sweep", str(cfg)]) == 0
    doc = json.loads((tmp_path / "out" / "sweep.json").read_text())
    assert len(doc["gaussian_chain"]) == 8
    assert max(c["error"] for c in doc["gaussian_chain"]) <= 1e-5


def test_report_names_missing_files(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "sweep.csv" in err and "sweep.json" in err


def test_sweep_rejects_2d(tmp_path, capsys):
    cfg = write_config(tmp_path, target="mixture_2d.json")
    assert main(["sweep", str(cfg)]) == 2
    assert "1-d" in capsys.readouterr().err


def test_sample_writes_draws_and_metadata(tmp_path):
    cfg = write_config(tmp_path, target="mixture_2d.json")
    out = tmp_path / "s.csv"
    assert main(["sample", str(cfg), "--kind", "DDPM_ACCEL", "--T", "25", "-n", "300", "-o", str(out)]) == 0
    x = np.loadtxt(out, delimiter=",", skiprows=1)
    assert x.shape == (300, 2)
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["kind"] == "DDPM_ACCEL" and meta["n"] == 300 and meta["failures"] == 0
