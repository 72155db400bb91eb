import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from infogamma import cli

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).resolve().parent / "golden"

BOX = """
[domain]
lower = [-1.0, -1.0]
upper = [1.0, 1.0]
"""


def write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- exit codes ---------------------------------------------------------------------

def test_missing_file_is_config_error(tmp_path, capsys):
    assert run("scan", "--config", tmp_path / "absent.toml") == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_invalid_toml(tmp_path):
    assert run("scan", "--config", write(tmp_path, "[domain\n")) == 2


def test_missing_section(tmp_path):
    cfg = write(tmp_path, '[domain]\nlower = [-1, -1]\n[model]\nU = "x1^2"\n')
    assert run("scan", "--config", cfg, "--out", tmp_path / "o") == 2


def test_unknown_drift(tmp_path):
    cfg = write(tmp_path, BOX + '[model]\nU = "x1^2 + x2^2"\ndrift = { type = "magic" }\n')
    assert run("scan", "--config", cfg, "--out", tmp_path / "o") == 2


def test_parse_error_is_config_error(tmp_path):
    cfg = write(tmp_path, BOX + '[model]\nU = "x1^2 +* x2"\n')
    assert run("scan", "--config", cfg, "--out", tmp_path / "o") == 2


def test_evaluation_error(tmp_path, capsys):
    cfg = write(tmp_path, BOX + '[model]\nU = "log(x1) + x2^2"\n')
    assert run("scan", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_EVAL
    assert "log" in capsys.readouterr().err


def test_solver_error(tmp_path):
    cfg = write(tmp_path, BOX + """
[model]
U = "0*x1 + 0*x2"
drift = { type = "b", exprs = ["1e20", "0"] }
[grids]
solver = 8
[solver]
T = 1.0
[checks]
lambda = 1.0
""")
    assert run("evolve", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_SOLVER


def test_bad_solver_section(tmp_path):
    cfg = write(tmp_path, BOX + '[model]\nU = "x1^2 + x2^2"\n[solver]\nsafety = 0.5\n')
    assert run("evolve", "--config", cfg, "--out", tmp_path / "o") == 2


def test_command_required():
    with pytest.raises(SystemExit):
        cli.main(["--config", "x.toml"])


# -- scan ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["fig1_left", "fig1_right"])
def test_scan_matches_golden(tmp_path, name):
    out = tmp_path / name
    assert run("scan", "--config", CONFIGS / f"{name}.toml", "--out", out) == 0
    got = json.loads((out / "rate_report.json").read_text())
    want = json.loads((GOLDEN / f"{name}_rate_report.json").read_text())
    assert got.keys() == want.keys()
    assert got["lambda"] == pytest.approx(want["lambda"], abs=1e-12)
    assert got["max_lambda_min"] == pytest.approx(want["max_lambda_min"], abs=1e-12)
    assert got["argmin_index"] == want["argmin_index"]
    assert got["positive"] is True
    for f in ("lambda_min.csv", "r_tensor.csv", "r_ac.csv"):
        assert (out / f).stat().st_size > 0


def read_field(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def test_scan_right_panel_exceeds_one(tmp_path):
    out = tmp_path / "r"
    run("scan", "--config", CONFIGS / "fig1_right.toml", "--out", out)
    rows = read_field(out / "lambda_min.csv")
    keys = list(rows[0])
    x1, x2, v = (np.array([float(r[k]) for r in rows]) for k in keys[:3])
    big = v > 1
    assert big.mean() >= 0.01
    assert np.all(x1[big] * x2[big] < 0)


def test_scan_reversible_rate_is_one(tmp_path):
    cfg = write(tmp_path, BOX + '[model]\nU = "(x1^2 + x2^2)/2"\n[grids]\nscan = 21\n')
    run("scan", "--config", cfg, "--out", tmp_path / "o")
    rep = json.loads((tmp_path / "o" / "rate_report.json").read_text())
    assert rep["lambda"] == pytest.approx(1.0, abs=1e-12)


def test_scan_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run("scan", "--config", CONFIGS / "fig1_left.toml", "--out", out)
    for f in ("lambda_min.csv", "r_tensor.csv", "r_ac.csv", "rate_report.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


# -- evolve -------------------------------------------------------------------------

QUICK = """
[domain]
lower = [-4.0, -4.0]
upper = [4.0, 4.0]
[model]
U = "(x1^2 + x2^2)/2"
[grids]
scan = 41
solver = 48
[solver]
T = 1.0
save_interval = 0.02
[initial]
center = [0.5, -0.3]
variance = 0.5
[output]
snapshot_stride = 10
"""


def test_evolve_reversible_passes(tmp_path):
    out = tmp_path / "o"
    assert run("evolve", "--config", write(tmp_path, QUICK), "--out", out) == 0
    checks = json.loads((out / "checks.json").read_text())
    assert [c["name"] for c in checks] == ["fisher_decay", "lsi", "entropy_production", "kl_decay", "l1_decay"]
    assert all(c["passed"] for c in checks)
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,mass,fisher,kl,l1" and len(lines) == 52
    assert sorted(p.name for p in (out / "snapshots").iterdir())[:2] == ["p_00000.csv", "p_00010.csv"]


def test_evolve_wrong_lambda_fails(tmp_path):
    out = tmp_path / "o"
    assert run("evolve", "--config", write(tmp_path, QUICK), "--out", out, "--lambda", 10) == cli.EXIT_CHECK
    checks = {c["name"]: c for c in json.loads((out / "checks.json").read_text())}
    assert not checks["fisher_decay"]["passed"]
    assert checks["fisher_decay"]["lambda"] == 10.0


def test_evolve_stationary(tmp_path):
    cfg = QUICK.replace('center = [0.5, -0.3]\nvariance = 0.5', 'type = "pi"')
    out = tmp_path / "o"
    # the log-ratio checks are meaningless at this noise level; only the trace matters
    run("evolve", "--config", write(tmp_path, cfg), "--out", out)
    with open(out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert max(float(r["fisher"]) for r in rows) < 1e-5
    assert max(abs(float(r["kl"])) for r in rows) < 1e-5


def test_evolve_with_w2(tmp_path):
    cfg = QUICK.replace("[output]", "[checks]\nw2_every = 25\nw2_eps = 0.1\n[output]").replace("solver = 48", "solver = 32")
    out = tmp_path / "o"
    run("evolve", "--config", write(tmp_path, cfg), "--out", out)
    checks = {c["name"]: c for c in json.loads((out / "checks.json").read_text())}
    assert checks["w2_decay"]["details"]["advisory"] is True


def test_evolve_deterministic_bytes(tmp_path):
    cfg = write(tmp_path, QUICK.replace("T = 1.0", "T = 0.2"))
    for out in ("a", "b"):
        run("evolve", "--config", cfg, "--out", tmp_path / out)
    for f in ("trace.csv", "checks.json", "snapshots/p_00010.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- verify -------------------------------------------------------------------------

def test_verify_report(tmp_path):
    out = tmp_path / "o"
    assert run("verify", "--config", CONFIGS / "fig1_left.toml", "--out", out) == 0
    rep = json.loads((out / "verify_report.json").read_text())
    assert rep["identity"]["passed"] and rep["identity"]["max_residual"] <= 1e-9
    assert rep["flipped_convention"]["discrepancy_shown"]
    assert rep["weak_form"]["passed"] and rep["yano"]["passed"]


def test_verify_reversible_battery(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, BOX + '[model]\nU = "(x1^2 + 3*x2^2)/2 + x1^4/12"\n[verify]\ncatalog = false\ngrid = 64\n')
    assert run("verify", "--config", cfg, "--out", out) == 0
    rep = json.loads((out / "verify_report.json").read_text())
    # without rotation both conventions coincide
    assert rep["flipped_convention"]["max_residual"] <= 1e-9


def test_refinement_rule():
    assert cli.refinement_passes(1e-3, 2e-4, 2e-2)
    assert not cli.refinement_passes(1e-3, 5e-4, 2e-2)
    assert not cli.refinement_passes(3e-2, 1e-3, 2e-2)
    assert cli.refinement_passes(4e-14, 5e-14, 2e-2)


# -- sample -------------------------------------------------------------------------

SAMPLE = BOX + """
[model]
U = "(x1^2 + x2^2)/2"
drift = { type = "skew", c = 0.1 }
[sample]
N = 20000
T = 4.0
dt = 0.005
seed = 7
[output]
dir = "unused"
"""


def test_sample_moments(tmp_path):
    out = tmp_path / "o"
    assert run("sample", "--config", write(tmp_path, SAMPLE), "--out", out) == 0
    rep = json.loads((out / "moments.json").read_text())
    assert [m["moment"] for m in rep["moments"]] == ["x1", "x2", "x1*x1", "x1*x2", "x2*x2"]
    assert rep["passed"] and rep["seed"] == 7


def test_sample_single_particle(tmp_path):
    cfg = SAMPLE.replace("N = 20000", "N = 1").replace("[output]", "dump = true\nsave_every = 100\n[output]")
    out = tmp_path / "o"
    assert run("sample", "--config", write(tmp_path, cfg), "--out", out) == 0
    lines = (out / "ensemble.csv").read_text().splitlines()
    assert lines[0] == "t,particle,x1,x2"
    assert len(lines) == 1 + 9


def test_sample_seed_determinism(tmp_path):
    cfg = write(tmp_path, SAMPLE.replace("N = 20000", "N = 500").replace("T = 4.0", "T = 0.5"))
    for out, seed in (("a", 3), ("b", 3), ("c", 4)):
        run("sample", "--config", cfg, "--out", tmp_path / out, "--seed", seed)
    a, b, c = ((tmp_path / o / "moments.json").read_bytes() for o in "abc")
    assert a == b and a != c


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "infogamma", "scan", "--config", str(tmp_path / "none.toml")],
        capture_output=True, text=True,
    )
    assert res.returncode == 2
