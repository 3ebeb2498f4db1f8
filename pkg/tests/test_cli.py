import csv
import json

import pytest

from kllab.cli import fmt, main, parse_cex, read_config, UsageError


def run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["flow", "--x0", "1,0", "--T", "1"],
    ["flow", "--field", "power:2", "--T", "1"],
    ["flow", "--field", "power:2", "--x0", "1,0"],
    ["flow", "--field", "power:2", "--x0", "1,0,0", "--T", "1"],
    ["flow", "--field", "power:9", "--x0", "1,0", "--T", "1"],
    ["flow", "--field", "power:2", "--x0", "1,0", "--T", "1", "--tol", "0.1"],
    ["prox", "--field", "power:2", "--x0", "1,0"],
    ["gd", "--field", "power:2", "--x0", "1,0", "--t", "0.1", "--beta", "2"],
    ["profile", "--field", "power:2", "--directions", "16"],
    ["profile", "--field", "power:2", "--rmin", "2"],
    ["cex", "build", "--nmax", "3"],
    ["cex", "verify"],
])
def test_usage_errors_exit_2(tmp_path, argv):
    assert run(tmp_path, *argv) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# gradient flow\nfield = quad:1,4\nx0 = 1,1\nT = 0.5\n")
    assert run(tmp_path, "flow", "--config", str(cfg)) == 0
    with open(tmp_path / "flow.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1", "x2", "f", "speed", "cumlen"]
    assert float(rows[-1][0]) == pytest.approx(0.5)
    # command line flags win over the file
    assert run(tmp_path, "flow", "--config", str(cfg), "--T", "0.25") == 0
    with open(tmp_path / "flow.csv") as fh:
        assert float(list(csv.reader(fh))[-1][0]) == pytest.approx(0.25)


@pytest.mark.parametrize("text", ["colour = red\n", "steps = many\n", "just words\n"])
def test_bad_config_is_usage_error(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    with pytest.raises(UsageError):
        read_config(str(cfg))
    assert run(tmp_path, "zoo", "list", "--config", str(cfg)) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert run(tmp_path, "zoo", "list", "--config", str(tmp_path / "nope.cfg")) == 2


def test_zoo_list(tmp_path, capsys):
    assert run(tmp_path, "zoo", "list") == 0
    names = [f["name"] for f in json.loads((tmp_path / "zoo.json").read_text())["fields"]]
    assert names == ["power:2", "quad:1,4", "norm", "flat:0.5", "cex"]
    assert "verdict: PASS" in capsys.readouterr().out


def test_prox_outputs(tmp_path):
    assert run(tmp_path, "prox", "--field", "power:2", "--x0", "0,1", "--lambda", "0.5",
               "--steps", "10") == 0
    for name in ("run.csv", "report.json", "run.svg"):
        assert (tmp_path / name).stat().st_size > 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["verdict"] == "PASS"
    assert (tmp_path / "run.svg").read_text().startswith("<svg")


def test_gd_step_rule_and_expect_fail(tmp_path):
    # t = 0.6 breaks beta <= 1 - L t / 2 for L = 4
    assert run(tmp_path, "gd", "--field", "quad:1,4", "--x0", "1,1", "--t", "0.6") == 2
    ok = ["gd", "--field", "quad:1,4", "--x0", "1,1", "--t", "0.2", "--steps", "20"]
    assert run(tmp_path, *ok) == 0
    assert run(tmp_path, *ok, "--expect-fail") == 1


def test_failed_check_and_expect_fail(tmp_path):
    # dist to the sublevel set equals sqrt(f) - sqrt(r), so k < 1 must fail
    argv = ["check", "errorbound", "--field", "power:2", "--k", "0.5", "--r", "0.01",
            "--levels", "12", "--directions", "128"]
    assert run(tmp_path, *argv) == 1
    rep = json.loads((tmp_path / "errorbound.json").read_text())
    assert rep["verdict"] == "FAIL" and rep["witness"]["margin"] < 0
    assert run(tmp_path, *argv, "--expect-fail") == 0


def test_profile_passes_for_power(tmp_path):
    assert run(tmp_path, "profile", "--field", "power:2", "--levels", "16",
               "--directions", "256") == 0
    with open(tmp_path / "profile.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    for row in rows:
        assert float(row["phi"]) == pytest.approx(float(row["r"]) ** 0.5, rel=1e-6)


@pytest.mark.parametrize("what,extra", [
    ("errorbound", ["--field", "norm", "--r", "0.1"]),
    ("errorbound", ["--field", "power:2", "--r", "0.01"]),
    ("talweg", ["--field", "power:2", "--R", "1.5"]),
    ("integrability", ["--field", "power:2", "--levels", "30"]),
    ("kl", ["--field", "quad:1,4", "--samples", "200"]),
    ("sublevel", ["--field", "power:2", "--levels", "4", "--directions", "64"]),
])
def test_checks(tmp_path, what, extra):
    assert run(tmp_path, "check", what, "--levels", "12", "--directions", "128", *extra) == 0
    rep = json.loads((tmp_path / f"{what}.json").read_text())
    assert rep["verdict"] == "PASS"


def test_cex_build_verify_round_trip(tmp_path):
    path = tmp_path / "c.txt"
    assert run(tmp_path, "cex", "build", "--nmax", "6", "--file", str(path)) == 0
    text = path.read_text()
    head, bodies, levels = parse_cex(text)
    assert len(bodies) == len(levels) == 1 + sum(n + 1 for n in range(3, 7))
    assert head["lam0"] == 1.0
    assert run(tmp_path, "cex", "verify", "--file", str(path)) == 0
    rep = json.loads((tmp_path / "cex_verify.json").read_text())
    assert rep["record_rel_err"] <= 1e-12


def test_cex_verify_detects_tampering(tmp_path):
    path = tmp_path / "c.txt"
    run(tmp_path, "cex", "build", "--nmax", "5", "--file", str(path))
    lines = path.read_text().splitlines()
    i = next(i for i, ln in enumerate(lines) if ln.startswith("body 3 "))
    parts = lines[i].split()
    parts[-1] = fmt(float(parts[-1]) * (1 + 1e-9))
    lines[i] = " ".join(parts)
    path.write_text("\n".join(lines) + "\n")
    assert run(tmp_path, "cex", "verify", "--file", str(path)) == 1


def test_cex_verify_rejects_foreign_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("something else\n")
    assert run(tmp_path, "cex", "verify", "--file", str(path)) == 2


def test_cex_witness(tmp_path):
    assert run(tmp_path, "cex", "witness", "--gens", "8") == 1
    w = json.loads((tmp_path / "witness.json").read_text())
    assert w["strictly_increasing"] and w["harmonic_lower_bound"]
    assert w["final_over_first"] > 1.0
    assert (tmp_path / "witness.svg").exists()


@pytest.mark.parametrize("v,s", [(0.1, "0.1"), (3, "3"), (1 / 3, "0.3333333333333333")])
def test_fmt_round_trips(v, s):
    assert fmt(v) == s and float(fmt(v)) == v
