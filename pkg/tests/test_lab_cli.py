import csv
import json

import pytest

from sllab import cli, lab
from sllab.errors import ConfigError


def test_config_roundtrip(tmp_path):
    cfg = lab.RunConfig(paths=123, dt=2.5e-4, s_grid=(0.5, 1.0))
    p = tmp_path / "run.cfg"
    p.write_text(lab.dump_config(cfg))
    assert lab.load_config(p) == cfg


def test_config_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("paths = 50  # few\n\nmeasure = cube\n")
    cfg = lab.load_config(p, {"paths": "70"})
    assert cfg.paths == 70 and cfg.measure == "cube"


@pytest.mark.parametrize("text,line,key", [
    ("paths = 5\nbogus = 1\n", 2, "bogus"),
    ("paths = 5\npaths = 6\n", 2, "paths"),
    ("dt = abc\n", 1, "dt"),
    ("just words\n", 1, None),
])
def test_config_errors_carry_location(text, line, key):
    with pytest.raises(ConfigError) as ei:
        lab.parse_config_text(text, "x.cfg")
    assert ei.value.line == line and ei.value.key == key
    assert f"x.cfg:{line}" in str(ei.value)


@pytest.mark.parametrize("over", [{"dt": "0"}, {"t_grid": "0.1,0.2"}, {"assist_r0": "3"}, {"measure": "sphere"},
                                  {"threshold_log": "-10"}])
def test_config_range_errors(over):
    with pytest.raises(ConfigError):
        lab.load_config(None, over)


def test_checks_and_margins():
    c = lab._le("x", "a", "m", 1.0, 2.0)
    assert c.passed and c.margin == 1.0
    c = lab._eq("x", "a", "m", 1.0, 1.5, 0.1)
    assert not c.passed and c.margin == pytest.approx(-0.4)


def test_schedule_run_artifacts(tmp_path):
    cfg = lab.load_config(None, {"experiment": "schedule", "out_dir": str(tmp_path)})
    m = lab.run(cfg)
    assert m.exit_code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"manifest.json", "checks.csv", "schedule.json"} <= names
    raw = (tmp_path / "checks.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.DictReader(raw.decode().splitlines()))
    assert rows and set(rows[0]) == set(lab.CHECK_COLUMNS)
    assert {r["anchor"] for r in rows} == {"tk", "inc", "schedule"}
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["experiment"] == "schedule"
    sch = json.loads((tmp_path / "schedule.json").read_text())
    assert sch["k0"] == 2


def test_module_error_becomes_failed_check(monkeypatch, tmp_path):
    def boom(cfg):
        raise lab.SllabError("broken on purpose")

    monkeypatch.setattr(lab, "dyadic_suite", boom)
    m = lab.run(lab.RunConfig(experiment="assistfn", out_dir=str(tmp_path)))
    bad = [c for c in m.checks if not c["pass"]]
    assert m.exit_code == 1 and len(bad) == 1 and "broken on purpose" in bad[0]["detail"]["error"]


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["schedule", "--quiet", "--out-dir", str(tmp_path / "a")]) == 0
    assert "0 failed" in capsys.readouterr().out
    assert cli.main(["schedule", "--quiet", "--dt", "0", "--out-dir", str(tmp_path / "b")]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense = 3\n")
    assert cli.main(["schedule", "--config", str(cfg)]) == 2
    assert "bad.cfg:1" in capsys.readouterr().err


def test_cli_assistfn_dump(tmp_path, capsys):
    code = cli.main(["assistfn", "dump", "--quiet", "--assist-d0", "40", "--out-dir", str(tmp_path)])
    rec = json.loads(capsys.readouterr().out)
    assert code == 0 and rec["D0"] == 40.0 and 0.05 <= rec["b"] <= 0.2
    assert len(rec["grid_samples"]) == 201


def test_cli_deterministic_and_report(tmp_path, capsys):
    for d in ("r1", "r2"):
        assert cli.main(["assistfn", "--quiet", "--out-dir", str(tmp_path / d)]) == 0
    for name in ("checks.csv", "assistfn.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    capsys.readouterr()
    code = cli.main(["report", str(tmp_path / "r1"), str(tmp_path / "r2" / "manifest.json"), "--out",
                     str(tmp_path / "rep")])
    out = capsys.readouterr().out
    assert code == 0 and out.splitlines()[0].startswith("anchor")
    rows = list(csv.DictReader((tmp_path / "rep" / "report.csv").read_text().splitlines()))
    assert [r["anchor"] for r in rows] == sorted(r["anchor"] for r in rows)


def test_report_missing_manifest(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "nope")]) == 2


def test_report_flags_failures():
    man = lab.RunManifest({}, "0", "", "", 0.0, [dict(anchor="a", measure="m", name="n", lhs=1.0, rhs=0.0,
                                                      margin=-1.0, required=True, **{"pass": False})], {}, 1)
    empty = lab.RunManifest({}, "0", "", "", 0.0, [], {}, 0)
    rows, code, notes = lab.report([man, empty], ["x", "y"])
    assert code == 1 and notes == ["y: no checks (0 rows)"]
    assert "FAIL" in lab.report_text(rows, notes)


def test_thread_env(monkeypatch):
    monkeypatch.setenv("SLLAB_THREADS", "3")
    assert lab._threads() == 3
    monkeypatch.setenv("SLLAB_THREADS", "x")
    assert lab._threads() == 1
