import json
import os

import pytest

from kolmolab import cli

MINIMAL = """\
seed: 0
grid: {dimension: 1, half_width: 4.0, points_per_axis: 65}
matrix: {kind: identity}
drift: {kind: zero}
norms:
  - {functional: nash_e, h: 1.0}
"""

SMALL_RUN = """\
seed: 3
grid: {dimension: 1, half_width: 6.0, points_per_axis: 129}
matrix: {kind: identity}
drift:
  kind: constant
  params: {amplitude: AMP}
norms:
  - {functional: nash_e, h: 0.5}
constants: {sigma: 1.0, xi: 1.0, c1: 1.0, c2: 0.9, c3: 1.0, c4: 2.0, c5: 1.0, c6: 2.0}
solver:
  ladder: {first: FIRST, last: 0.5, n: 5}
analyses:
  nash: {delta: 1.5}
  mass: {}
"""


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_run(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", _write(tmp_path, MINIMAL), "-o", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_status"] == 0 and man["stages"]["norms"]["status"] == "ok"
    assert {a["path"] for a in man["artifacts"]} >= {"norms.json", "norms.csv", "fields.json"}
    rep = json.loads((out / "norms.json").read_text())[0]
    assert rep["value"] == 0 and rep["verdict"] == "finite"
    assert set(man["versions"]) >= {"python", "numpy", "scipy", "pyyaml", "kolmolab"}


def test_invalid_drift_kind_names_field(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL.replace("kind: zero", "kind: swirl"))
    assert cli.main(["validate-config", cfg]) == 2
    err = capsys.readouterr().err
    assert "drift.kind" in err and "line 4" in err and "swirl" in err


@pytest.mark.parametrize("text,needle", [
    (MINIMAL + "colour: red\n", "colour: unknown key"),
    (MINIMAL.replace("h: 1.0", "h: -1.0"), "norms[0].h: must be positive"),
    (MINIMAL + "analyses:\n  nash: {delta: 2.0}\n", "no 'solver' stage"),
    (MINIMAL.replace("points_per_axis: 65", "points_per_axis: 64"), "odd"),
    ("grid: [1, 2\n", "YAML syntax error"),
    (MINIMAL + "solver: {times: [0.5]}\nanalyses:\n  nash: {delta: 0.5}\n", "analyses.nash.delta: must exceed"),
])
def test_config_errors(tmp_path, capsys, text, needle):
    assert cli.main(["validate-config", _write(tmp_path, text)]) == 2
    assert needle in capsys.readouterr().err


def test_validate_lists_stages(tmp_path, capsys):
    cfg = SMALL_RUN.replace("AMP", "0.1").replace("FIRST", "0.05")
    assert cli.main(["validate-config", _write(tmp_path, cfg)]) == 0
    assert "analysis:nash" in capsys.readouterr().out


def test_full_run_reproducible(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_RUN.replace("AMP", "0.1").replace("FIRST", "0.05"))
    mans = []
    for name in ("a", "b"):
        assert cli.main(["run", cfg, "-o", str(tmp_path / name)]) == 0
        mans.append(json.loads((tmp_path / name / "manifest.json").read_text()))
    assert mans[0]["artifacts"] == mans[1]["artifacts"]
    assert mans[0]["certifications"] == {"smallness_h=0.5": True}


def test_floats_have_17_digits(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_RUN.replace("AMP", "0.1").replace("FIRST", "0.05"))
    cli.main(["run", cfg, "-o", str(tmp_path / "o")])
    text = (tmp_path / "o" / "nash.json").read_text()
    plateau = json.loads(text)["plateau"]
    assert f'"plateau": {format(plateau, ".17g")}' in text
    assert cli.dumps(0.1) == "0.10000000000000001\n"
    assert cli.dumps({"b": 1.0 / 3, "a": [2.5, float("inf")]}) == \
        '{"a": [2.5, "inf"], "b": 0.33333333333333331}\n'


def test_certification_failure_exit_1(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_RUN.replace("AMP", "5.0").replace("FIRST", "0.05"))
    assert cli.main(["run", cfg, "-o", str(tmp_path / "o")]) == 1
    assert "smallness_h=0.5" in capsys.readouterr().out


def test_numerical_failure_exit_3_keeps_independent_stages(tmp_path, capsys):
    # the first ladder time lies below the solver's start time
    cfg = _write(tmp_path, SMALL_RUN.replace("AMP", "0.1").replace("FIRST", "0.0001"))
    assert cli.main(["run", cfg, "-o", str(tmp_path / "o")]) == 3
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["stages"]["solver"]["status"] == "failed"
    assert man["stages"]["norms"]["status"] == "ok"
    assert man["stages"]["analysis:nash"]["status"] == "skipped"


def test_list_catalog(capsys):
    assert cli.main(["list-catalog"]) == 0
    text = capsys.readouterr().out
    for kind in ("hardy", "log_refined", "kato_slab", "checkerboard"):
        assert kind in text
    cli.main(["list-catalog", "--json", "--dimension", "1"])
    rows = json.loads(capsys.readouterr().out)
    kinds = {r["kind"] for r in rows}
    assert "hardy" not in kinds and "constant" in kinds


def test_thread_env(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    for var in cli._THREAD_VARS:
        monkeypatch.delenv(var, raising=False)
    cli._set_threads(None)
    assert os.environ["OMP_NUM_THREADS"] == "2"
    cli._set_threads(1)
    assert os.environ["OPENBLAS_NUM_THREADS"] == "1"


def test_preset_rejects_extra_sections(tmp_path, capsys):
    cfg = _write(tmp_path, "preset: paper-suite\ngrid: {dimension: 1}\n")
    assert cli.main(["validate-config", cfg]) == 2
    assert "preset" in capsys.readouterr().err


def test_preset_runs_selected_criteria(tmp_path, capsys):
    cfg = _write(tmp_path, "preset: paper-suite\ncriteria: [9]\n")
    assert cli.main(["run", cfg, "-o", str(tmp_path / "o")]) == 0
    assert "criterion 9 [PASS]" in capsys.readouterr().out
