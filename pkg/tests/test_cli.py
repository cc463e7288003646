import csv
import json

import pytest

from gridflow import cli
from gridflow.grid import GridGraph, Permutation


def write_perm(tmp_path, nu, n, perm, name="p.json"):
    f = tmp_path / name
    f.write_text(json.dumps({"nu": nu, "n": n, "perm": perm}))
    return str(f)


def run(argv, capsys):
    code = cli.main(argv)
    return code, capsys.readouterr()


def test_solve_discrete_identity(tmp_path, capsys):
    f = write_perm(tmp_path, 2, 3, list(range(9)))
    code, out = run(["solve-discrete", "--perm", f], capsys)
    rep = json.loads(out.out)
    assert code == cli.EXIT_OK and rep["admissible"]
    assert rep["costs"] == {"1": 0, "2": 0, "inf": 0}


def test_solve_discrete_reversal(tmp_path, capsys):
    f = write_perm(tmp_path, 1, 4, [3, 2, 1, 0])
    code, out = run(["solve-discrete", "--perm", f, "--p", "inf"], capsys)
    rep = json.loads(out.out)
    assert code == 0 and rep["costs"]["inf"] == 4 and rep["lower_bounds"]["inf"] == 3


def test_output_is_byte_stable(tmp_path, capsys):
    s = Permutation.random(GridGraph(2, 5), 7)
    f = write_perm(tmp_path, 2, 5, list(s.mapping))
    outs = [run(["solve-discrete", "--perm", f, "--seed", "3"], capsys)[1].out for _ in range(2)]
    assert outs[0] == outs[1]
    o = tmp_path / "r.json"
    assert cli.main(["solve-discrete", "--perm", f, "--seed", "3", "--out", str(o)]) == 0
    assert o.read_text() == outs[0]


@pytest.mark.parametrize("text,needle", [
    ('{"nu": 1, "n": 3, "perm": [0, 1,', "line 1 column"),
    ('{"nu": 1, "n": 3, "perm": [0, 0, 1]}', "p.json"),
])
def test_bad_input_exit_2(tmp_path, capsys, text, needle):
    f = tmp_path / "p.json"
    f.write_text(text)
    code, out = run(["solve-discrete", "--perm", str(f)], capsys)
    assert code == cli.EXIT_INPUT and needle in out.err


def test_missing_file_and_bad_args(tmp_path, capsys):
    assert run(["solve-discrete", "--perm", str(tmp_path / "nope.json")], capsys)[0] == 2
    assert run(["solve-discrete"], capsys)[0] == 2
    f = write_perm(tmp_path, 1, 2, [1, 0])
    assert run(["solve-discrete", "--perm", f, "--p", "0"], capsys)[0] == 2


def test_threads_env(tmp_path, capsys, monkeypatch):
    f = write_perm(tmp_path, 1, 2, [1, 0])
    monkeypatch.setenv("GRIDFLOW_THREADS", "zero")
    assert run(["solve-discrete", "--perm", f], capsys)[0] == 2
    monkeypatch.setenv("GRIDFLOW_THREADS", "2")
    code, out = run(["solve-discrete", "--perm", f], capsys)
    assert code == 0 and json.loads(out.out)["threads"] == 2


def test_verify_passes(capsys):
    code, out = run(["verify", "--dims", "1,2", "--samples", "2"], capsys)
    rep = json.loads(out.out)
    assert code == 0 and rep["mismatches"] == 0 and rep["cases"] == 12


def test_verify_detects_injected_fault(capsys, monkeypatch):
    real = cli.predict_usage_1d
    monkeypatch.setattr(cli, "predict_usage_1d", lambda s, i: real(s, i) + 1)
    code, out = run(["verify", "--dims", "1", "--samples", "1"], capsys)
    assert code == cli.EXIT_FAIL and "mismatch" in out.err


def test_verify_empty_sweep_warns(capsys):
    code, out = run(["verify", "--dims", ""], capsys)
    assert code == 0 and "warning" in out.err


def test_counterexample_report(capsys):
    code, out = run(["counterexample", "--sizes", "4,8"], capsys)
    rows = json.loads(out.out)["rows"]
    assert code == 0
    assert [(r["N"], r["census_F_ge_N2"], r["certified_sup"]) for r in rows] == [(4, 4, 16), (8, 8, 64)]


def test_realize_scope_error(tmp_path, capsys):
    g = GridGraph(3, 4)
    s = Permutation.from_function(g, lambda v: {(0, 0, 0): (0, 0, 1), (0, 0, 1): (0, 0, 0)}.get(v, v))
    f = write_perm(tmp_path, 3, 4, list(s.mapping))
    code, out = run(["realize", "--perm", f, "--samples", "0"], capsys)
    assert code == cli.EXIT_SCOPE and "out of scope" in out.err


def test_realize_planar_with_trajectory(tmp_path, capsys):
    perm = list(range(16))
    perm[0], perm[5] = 5, 0
    f = write_perm(tmp_path, 2, 4, perm)
    traj = tmp_path / "t.csv"
    code, out = run(["realize", "--perm", f, "--samples", "50", "--traj-out", str(traj)], capsys)
    rep = json.loads(out.out)
    assert code == 0 and rep["ok"] and rep["timings"] == {}
    assert rep["map_error_max"] <= 1e-9 and rep["roundtrip_error_max"] <= 1e-9
    rows = list(csv.reader(traj.open()))
    assert rows[0] == ["t", "x", "y", "z", "piece_id"] and len(rows) == 202


def test_realize_rejects_bad_options(tmp_path, capsys):
    f = write_perm(tmp_path, 2, 4, list(range(16)))
    assert run(["realize", "--perm", f, "--K", "1"], capsys)[0] == cli.EXIT_SCOPE
    assert run(["realize", "--perm", f, "--q", "inf"], capsys)[0] == cli.EXIT_INPUT
    assert run(["realize", "--perm", f, "--samples", "-1"], capsys)[0] == cli.EXIT_INPUT


def test_eval_field(tmp_path, capsys):
    perm = list(range(16))
    perm[0], perm[5] = 5, 0
    f = write_perm(tmp_path, 2, 4, perm)
    pts = tmp_path / "pts.json"
    pts.write_text(json.dumps([[0.9, 0.9, 0.9], [0.05, 0.05, 0.05]]))
    code, out = run(["eval-field", "--perm", f, "--points", str(pts)], capsys)
    rep = json.loads(out.out)
    assert code == 0
    assert rep["piece_id"][0] == -1 and rep["time_one_map"][0] == [0.9, 0.9, 0.9]
    assert rep["time_one_map"][1] == pytest.approx([0.3, 0.3, 0.05], abs=1e-9)
