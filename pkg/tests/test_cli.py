import csv
import json

import pytest
import scipy.io

from biharm.cli import main
from biharm.mesh import build_unit_mesh, write_mesh


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_table(tmp_path, capsys):
    out = tmp_path / "t.csv"
    man = tmp_path / "t.json"
    code = main(["solve", "--dim", "2", "--example", "ex1", "--m", "2", "--n", "8,16,32",
                 "--solver", "pcg-mg1", "--csv", str(out), "--json", str(man)])
    assert code == 0
    rows = _rows(out)
    assert [r["n"] for r in rows] == ["8", "16", "32"]
    assert all(r["converged"] == "True" for r in rows)
    assert "l2_rate" in rows[0]
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 4
    data = json.loads(man.read_text())
    assert data["config"]["solver"] == "pcg-mg1" and data["seed"] == 42


def test_csv_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["solve", "--n", "4,8", "--solver", "pcg-al", "--conditions"]
    assert main(args + ["--csv", str(a)]) == 0
    assert main(args + ["--csv", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_lambda_study(tmp_path):
    out = tmp_path / "lam.csv"
    assert main(["lambda-study", "--dim", "2", "--n", "16", "--m", "3", "--nm-range", "15,40",
                 "--csv", str(out)]) == 0
    rows = _rows(out)
    assert [int(r["nm"]) for r in rows] == list(range(15, 41))
    assert all(float(r["lambda_m"]) >= 1 for r in rows)


def test_export(tmp_path):
    out = tmp_path / "mats"
    assert main(["export", "--dim", "2", "--example", "ex1", "--m", "2", "--n", "8",
                 "--out", str(out)]) == 0
    for name in ("A_m", "A_L", "M_m", "b"):
        mat = scipy.io.mmread(out / f"{name}.mtx")
        assert mat.shape[0] == 49


def test_solve_export_flag(tmp_path):
    out = tmp_path / "exp"
    assert main(["solve", "--n", "4", "--solver", "direct", "--export", str(out)]) == 0
    assert (out / "A_m.mtx").exists()


def test_condition_and_dmt_and_mesh_info(tmp_path):
    assert main(["condition", "--n", "4,8"]) == 0
    assert main(["dmt-check", "--n", "4", "--trials", "5"]) == 0
    out = tmp_path / "mesh.csv"
    assert main(["mesh-info", "--dim", "3", "--n", "2", "--csv", str(out)]) == 0
    assert _rows(out)[0]["elements"] == "48"


def test_three_dimensional_solve():
    assert main(["solve", "--dim", "3", "--n", "2,4", "--solver", "pcg-mg2"]) == 0


def test_custom_mesh(tmp_path):
    path = tmp_path / "m.txt"
    write_mesh(build_unit_mesh(2, 2), path)
    out = tmp_path / "c.csv"
    assert main(["solve", "--example", "custom", "--mesh", str(path), "--refines", "2",
                 "--csv", str(out)]) == 0
    assert [r["n"] for r in _rows(out)] == ["1", "2", "4"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nm = 3\nn = 4,8\nsolver = direct\n")
    out = tmp_path / "c.csv"
    assert main(["solve", "--config", str(cfg), "--n", "4", "--csv", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 1 and rows[0]["nm"] == "15"


@pytest.mark.parametrize("argv", [
    ["solve", "--m", "1"],
    ["solve", "--m", "7"],
    ["solve", "--dim", "3", "--example", "ex1"],
    ["solve", "--example", "custom"],
    ["solve", "--n", "0"],
    ["solve", "--bogus"],
    ["frobnicate"],
    ["lambda-study", "--nm-range", "9,3"],
    ["export", "--n", "4"],
    ["solve", "--mesh", "/nonexistent/mesh.txt", "--example", "custom"],
])
def test_invalid_input_exit_code(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["solve", "--config", str(cfg)]) == 1


def test_nonconvergence_exit_code():
    assert main(["solve", "--n", "16", "--solver", "cg", "--max-iters", "5"]) == 2


def test_high_degree_warns(caplog):
    assert main(["solve", "--m", "5", "--n", "8", "--solver", "direct"]) == 0
    assert any("beyond the tested range" in r.message for r in caplog.records)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("BIHARM_THREADS", "1")
    assert main(["solve", "--n", "4", "--solver", "direct"]) == 0
    monkeypatch.setenv("BIHARM_THREADS", "many")
    assert main(["solve", "--n", "4", "--solver", "direct"]) == 1


def test_internal_error_exit_code(monkeypatch):
    import biharm.cli as cli

    def boom(args):
        raise ZeroDivisionError("boom")

    monkeypatch.setitem(cli.COMMANDS, "solve", boom)
    assert main(["solve"]) == 3
