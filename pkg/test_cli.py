import json
from pathlib import Path

import numpy as np
import pytest

import cli
from cli import CSV_COLUMNS, SOLVERS, SWEEP_BLOCK, SweepSpec, main, parse_axis, parse_profile, run_sweep
from core_model import DEMO, params_to_dict
from errors import SchemaError


@pytest.fixture
def params_file(tmp_path):
    def write(**changes):
        doc = {**params_to_dict(DEMO), **changes}
        path = tmp_path / "params.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        return str(path)
    return write


def test_solve_demo(params_file, capsys):
    assert main(["solve", "--params", params_file()]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["regime"] == "FOFU"
    assert doc["model"] == "base"
    assert "paper_discrepancies" in doc
    assert doc["profit"] == pytest.approx(3.5)


def test_solve_names_a_missing_key(tmp_path, capsys):
    doc = params_to_dict(DEMO)
    del doc["k"]
    path = tmp_path / "params.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["solve", "--params", str(path)]) == 2
    assert "k: missing required key" in capsys.readouterr().err


def test_capacity_model_needs_chi(params_file):
    assert main(["solve", "--params", params_file(), "--model", "capacity"]) == 2


def test_single_cell_sweep(params_file, tmp_path):
    out = tmp_path / "grid.csv"
    assert main(["sweep", "--params", params_file(), "--grid", "mu=0.5:0.5:1", "--out", str(out)]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2
    assert lines[1].startswith("0.5,0.5,FOFU,")


def test_sweep_over_honesty(params_file, tmp_path):
    out = tmp_path / "grid.json"
    args = ["sweep", "--params", params_file(mu=0.72), "--grid", "h=0.05:0.95:4",
            "--out", str(out), "--format", "json", "--jobs", "2"]
    assert main(args) == 0
    rows = json.loads(out.read_text(encoding="utf-8"))
    assert [row["regime"] for row in rows] == ["FOPU", "FOFU", "POFU", "FOFU"]
    assert all(row["boundary_flag"] == 0 for row in rows)


def test_sweep_csv_matches_the_golden_file(params_file, tmp_path):
    out = tmp_path / "grid.csv"
    assert main(["sweep", "--params", params_file(), "--grid", "mu=0.375:0.625:3", "--out", str(out)]) == 0
    golden = Path(__file__).parent / "golden_sweep.csv"
    assert out.read_bytes() == golden.read_bytes()


def test_sweep_is_byte_identical_across_worker_counts(params_file, tmp_path):
    outputs = []
    for jobs in ("1", "8"):
        out = tmp_path / f"grid-{jobs}.csv"
        assert main(["sweep", "--params", params_file(), "--grid", "mu=0.01:0.99:40", "--grid", "h=0.01:0.99:40",
                     "--out", str(out), "--jobs", jobs]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    assert outputs[0].count(b"\n") == 1 + 40 * 40


def test_sweep_hands_out_cells_in_blocks(monkeypatch):
    calls = []
    block = cli._sweep_block

    def counting(points, model):
        calls.append(len(points))
        return block(points, model)

    monkeypatch.setattr(cli, "_sweep_block", counting)
    n = 2 * SWEEP_BLOCK + 5
    spec = SweepSpec(axes=(("mu", 0.01, 0.99, n),), base=DEMO, model="base", out="unused")
    frame = run_sweep(spec, jobs=3)
    assert sorted(calls) == [5, SWEEP_BLOCK, SWEEP_BLOCK]
    assert list(frame.columns) == CSV_COLUMNS
    assert np.array_equal(frame["mu"].to_numpy(), np.linspace(0.01, 0.99, n))


def test_sweep_to_an_unwritable_place(params_file, tmp_path):
    out = tmp_path / "missing" / "grid.csv"
    assert main(["sweep", "--params", params_file(), "--grid", "mu=0.1:0.9:3", "--out", str(out)]) == 4


def test_sweep_rejects_unknown_format(params_file, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--params", params_file(), "--grid", "mu=0.1:0.9:3",
              "--out", str(tmp_path / "x"), "--format", "xml"])
    assert info.value.code == 2


def test_verify_rejects_all_truthful_profile(params_file, capsys):
    assert main(["verify", "--params", params_file(), "--profile", "(1,1,1,1)"]) == 1
    summary = json.loads(capsys.readouterr().out)
    assert not summary["passed"]
    assert summary["max_gain"] == pytest.approx(2.0)
    assert summary["node"] == "opp@1:minor"


def test_verify_negative_tolerance(params_file):
    assert main(["verify", "--params", params_file(), "--tol=-1"]) == 2


def test_verify_random_draws(capsys):
    assert main(["verify", "--random", "20", "--seed", "7"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"]
    assert summary["draws"] == 20


@pytest.mark.parametrize("model", sorted(set(SOLVERS) - {"base"}))
def test_verify_random_draws_of_every_extension(model, capsys):
    assert main(["verify", "--random", "10", "--seed", "7", "--model", model]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"]
    assert summary["draws"] == 10


def test_simulate_needs_consumers(params_file):
    assert main(["simulate", "--params", params_file(), "-n", "0"]) == 2


def test_simulate_is_reproducible(params_file, tmp_path):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    for out in (first, second):
        assert main(["simulate", "--params", params_file(), "-n", "2000", "--seed", "3",
                     "--jobs", "1", "--out", str(out)]) == 0
    assert first.read_text(encoding="utf-8") == second.read_text(encoding="utf-8")
    doc = json.loads(first.read_text(encoding="utf-8"))
    assert doc["n_consumers"] == 2000
    assert doc["regime"] == "FOFU"


def test_parse_axis():
    assert parse_axis("mu=0.1:0.9:5") == ("mu", 0.1, 0.9, 5)
    with pytest.raises(SchemaError):
        parse_axis("mu=0.1:0.9")
    with pytest.raises(SchemaError):
        parse_axis("mu=0.1:0.9:0")
    with pytest.raises(SchemaError):
        parse_axis("gamma=0:1:3")


def test_parse_profile():
    expert, consumer = parse_profile("(0, 0.5, 1, 0.25)")
    assert expert.t_s1 == 0.5
    assert consumer.a_s1 == 0.25
    with pytest.raises(SchemaError):
        parse_profile("(0,1)")
