import csv
import json
import subprocess
import sys

import pytest

from fedsim.cli import CSV_COLUMNS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main, parse_sweep
from fedsim.config import ConfigError

QUAD = ["--preset", "fedavg-quadratic"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_header_and_one_row_per_round(tmp_path):
    code = main(["run", *QUAD, "--set", "rounds=5", "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "run.csv")
    assert rows[0] == list(CSV_COLUMNS)
    assert ",".join(rows[0]) == "round,test_loss,test_acc,train_loss,theta_norm,h_norm,gbar_norm,cos_h_g,lr,beta"
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]
    extra = read_csv(tmp_path / "run.extra.csv")
    assert extra[1][0] == "0" and len(extra) == 7


def test_sidecar_records_every_key(tmp_path):
    main(["run", *QUAD, "--set", "rounds=2", "--out", str(tmp_path)])
    lines = [json.loads(x) for x in (tmp_path / "run.config.jsonl").read_text().splitlines()]
    by_key = {r["key"]: r for r in lines}
    assert by_key["rounds"]["value"] == 2 and by_key["rounds"]["default"] is False
    assert by_key["schedule.lr"]["default"] is True
    assert by_key["algorithm.kind"]["default"] is False


def test_rerun_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        main(["run", "--preset", "adabest-10pct", "--set", "rounds=3", "--set", "clients.count=20",
              "--set", "data.n_examples=600", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()


def test_sweep_writes_one_csv_per_seed(tmp_path):
    code = main(["run", *QUAD, "--set", "rounds=2", "--sweep", "seed=1..5", "--out", str(tmp_path)])
    assert code == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("*.csv") if not p.name.endswith(".extra.csv"))
    assert names == [f"run_seed{i}.csv" for i in range(1, 6)]
    first = read_csv(tmp_path / "run_seed1.csv")
    second = read_csv(tmp_path / "run_seed2.csv")
    assert first != second


def test_parse_sweep():
    assert parse_sweep("seed=1..3") == ("seeds.partition", [1, 2, 3])
    assert parse_sweep("seeds.init=4,9") == ("seeds.init", [4, 9])
    with pytest.raises(ConfigError):
        parse_sweep("seed=5..1")
    with pytest.raises(ConfigError):
        parse_sweep("seed")


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", *QUAD, "--set", "algorithm.kind=adabest", "--set", "algorithm.beta=1.5", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "β must lie in [0,1]" in capsys.readouterr().err
    assert main(["run", *QUAD, "--set", "bogus.key=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", *QUAD, "--set", "rounds=abc", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "rounds" in capsys.readouterr().err


def test_config_file_input(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("algorithm.kind = feddyn\nalgorithm.mu = 0.1\ndata.source = quadratic\nmodel.kind = quadratic\n"
                   "clients.count = 4\nclients.validation_fraction = 0\nparticipation.fraction = 0.5\nrounds = 3\noutput.name = dyn\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert len(read_csv(tmp_path / "dyn.csv")) == 4


def test_numeric_abort_exit_3_with_partial_csv(tmp_path, capsys):
    code = main(["run", *QUAD, "--set", "schedule.lr=50", "--set", "rounds=100", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "numeric abort" in err and "round" in err
    rows = read_csv(tmp_path / "run.csv")
    assert rows[0] == list(CSV_COLUMNS)
    assert 1 <= len(rows) - 1 < 100


def test_verify_costs_passes(capsys):
    assert main(["verify", "costs"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    dominance = [line for line in out if "<=" in line]
    assert len(dominance) == 3 and all(line.startswith("PASS") for line in dominance)


def test_verify_keyvalue_format(capsys):
    assert main(["verify", "costs", "--format", "kv"]) == EXIT_OK
    assert "adabest<=feddyn.passed=true" in capsys.readouterr().out


def test_verify_unknown_suite_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["verify", "nonsense"])
    assert info.value.code == 2


def test_presets_listing(capsys):
    assert main(["presets", "--keys"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "adabest-10pct:" in out and "algorithm.beta = 0.96" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedsim.cli", "verify", "remarks"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert all(line.startswith("PASS") for line in proc.stdout.splitlines() if line)
