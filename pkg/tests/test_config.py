import json

import pytest

from fedsim.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    flatten,
    known_keys,
    parse_assignments,
    parse_config,
    resolved_lines,
    to_text,
)

MINIMAL = """
# smallest useful run
algorithm.kind = fedavg
data.source = quadratic
model.kind = quadratic
rounds = 10
"""


def test_minimal_config_takes_defaults(tmp_path):
    path = tmp_path / "min.cfg"
    path.write_text(MINIMAL)
    cfg = parse_config(path)
    assert cfg.algorithm.kind == "fedavg" and cfg.rounds == 10
    assert cfg.schedule.lr == 0.1 and cfg.schedule.lr_decay == 0.998
    assert cfg.schedule.epochs == 5 and cfg.schedule.batch_size == 45
    assert cfg.clients.validation_fraction == 0.1


def test_beta_out_of_range_names_the_bound():
    with pytest.raises(ConfigError, match=r"β must lie in \[0,1\]") as info:
        parse_config(overrides={"algorithm.kind": "adabest", "algorithm.beta": "1.5"})
    assert info.value.key == "algorithm.beta"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(overrides={"algorithm.gamma": "1"})
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(overrides={"optimizer.lr": "1"})
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(overrides={"epochs": "3"})


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"rounds": "ten"})
    assert info.value.key == "rounds"
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"trace": "maybe"})
    assert info.value.key == "trace"
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"clients.pool_schedule": "5"})
    assert info.value.key == "clients.pool_schedule"


def test_cross_field_validation(tmp_path):
    with pytest.raises(ConfigError, match="quadratic"):
        parse_config(overrides={"data.source": "quadratic"})
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"data.source": "file", "data.path": str(tmp_path / "missing.txt")})
    assert info.value.key == "data.path"
    with pytest.raises(ConfigError):
        parse_config(overrides={"schedule.lr": "0"})
    # 10% of 4 training clients rounds to nobody
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"clients.count": "4", "clients.validation_fraction": "0"})
    assert info.value.key == "participation.fraction"
    with pytest.raises(ConfigError) as info:
        parse_config(overrides={"clients.count": "10", "clients.pool_schedule": "5:9"})
    assert info.value.key == "clients.pool_schedule"


def test_assignment_parsing():
    vals = parse_assignments(["a.b = 1  # trailing", "", "# only a comment", "c=x=y"])
    assert vals == {"a.b": "1", "c": "x=y"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_assignments(["no equals sign"])


def test_precedence_defaults_preset_file_flags(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("algorithm.mu = 0.5\nrounds = 7\n")
    cfg = parse_config(path, {"rounds": "3"}, preset="adabest-10pct")
    assert cfg.algorithm.kind == "adabest"
    assert cfg.algorithm.beta == 0.96
    assert cfg.algorithm.mu == 0.5
    assert cfg.rounds == 3


def test_typed_values():
    cfg = parse_config(overrides={"model.kind": "mlp", "model.hidden": "8, 4", "clients.pool_schedule": "5:2,9:1", "trace": "yes"})
    assert cfg.model.hidden == (8, 4)
    assert cfg.clients.pool_schedule == ((5, 2), (9, 1))
    assert cfg.trace is True


EXPECTED_PRESETS = {
    "adabest-10pct": {"algorithm.kind": "adabest", "algorithm.mu": 0.02, "algorithm.beta": 0.96, "participation.fraction": 0.1},
    "adabest-100pct": {"algorithm.kind": "adabest", "algorithm.mu": 0.02, "algorithm.beta": 0.98, "participation.fraction": 1.0},
    "feddyn-10pct": {"algorithm.kind": "feddyn", "algorithm.mu": 0.02},
    "scaffoldm-10pct": {"algorithm.kind": "scaffoldm"},
    "fedavg-10pct": {"algorithm.kind": "fedavg"},
    "fedavg-quadratic": {"algorithm.kind": "fedavg", "data.source": "quadratic"},
    "emnist-like": {"model.kind": "mlp", "model.hidden": (100, 100), "data.n_classes": 26, "clients.count": 110},
    "stability-fig1": {"algorithm.kind": "feddyn", "clients.count": 200, "participation.count": 5, "rounds": 500},
}


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_resolve(name):
    flat = flatten(parse_config(preset=name))
    for key, value in EXPECTED_PRESETS[name].items():
        assert flat[key] == value
    if name != "fedavg-quadratic" and name != "stability-fig1":
        assert flat["schedule.lr"] == 0.1 and flat["schedule.lr_decay"] == 0.998
        assert flat["schedule.epochs"] == 5 and flat["schedule.batch_size"] == 45


def test_preset_list_is_stable():
    assert set(PRESETS) == set(EXPECTED_PRESETS)
    with pytest.raises(ConfigError):
        parse_config(preset="nope")


def test_resolved_lines_cover_every_key():
    cfg = parse_config(overrides={"rounds": "4"})
    rows = [json.loads(line) for line in resolved_lines(cfg, {"rounds"})]
    assert [r["key"] for r in rows] == known_keys()
    by_key = {r["key"]: r for r in rows}
    assert by_key["rounds"] == {"key": "rounds", "value": 4, "default": False}
    assert by_key["schedule.lr"]["default"] is True


def test_text_round_trip(tmp_path):
    cfg = parse_config(preset="emnist-like", overrides={"clients.pool_schedule": "3:10"})
    path = tmp_path / "back.cfg"
    path.write_text(to_text(cfg))
    assert parse_config(path) == cfg


def test_default_config_is_valid():
    assert parse_config() == ExperimentConfig()
