"""Experiment configuration: flat ``section.key=value`` text, strict keys.

A config file is a list of assignments, one per line::

    # comments start with '#'
    algorithm.kind = adabest
    algorithm.mu = 0.02
    schedule.lr_decay = 0.998
    rounds = 400

Flags given on the command line (``--set key=value``) override the file.
"""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import validation_count
from .fedcore import Kind
from .models import MODEL_KINDS
from .runner import ScheduleConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry. ``key`` names the field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class AlgorithmConfig:
    kind: str = "fedavg"
    mu: float = 0.0
    beta: float = 0.0


@dataclass
class ModelConfig:
    kind: str = "softmax"
    hidden: tuple[int, ...] = (100,)
    weight_decay: float = 0.0


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | quadratic | file
    path: str = ""
    test_path: str = ""
    n_classes: int = 10
    dim: int = 20
    n_examples: int = 5000
    n_test: int = 2000
    separation: float = 3.0
    heterogeneity: str = "iid"  # iid | dirichlet
    alpha: float = 0.3
    balance: str = "balanced"  # balanced | lognormal
    sigma: float = 0.3
    spread: float = 1.0
    curvature_min: float = 0.5
    curvature_max: float = 2.0


@dataclass
class ClientsConfig:
    count: int = 100
    validation_fraction: float = 0.1
    pool_schedule: tuple[tuple[int, int], ...] = ()


@dataclass
class ParticipationConfig:
    fraction: float = 0.1
    count: int = 0


@dataclass
class SeedsConfig:
    partition: int = 0
    init: int = 0
    sampling: int = 0


@dataclass
class OutputConfig:
    dir: str = "runs"
    name: str = "run"


@dataclass
class ExperimentConfig:
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    participation: ParticipationConfig = field(default_factory=ParticipationConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    rounds: int = 100
    eval_interval: int = 1
    weighted_aggregation: bool = False
    check_invariants: bool = False
    trace: bool = False
    trace_stride: int = 1


DATA_SOURCES = ("synthetic", "quadratic", "file")

SECTIONS = ("algorithm", "model", "data", "clients", "participation", "schedule", "seeds", "output")


# flat <-> nested ----------------------------------------------------------


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def flatten(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def known_keys() -> list[str]:
    return list(flatten(ExperimentConfig()))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_schedule(text: str) -> tuple[tuple[int, int], ...]:
    # "50:10, 100:10" -> ((50, 10), (100, 10))
    text = text.strip()
    if not text:
        return ()
    pairs = []
    for item in text.split(","):
        r, k = item.split(":")
        pairs.append((int(r), int(k)))
    return tuple(pairs)


def _coerce(key: str, typ: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            return _parse_bool(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if typ == tuple[int, ...]:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if typ == tuple[tuple[int, int], ...]:
            return _parse_schedule(raw)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None
    raise ConfigError(key, f"unsupported field type {typ}")


def apply_overrides(cfg: ExperimentConfig, values: dict[str, Any]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted ``values`` applied (strict keys)."""
    top_types = _field_types(ExperimentConfig)
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    top = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in SECTIONS}
    for key, raw in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(key, "unknown section")
            sec_cls = type(getattr(cfg, section))
            types = _field_types(sec_cls)
            if name not in types:
                raise ConfigError(key, "unknown key")
            sections[section][name] = _coerce(key, types[name], raw)
        else:
            if key not in top or key in SECTIONS:
                raise ConfigError(key, "unknown key")
            top[key] = _coerce(key, top_types[key], raw)
    built = {}
    for name in SECTIONS:
        sec_cls = type(getattr(cfg, name))
        vals = sections[name]
        # asdict turns nested tuples into tuples already; keep as is
        try:
            built[name] = sec_cls(**vals)
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from None
    return ExperimentConfig(**built, **top)


def parse_assignments(lines) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    a, d, m = cfg.algorithm, cfg.data, cfg.model
    kinds = [k.value for k in Kind]
    if a.kind not in kinds:
        raise ConfigError("algorithm.kind", f"must be one of {kinds}")
    if not 0.0 <= a.beta <= 1.0:
        raise ConfigError("algorithm.beta", "β must lie in [0,1]")
    if a.mu < 0:
        raise ConfigError("algorithm.mu", "μ must be non-negative")
    if m.kind not in MODEL_KINDS:
        raise ConfigError("model.kind", f"must be one of {list(MODEL_KINDS)}")
    if m.weight_decay < 0:
        raise ConfigError("model.weight_decay", "must be non-negative")
    if m.kind == "mlp" and (not m.hidden or min(m.hidden) < 1):
        raise ConfigError("model.hidden", "mlp needs positive hidden widths")
    if d.source not in DATA_SOURCES:
        raise ConfigError("data.source", f"must be one of {sorted(DATA_SOURCES)}")
    if (d.source == "quadratic") != (m.kind == "quadratic"):
        raise ConfigError("model.kind", "quadratic models go with data.source=quadratic and vice versa")
    if d.source == "file":
        if not d.path or not Path(d.path).is_file():
            raise ConfigError("data.path", f"file not found: {d.path!r}")
        if d.test_path and not Path(d.test_path).is_file():
            raise ConfigError("data.test_path", f"file not found: {d.test_path!r}")
    if d.heterogeneity not in ("iid", "dirichlet"):
        raise ConfigError("data.heterogeneity", "must be iid or dirichlet")
    if d.balance not in ("balanced", "lognormal"):
        raise ConfigError("data.balance", "must be balanced or lognormal")
    if d.alpha <= 0:
        raise ConfigError("data.alpha", "must be positive")
    if d.sigma < 0:
        raise ConfigError("data.sigma", "must be non-negative")
    if d.source == "synthetic":
        if d.n_classes < 2:
            raise ConfigError("data.n_classes", "need at least two classes")
        if d.n_examples < cfg.clients.count:
            raise ConfigError("data.n_examples", "fewer examples than clients")
        if d.n_test < 1:
            raise ConfigError("data.n_test", "must be positive")
    if d.dim < 1:
        raise ConfigError("data.dim", "must be positive")
    if not 0 < d.curvature_min <= d.curvature_max:
        raise ConfigError("data.curvature_min", "need 0 < curvature_min <= curvature_max")
    if cfg.clients.count < 1:
        raise ConfigError("clients.count", "must be positive")
    if not 0 <= cfg.clients.validation_fraction < 1:
        raise ConfigError("clients.validation_fraction", "must lie in [0,1)")
    if cfg.participation.count < 0:
        raise ConfigError("participation.count", "must be non-negative")
    if cfg.participation.count == 0 and not 0 < cfg.participation.fraction <= 1:
        raise ConfigError("participation.fraction", "must lie in (0,1]")
    n_train = cfg.clients.count - validation_count(cfg.clients.count, cfg.clients.validation_fraction)
    if n_train < 1:
        raise ConfigError("clients.validation_fraction", "leaves no training clients")
    added = sum(k for _, k in cfg.clients.pool_schedule)
    if added >= n_train:
        raise ConfigError("clients.pool_schedule", "adds more clients than exist beyond the initial pool")
    initial = n_train - added
    if cfg.participation.count == 0 and math.floor(cfg.participation.fraction * initial + 0.5) < 1:
        raise ConfigError("participation.fraction", f"selects no client from the initial pool of {initial}")
    if cfg.rounds < 0:
        raise ConfigError("rounds", "must be non-negative")
    if cfg.eval_interval < 1:
        raise ConfigError("eval_interval", "must be at least 1")
    if cfg.trace_stride < 1:
        raise ConfigError("trace_stride", "must be at least 1")
    if cfg.schedule.epochs < 1:
        raise ConfigError("schedule.epochs", "must be at least 1")
    if cfg.schedule.batch_size < 1:
        raise ConfigError("schedule.batch_size", "must be at least 1")
    return cfg


def parse_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    """Defaults, then a preset, then the file, then ``overrides``."""
    values: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}")
        values.update(PRESETS[preset][1])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", str(exc)) from None
        values.update(parse_assignments(text.splitlines()))
    if overrides:
        values.update(overrides)
    try:
        cfg = apply_overrides(ExperimentConfig(), values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("config", str(exc)) from None
    return validate(cfg)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def resolved_lines(cfg: ExperimentConfig, explicit: set[str] | None = None) -> list[str]:
    """One JSON object per key; ``default`` marks values nobody set."""
    defaults = flatten(ExperimentConfig())
    lines = []
    for key, value in flatten(cfg).items():
        is_default = value == defaults[key] if explicit is None else key not in explicit
        lines.append(json.dumps({"key": key, "value": _jsonable(value), "default": is_default}, sort_keys=True))
    return lines


def to_text(cfg: ExperimentConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return ",".join(f"{a}:{b}" for a, b in v)
            return ",".join(str(x) for x in v)
        return str(v)

    return "\n".join(f"{k} = {fmt(v)}" for k, v in flatten(cfg).items()) + "\n"


# presets ------------------------------------------------------------------

# Local training protocol shared by every preset: step size 0.1 decayed by
# 0.998 per round, 5 local epochs, batches of 45, 10% validation clients.
PROTOCOL = {
    "schedule.lr": "0.1",
    "schedule.lr_decay": "0.998",
    "schedule.epochs": "5",
    "schedule.batch_size": "45",
    "clients.validation_fraction": "0.1",
}

_CLASSIFICATION = {
    **PROTOCOL,
    "data.source": "synthetic",
    "data.n_classes": "10",
    "data.dim": "20",
    "data.n_examples": "5000",
    "data.n_test": "2000",
    "data.separation": "3.0",
    "data.heterogeneity": "dirichlet",
    "data.alpha": "0.3",
    "clients.count": "100",
    "model.kind": "softmax",
    "model.weight_decay": "1e-4",
    "rounds": "400",
}

PRESETS: dict[str, tuple[str, dict[str, str]]] = {
    "fedavg-quadratic": (
        "minimal FedAvg run on a 10-client quadratic federation",
        {
            "algorithm.kind": "fedavg",
            "data.source": "quadratic",
            "model.kind": "quadratic",
            "data.dim": "5",
            "clients.count": "10",
            "clients.validation_fraction": "0",
            "participation.fraction": "1.0",
            "rounds": "10",
        },
    ),
    "adabest-10pct": (
        "AdaBest, 10% participation, mu=0.02, beta=0.96, plateau decay on",
        {
            **_CLASSIFICATION,
            "algorithm.kind": "adabest",
            "algorithm.mu": "0.02",
            "algorithm.beta": "0.96",
            "participation.fraction": "0.1",
            "schedule.beta_decay": "true",
        },
    ),
    "adabest-100pct": (
        "AdaBest, full participation, mu=0.02, beta=0.98, plateau decay on",
        {
            **_CLASSIFICATION,
            "algorithm.kind": "adabest",
            "algorithm.mu": "0.02",
            "algorithm.beta": "0.98",
            "participation.fraction": "1.0",
            "schedule.beta_decay": "true",
        },
    ),
    "feddyn-10pct": (
        "FedDyn, 10% participation, mu=0.02",
        {**_CLASSIFICATION, "algorithm.kind": "feddyn", "algorithm.mu": "0.02", "participation.fraction": "0.1"},
    ),
    "scaffoldm-10pct": (
        "SCAFFOLD/m, 10% participation",
        {**_CLASSIFICATION, "algorithm.kind": "scaffoldm", "participation.fraction": "0.1"},
    ),
    "fedavg-10pct": (
        "FedAvg, 10% participation",
        {**_CLASSIFICATION, "algorithm.kind": "fedavg", "participation.fraction": "0.1"},
    ),
    "emnist-like": (
        "two tanh hidden layers of 100 units, 26 classes, IID, 110 clients (100 train), weight decay 1e-4",
        {
            **PROTOCOL,
            "algorithm.kind": "adabest",
            "algorithm.mu": "0.02",
            "algorithm.beta": "0.96",
            "data.source": "synthetic",
            "data.n_classes": "26",
            "data.dim": "64",
            "data.n_examples": "11000",
            "data.n_test": "2600",
            "data.separation": "4.0",
            "data.heterogeneity": "iid",
            "clients.count": "110",
            "model.kind": "mlp",
            "model.hidden": "100,100",
            "model.weight_decay": "1e-4",
            "participation.fraction": "0.1",
            "schedule.beta_decay": "true",
            "rounds": "500",
        },
    ),
    "stability-fig1": (
        "low-participation stability run: 200 heterogeneous quadratic clients, 5 per round, 500 rounds",
        {
            **PROTOCOL,
            "algorithm.kind": "feddyn",
            "algorithm.mu": "0.02",
            "algorithm.beta": "0.9",
            "data.source": "quadratic",
            "model.kind": "quadratic",
            "data.dim": "10",
            "data.spread": "1.0",
            "data.curvature_min": "0.5",
            "data.curvature_max": "2.0",
            "clients.count": "200",
            "clients.validation_fraction": "0",
            "participation.count": "5",
            "rounds": "500",
        },
    ),
}
