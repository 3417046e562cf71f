"""Command-line entry point: ``fedsim run | verify | presets``.

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import re
import sys
from dataclasses import fields
from pathlib import Path

from . import analysis
from .config import PRESETS, ConfigError, ExperimentConfig, parse_assignments, parse_config, resolved_lines
from .linalg import NonFiniteError
from .runner import RoundMetrics, run_experiment
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

CSV_COLUMNS = ("round", "test_loss", "test_acc", "train_loss", "theta_norm", "h_norm", "gbar_norm", "cos_h_g", "lr", "beta")
EXTRA_COLUMNS = tuple(f.name for f in fields(RoundMetrics) if f.name not in CSV_COLUMNS and f.name != "wall_time")

# "seed" is shorthand for the partition seed, the randomness varied across repeats
SWEEP_ALIASES = {"seed": "seeds.partition"}


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


class CsvSink:
    """Writes metric rows as they arrive so an abort leaves a usable prefix.

    Round 0 (the starting point) goes only to the extra file, so the main
    CSV holds exactly one row per evaluated training round.
    """

    def __init__(self, out_dir: Path, stem: str):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.main_path = out_dir / f"{stem}.csv"
        self.extra_path = out_dir / f"{stem}.extra.csv"
        self._main = open(self.main_path, "w", newline="")
        self._extra = open(self.extra_path, "w", newline="")
        self._mw = csv.writer(self._main, lineterminator="\n")
        self._ew = csv.writer(self._extra, lineterminator="\n")
        self._mw.writerow(CSV_COLUMNS)
        self._ew.writerow(("round",) + EXTRA_COLUMNS)

    def __call__(self, row: RoundMetrics) -> None:
        if row.round > 0:
            self._mw.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
            self._main.flush()
        self._ew.writerow([_fmt(row.round)] + [_fmt(getattr(row, c)) for c in EXTRA_COLUMNS])
        self._extra.flush()

    def close(self) -> None:
        self._main.close()
        self._extra.close()


def parse_sweep(spec: str) -> tuple[str, list[int]]:
    """``seed=1..5`` or ``seeds.init=1,4,9`` -> (dotted key, values)."""
    m = re.fullmatch(r"\s*([\w.]+)\s*=\s*(.+)", spec)
    if not m:
        raise ConfigError("--sweep", f"expected key=a..b or key=a,b,c, got {spec!r}")
    key, rng = m.group(1), m.group(2).strip()
    key = SWEEP_ALIASES.get(key, key)
    try:
        if ".." in rng:
            lo, hi = (int(x) for x in rng.split(".."))
            if hi < lo:
                raise ValueError("empty range")
            values = list(range(lo, hi + 1))
        else:
            values = [int(x) for x in rng.split(",")]
    except ValueError as exc:
        raise ConfigError("--sweep", f"bad range {rng!r}: {exc}") from None
    return key, values


def run_one(cfg: ExperimentConfig, out_dir: Path, stem: str, explicit: set[str]) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.config.jsonl").write_text("\n".join(resolved_lines(cfg, explicit)) + "\n")
    sink = CsvSink(out_dir, stem)
    try:
        log = run_experiment(cfg, on_round=sink)
    except NonFiniteError as exc:
        print(f"numeric abort: {exc}; partial results in {sink.main_path}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        sink.close()
    last = log.rows[-1]
    print(
        f"{stem}: {cfg.algorithm.kind} {cfg.rounds} rounds, test_loss={last.test_loss:.6g} "
        f"test_acc={last.test_acc:.4f} -> {sink.main_path}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        overrides = parse_assignments(args.set or [])
        cfg = parse_config(args.config, overrides, preset=args.preset)
        explicit = set(overrides)
        if args.config:
            explicit |= set(parse_assignments(Path(args.config).read_text().splitlines()))
        if args.preset:
            explicit |= set(PRESETS[args.preset][1])
        out_dir = Path(args.out or cfg.output.dir)
        if not args.sweep:
            return run_one(cfg, out_dir, cfg.output.name, explicit)
        key, values = parse_sweep(args.sweep)
        runs = []
        for v in values:
            runs.append((v, parse_config(args.config, {**overrides, key: str(v)}, preset=args.preset)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    suffix = "seed" if key.startswith("seeds.") else key.rsplit(".", 1)[-1]
    for v, c in runs:
        code = run_one(c, out_dir, f"{c.output.name}_{suffix}{v}", explicit | {key})
        if code != EXIT_OK:
            return code
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_suite(args.suite)
    print(analysis.checks_as_keyvalue(checks) if args.format == "kv" else analysis.format_checks(checks))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_presets(args) -> int:
    for name, (desc, values) in PRESETS.items():
        print(f"{name}: {desc}")
        if args.keys:
            for k, v in values.items():
                print(f"    {k} = {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated drift-correction simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log plateau decays and other progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment (or a seed sweep) and write CSV metrics")
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    run.add_argument("--out", help="output directory (default: output.dir)")
    run.add_argument("--sweep", metavar="KEY=A..B", help="repeat the run over a range, e.g. seed=1..5")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run oracle checks")
    ver.add_argument("suite", choices=SUITES + ("all",))
    ver.add_argument("--format", choices=("text", "kv"), default="text")
    ver.set_defaults(func=cmd_verify)

    pre = sub.add_parser("presets", help="list bundled experiment presets")
    pre.add_argument("--keys", action="store_true", help="show every key of each preset")
    pre.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
