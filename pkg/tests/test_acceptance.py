"""Acceptance criteria, one test each, every one at its stated tolerance and time budget.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) before asserting. Criterion 5 does not hold on this
testbed; it is run as stated and marked as an expected strict failure, so a
future change that makes it pass is reported too.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fedsim import analysis as an
from fedsim import verify
from fedsim.cli import run_one
from fedsim.config import PRESETS, parse_config
from fedsim.data import iid_partition, validation_count
from fedsim.runner import run_with_federation


def report(number: int, title: str, passed: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {title} ({detail}; {seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


@contextmanager
def stopwatch():
    box = {"start": time.perf_counter()}
    yield box
    box["elapsed"] = time.perf_counter() - box["start"]


def elapsed(box) -> float:
    return time.perf_counter() - box["start"]


def test_criterion_1_adabest_reduces_to_fedavg(tmp_path):
    with stopwatch() as sw:
        for kind, mu, beta in (("adabest", 0.0, 0.0), ("fedavg", 0.0, 0.0)):
            cfg = verify.softmax_config(kind, mu, beta, rounds=50)
            assert run_one(cfg, tmp_path / kind, "run", set()) == 0
        same = all(
            (tmp_path / "adabest" / f).read_bytes() == (tmp_path / "fedavg" / f).read_bytes()
            for f in ("run.csv", "run.extra.csv")
        )
        n_rows = len((tmp_path / "fedavg" / "run.csv").read_text().splitlines()) - 1
    secs = sw["elapsed"]
    report(1, "AdaBest(beta=0, mu=0) CSV equals FedAvg CSV", same and secs < 10, f"{n_rows} rows bitwise {'equal' if same else 'different'}", secs)
    assert same and n_rows == 50
    assert secs < 10


def test_criterion_2_series_and_live_drift_identity():
    with stopwatch() as sw:
        series = verify.series_check(n_cases=100)
        log, _ = verify.traced(verify.softmax_config("adabest", 0.02, 0.9, rounds=50, check_invariants="true"))
        live = max(verify.drift_identity_errors(log))
    secs = sw["elapsed"]
    ok = series.measured <= 1e-10 and live <= 1e-10 and secs < 5
    report(2, "power series and aggregate drift identity", ok, f"series rel err {series.measured:.2e}, live max {live:.2e}", secs)
    assert series.measured <= 1e-10
    assert live <= 1e-10
    assert secs < 5


def test_criterion_3_full_participation_beta_one_matches_feddyn():
    with stopwatch() as sw:
        errs = verify.feddyn_special_case_errors(rounds=20)
    secs = sw["elapsed"]
    worst = max(errs)
    ok = len(errs) == 20 and worst <= 1e-12 and secs < 5
    report(3, "AdaBest(beta=1) server update equals FedDyn's", ok, f"{len(errs)} rounds, max diff {worst:.2e}", secs)
    assert len(errs) == 20 and worst <= 1e-12
    assert secs < 5


def test_criterion_4_norm_decrease_requires_cosine_condition():
    with stopwatch() as sw:
        trace = verify.feddyn_trace_check(rounds=500)
        signs = verify.margin_sign_check(draws=1000)
    secs = sw["elapsed"]
    ok = trace.passed and signs.passed and secs < 60
    report(4, "FedDyn norm decrease implies cosine condition", ok, f"{trace.detail}; {int(signs.measured)} sign mismatches in 1000 draws", secs)
    assert trace.passed and signs.passed
    assert secs < 60


@pytest.mark.xfail(strict=True, reason="FedDyn stays bounded on strongly convex quadratics; see the decisions ledger")
def test_criterion_5_low_participation_stability():
    with stopwatch() as sw:
        dyn, _ = run_with_federation(verify.stability_config("feddyn", rounds=500))
        ada, _ = run_with_federation(verify.stability_config("adabest", rounds=500))
    secs = sw["elapsed"]
    beta = 0.9
    ratio = dyn.rows[-1].theta_norm / ada.rows[-1].theta_norm
    tail = dyn.column("h_norm")[-100:]
    monotone = bool(np.all(np.diff(tail) >= 0))
    rows = ada.training_rows()
    bound = beta / (1 - beta) * max(r.gbar_norm for r in rows)
    bounded = max(r.h_norm for r in rows) < bound
    ok = ratio >= 2 and monotone and bounded and secs < 120
    detail = f"norm ratio {ratio:.2f} (need >= 2), FedDyn ||h|| tail non-decreasing: {monotone}, AdaBest geometric bound: {bounded}"
    report(5, "FedDyn destabilises while AdaBest stays bounded", ok, detail, secs)
    assert secs < 120
    assert ratio >= 2
    assert monotone
    assert bounded


def test_criterion_6_drift_removal_on_quadratics():
    with stopwatch() as sw:
        a_log, f_log, fed = verify.drift_removal(rounds=300)
        res_a = an.stationarity_residual(fed.problems, a_log.final.theta)
        res_f = an.stationarity_residual(fed.problems, f_log.final.theta)
        fixed = an.fedavg_fixed_point(fed.problems, 0.1, 5)
        fp_err = float(np.max(np.abs(f_log.final.theta - fixed)))
    secs = sw["elapsed"]
    ok = res_a < 1e-4 and res_a < res_f and fp_err <= 1e-6 and secs < 10
    detail = f"AdaBest residual {res_a:.2e}, FedAvg residual {res_f:.2e}, FedAvg fixed-point error {fp_err:.1e}"
    report(6, "AdaBest reaches the stationary point FedAvg misses", ok, detail, secs)
    assert res_a < 1e-4
    assert res_a < res_f
    assert fp_err <= 1e-6
    assert secs < 10


def test_criterion_7_gradients_match_finite_differences():
    with stopwatch() as sw:
        checks = verify.gradients_suite(draws=100)
    secs = sw["elapsed"]
    worst = max(c.measured for c in checks)
    ok = all(c.passed for c in checks) and secs < 30
    report(7, "analytic gradients match central differences", ok, f"worst relative error {worst:.1e} over 3 kinds", secs)
    assert all(c.passed for c in checks)
    assert secs < 30


def test_criterion_8_cost_tables_and_dominance():
    with stopwatch() as sw:
        table = an.cost_table_checks()
        dominance = an.cost_dominance_check()
    secs = sw["elapsed"]
    ok = all(c.passed for c in table + dominance) and secs < 1
    report(8, "cost formulas and dominance", ok, f"{sum(c.passed for c in table)}/8 table rows, {sum(c.passed for c in dominance)}/3 dominance", secs)
    assert all(c.passed for c in table)
    assert all(c.passed for c in dominance)
    assert secs < 1


def test_criterion_9_protocol_constants():
    with stopwatch() as sw:
        problems = []
        for name in PRESETS:
            cfg = parse_config(preset=name)
            if cfg.data.source == "synthetic":
                s = cfg.schedule
                if (s.lr, s.lr_decay, s.epochs, s.batch_size) != (0.1, 0.998, 5, 45):
                    problems.append(f"{name}: schedule")
                if cfg.clients.validation_fraction != 0.1:
                    problems.append(f"{name}: validation split")
                if cfg.algorithm.kind in ("adabest", "feddyn") and cfg.algorithm.mu != 0.02:
                    problems.append(f"{name}: mu")
        for name, beta, frac in (("adabest-10pct", 0.96, 0.1), ("adabest-100pct", 0.98, 1.0)):
            cfg = parse_config(preset=name)
            if (cfg.algorithm.beta, cfg.participation.fraction) != (beta, frac):
                problems.append(f"{name}: beta/participation")
        part = iid_partition(5000, 100, 0)
        if (len(part.clients("train")), len(part.clients("validation"))) != (90, 10) or validation_count(110) != 11:
            problems.append("90/10 client split")
    secs = sw["elapsed"]
    ok = not problems and secs < 1
    report(9, "presets encode the training protocol", ok, "; ".join(problems) or f"{len(PRESETS)} presets checked", secs)
    assert not problems
    assert secs < 1


@pytest.mark.slow
def test_criterion_10_adabest_not_worse_than_fedavg():
    band = 0.005
    with stopwatch() as sw:
        acc = {"fedavg": [], "adabest": []}
        for seed in (1, 2, 3):
            seeds = {f"seeds.{k}": str(seed) for k in ("partition", "init", "sampling")}
            for kind in acc:
                cfg = parse_config(preset=f"{kind}-10pct", overrides={**seeds, "rounds": "400", "eval_interval": "50"})
                log, _ = run_with_federation(cfg)
                acc[kind].append(log.rows[-1].test_acc)
    secs = sw["elapsed"]
    mean_a, mean_f = float(np.mean(acc["adabest"])), float(np.mean(acc["fedavg"]))
    ok = mean_a >= mean_f - band and secs < 300
    report(10, "AdaBest accuracy within band of or above FedAvg", ok, f"AdaBest {mean_a:.4f} vs FedAvg {mean_f:.4f}, band {band}", secs)
    assert mean_a >= mean_f - band
    assert secs < 300
