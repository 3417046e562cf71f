"""Oracle suites behind ``fedsim verify``.

Each suite returns a list of :class:`~fedsim.analysis.Check`. The small
experiment configurations used here are built by the ``*_config`` helpers so
tests can reuse exactly the same setups.
"""

from __future__ import annotations

import numpy as np

from . import analysis as an
from .config import ExperimentConfig, parse_config
from .fedcore import AlgorithmSpec, Kind, RoundSizes, aggregate, mean_pseudo_gradient, update_server_estimate
from .linalg import norm2
from .models import Dataset, ModelSpec, QuadraticProblem, finite_diff_grad, init_params, loss_and_grad
from .runner import MetricsLog, run_with_federation
from .data import random_spd

SUITES = ("remarks", "theorem1", "theorem2", "costs", "gradients")


# shared experiment setups ---------------------------------------------------


def softmax_config(kind: str, mu: float = 0.0, beta: float = 0.0, **extra) -> ExperimentConfig:
    """10 clients, 3-class synthetic data, softmax regression."""
    values = {
        "algorithm.kind": kind,
        "algorithm.mu": str(mu),
        "algorithm.beta": str(beta),
        "data.source": "synthetic",
        "data.n_classes": "3",
        "data.dim": "5",
        "data.n_examples": "600",
        "data.n_test": "300",
        "data.separation": "2.0",
        "data.heterogeneity": "dirichlet",
        "data.alpha": "0.3",
        "model.kind": "softmax",
        "clients.count": "10",
        "clients.validation_fraction": "0",
        "participation.fraction": "0.5",
        "rounds": "50",
        "seeds.partition": "7",
        "seeds.init": "7",
        "seeds.sampling": "7",
    }
    values.update({k: str(v) for k, v in extra.items()})
    return parse_config(overrides=values)


def stability_config(kind: str, rounds: int = 500, **extra) -> ExperimentConfig:
    """200 heterogeneous quadratic clients, 5 sampled per round."""
    values = {"algorithm.kind": kind, "algorithm.mu": "0.02", "algorithm.beta": "0.9", "rounds": str(rounds)}
    values.update({k: str(v) for k, v in extra.items()})
    return parse_config(preset="stability-fig1", overrides=values)


def two_client_config(kind: str, **extra) -> ExperimentConfig:
    """Two heterogeneous quadratic clients, full participation, constant step size."""
    values = {
        "algorithm.kind": kind,
        "data.source": "quadratic",
        "model.kind": "quadratic",
        "data.dim": "5",
        "clients.count": "2",
        "clients.validation_fraction": "0",
        "participation.fraction": "1.0",
        "schedule.lr": "0.1",
        "schedule.lr_decay": "1.0",
        "schedule.epochs": "5",
        "rounds": "300",
    }
    if kind == "adabest":
        values.update({"algorithm.mu": "0.2", "algorithm.beta": "1.0", "schedule.beta_decay": "true"})
    values.update({k: str(v) for k, v in extra.items()})
    return parse_config(overrides=values)


def traced(cfg: ExperimentConfig):
    cfg.trace = True
    cfg.trace_stride = 1
    return run_with_federation(cfg)


# algebraic identities ---------------------------------------------------------------------


def aggregate_identity_check(draws: int = 200, seed: int = 0) -> an.Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        theta_prev = rng.standard_normal(32)
        models = [theta_prev + 0.1 * rng.standard_normal(32) for _ in range(int(rng.integers(1, 8)))]
        theta_bar = aggregate(models)
        g_bar = mean_pseudo_gradient(theta_prev, models)
        worst = max(worst, float(np.max(np.abs(theta_prev - g_bar - theta_bar))))
    return an.Check("aggregate-unit-step", worst <= 1e-12, worst, 1e-12, f"{draws} random rounds")


def series_cases(n_cases: int = 100, seed: int = 0, dim: int = 32):
    rng = np.random.default_rng(seed)
    betas = (0.2, 0.5, 0.9, 1.0)
    for _ in range(n_cases):
        beta = betas[int(rng.integers(len(betas)))]
        length = int(rng.integers(1, 51))
        yield beta, [rng.standard_normal(dim) for _ in range(length)]


def series_check(n_cases: int = 100, seed: int = 0) -> an.Check:
    worst = max(an.relative_error(an.recurrence_h(h, b), an.power_series_h(h, b)) for b, h in series_cases(n_cases, seed))
    return an.Check("series-vs-recurrence", worst <= 1e-10, worst, 1e-10, f"{n_cases} random histories")


def drift_identity_errors(log: MetricsLog) -> list[float]:
    """Per-round max deviation of ``theta_bar^{t-1} - theta_bar^t`` from ``h^{t-1} + g_bar^t``."""
    tr = log.trace
    bars = [tr.theta0] + tr.theta_bar
    hs = [np.zeros_like(tr.theta0)] + tr.h
    return [
        float(np.max(np.abs((bars[k] - bars[k + 1]) - (hs[k] + tr.g_bar[k]))))
        for k in range(len(tr.g_bar))
    ]


def live_drift_check(rounds: int = 50) -> an.Check:
    log, _ = traced(softmax_config("adabest", mu=0.02, beta=0.9, rounds=rounds, check_invariants="true"))
    errs = drift_identity_errors(log)
    return an.Check("drift-identity-live", max(errs) <= 1e-10, max(errs), 1e-10, f"{len(errs)} rounds")


def live_series_check(rounds: int = 50) -> an.Check:
    """Recorded AdaBest ``h`` against the power series over recorded ``g_bar``."""
    log, _ = traced(softmax_config("adabest", mu=0.02, beta=0.9, rounds=rounds))
    tr = log.trace
    worst = max(
        an.relative_error(tr.h[k], an.power_series_h(tr.g_bar[: k + 1], 0.9)) for k in range(len(tr.h))
    )
    # theta_bar differences carry rounding the pure series does not
    tol = 1e-9
    return an.Check("series-live", worst <= tol, worst, tol, f"{len(tr.h)} rounds")


def fedavg_equivalence(rounds: int = 50) -> tuple[MetricsLog, MetricsLog]:
    a, _ = run_with_federation(softmax_config("adabest", mu=0.0, beta=0.0, rounds=rounds))
    f, _ = run_with_federation(softmax_config("fedavg", rounds=rounds))
    return a, f


def fedavg_equivalence_check(rounds: int = 50) -> an.Check:
    a, f = fedavg_equivalence(rounds)
    same_rows = [r.deterministic() for r in a.rows] == [r.deterministic() for r in f.rows]
    same_rows = same_rows and repr([r.deterministic() for r in a.rows]) == repr([r.deterministic() for r in f.rows])
    same_theta = a.final.theta.tobytes() == f.final.theta.tobytes()
    diff = float(np.max(np.abs(a.final.theta - f.final.theta)))
    ok = same_rows and same_theta
    return an.Check("reduces-to-fedavg", ok, diff, 0.0, f"{rounds} rounds, bitwise {'equal' if ok else 'different'}")


def feddyn_special_case_errors(rounds: int = 20) -> list[float]:
    """AdaBest (beta=1) vs FedDyn server rules on the same recorded full-participation states."""
    log, fed = traced(softmax_config("adabest", mu=0.02, beta=1.0, rounds=rounds, **{"participation.fraction": "1.0"}))
    tr = log.trace
    n = len(fed.clients)
    feddyn = AlgorithmSpec(Kind.FEDDYN, mu=0.02)
    thetas = [tr.theta0] + tr.theta
    bars = [tr.theta0] + tr.theta_bar
    hs = [np.zeros_like(tr.theta0)] + tr.h
    errs = []
    for k in range(len(tr.h)):
        sizes = RoundSizes(registered=n, participants=n)
        h_dyn = update_server_estimate(feddyn, hs[k], thetas[k], bars[k], bars[k + 1], sizes=sizes)
        errs.append(float(np.max(np.abs(h_dyn - tr.h[k]))))
    return errs


def feddyn_special_case_check(rounds: int = 20) -> an.Check:
    errs = feddyn_special_case_errors(rounds)
    return an.Check("beta-one-is-feddyn", max(errs) <= 1e-12, max(errs), 1e-12, f"{len(errs)} rounds")


def remarks_suite() -> list[an.Check]:
    return [
        aggregate_identity_check(),
        live_drift_check(),
        series_check(),
        live_series_check(),
        fedavg_equivalence_check(),
        feddyn_special_case_check(),
    ]


# norm-decrease condition -------------------------------------------------------------------


def margin_sign_check(draws: int = 1000, seed: int = 0, slack: float = 1e-9) -> an.Check:
    """Margin <= 0 exactly when the FedDyn step does not grow ``||h||``."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(draws):
        dim = int(rng.integers(2, 16))
        s = int(rng.integers(2, 300))
        p = int(rng.integers(1, s + 1))
        h = rng.standard_normal(dim) * rng.uniform(0.1, 10)
        g = rng.standard_normal(dim) * rng.uniform(0.1, 10)
        if rng.random() < 0.5:
            # push g against h so both outcomes show up often
            g -= rng.uniform(0, 2) * (g @ h) / (h @ h) * h + rng.uniform(0, 1) * h
        margin = an.theorem1_margin(h, g, p, s)
        if abs(margin) <= slack:
            continue
        if (margin <= 0) != an.feddyn_norm_decreases(h, g, p, s):
            mismatches += 1
    return an.Check("margin-sign", mismatches == 0, float(mismatches), 0.0, f"{draws} random draws")


def feddyn_trace_check(rounds: int = 500) -> an.Check:
    log, _ = traced(stability_config("feddyn", rounds=rounds))
    tr = log.trace
    rows = log.training_rows()
    hs = [np.zeros_like(tr.theta0)] + tr.h
    return an.theorem1_trace_check(hs, tr.g_bar, [r.participants for r in rows], [r.registered for r in rows])


def theorem1_suite(rounds: int = 100) -> list[an.Check]:
    return [margin_sign_check(), feddyn_trace_check(rounds)]


# drift removal -------------------------------------------------------------------


def drift_removal(rounds: int = 300):
    """Final AdaBest and FedAvg states on the two-client quadratic federation."""
    a_log, fed = run_with_federation(two_client_config("adabest", rounds=rounds))
    f_log, _ = run_with_federation(two_client_config("fedavg", rounds=rounds))
    return a_log, f_log, fed


def theorem2_suite() -> list[an.Check]:
    a_log, f_log, fed = drift_removal()
    res_a = an.stationarity_residual(fed.problems, a_log.final.theta)
    res_f = an.stationarity_residual(fed.problems, f_log.final.theta)
    fixed = an.fedavg_fixed_point(fed.problems, 0.1, 5)
    fp_err = float(np.max(np.abs(f_log.final.theta - fixed)))
    dyn_log, _ = run_with_federation(stability_config("feddyn", rounds=100))
    return [
        an.theorem2_trace_check(a_log.rows)._replace(name="still-aggregate-bound-adabest"),
        an.theorem2_trace_check(dyn_log.rows)._replace(name="still-aggregate-bound-feddyn"),
        an.theorem2_necessity(a_log.rows, tol=1e-6, window=10),
        an.Check("adabest-residual", res_a < 1e-4, res_a, 1e-4, "two-client quadratic, 300 rounds"),
        an.Check("adabest-beats-fedavg", res_a < res_f, res_a - res_f, 0.0, f"fedavg residual {res_f:.3e}"),
        an.Check("fedavg-fixed-point", fp_err <= 1e-6, fp_err, 1e-6, "closed-form biased fixed point"),
    ]


# costs -----------------------------------------------------------------------


def costs_suite() -> list[an.Check]:
    return an.cost_table_checks() + an.cost_dominance_check()


# gradients -------------------------------------------------------------------

GRADIENT_SPECS = {
    "quadratic": ModelSpec("quadratic", input_dim=6, weight_decay=1e-3),
    "softmax": ModelSpec("softmax", input_dim=5, n_classes=4, weight_decay=1e-3),
    "mlp": ModelSpec("mlp", input_dim=5, n_classes=3, hidden=(6, 4), weight_decay=1e-3),
}


def random_batch(spec: ModelSpec, rng: np.random.Generator):
    if spec.kind == "quadratic":
        return QuadraticProblem(random_spd(spec.input_dim, 0.5, 3.0, rng), rng.standard_normal(spec.input_dim))
    n = int(rng.integers(1, 12))
    return Dataset(rng.standard_normal((n, spec.input_dim)), rng.integers(0, spec.n_classes, size=n))


def gradient_errors(kind: str, draws: int = 100, seed: int = 0) -> list[float]:
    spec = GRADIENT_SPECS[kind]
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(draws):
        params = init_params(spec, rng) * rng.uniform(0.5, 3.0)
        batch = random_batch(spec, rng)
        _, g = loss_and_grad(spec, params, batch)
        fd = finite_diff_grad(spec, params, batch)
        errs.append(norm2(g - fd) / max(norm2(fd), 1e-12))
    return errs


def gradients_suite(draws: int = 100) -> list[an.Check]:
    checks = []
    for kind in GRADIENT_SPECS:
        worst = max(gradient_errors(kind, draws))
        checks.append(an.Check(f"gradient-{kind}", worst < 1e-5, worst, 1e-5, f"{draws} draws"))
    return checks


def run_suite(name: str) -> list[an.Check]:
    if name == "all":
        return [c for s in SUITES for c in run_suite(s)]
    table = {
        "remarks": remarks_suite,
        "theorem1": theorem1_suite,
        "theorem2": theorem2_suite,
        "costs": costs_suite,
        "gradients": gradients_suite,
    }
    if name not in table:
        raise KeyError(name)
    return table[name]()
