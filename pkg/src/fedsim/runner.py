"""Round loop and experiment driver, including the step-size and β schedules.

A run is a pure function of its :class:`~fedsim.config.ExperimentConfig`:
client sampling and local mini-batch order are drawn from generators keyed
on ``(seed, round, client id)``, so the result does not depend on whether
local training runs sequentially or on a thread pool.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import data as datamod
from .fedcore import (
    AlgorithmSpec,
    ClientState,
    InvariantError,
    Kind,
    LocalRunConfig,
    RoundSizes,
    ServerState,
    aggregate,
    check_aggregate_drift_identity,
    cloud_update,
    mean_pseudo_gradient,
    run_local,
    update_client_estimate,
    update_server_estimate,
)
from .linalg import NonFiniteError, ParamVector, all_finite, cos_angle, norm2
from .models import Dataset, ModelSpec, QuadraticProblem, evaluate, init_params, load_dataset

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class SamplerConfig:
    """How many clients take part each round.

    ``count`` (when positive) wins over ``fraction``. ``pool_schedule`` lists
    ``(round, n_added)`` pairs; clients are registered in id order, so the
    pool starts with everyone not scheduled to join later.
    """

    fraction: float = 0.1
    count: int = 0
    pool_schedule: tuple[tuple[int, int], ...] = ()

    def resolve(self, pool_size: int) -> int:
        if pool_size < 1:
            raise ValueError("client pool is empty")
        if self.count > 0:
            n = self.count
        else:
            n = math.floor(self.fraction * pool_size + 0.5)
        if n < 1:
            raise ValueError(f"participation resolves to {n} clients out of {pool_size}")
        return min(n, pool_size)


@dataclass(frozen=True)
class ScheduleConfig:
    lr: float = 0.1
    lr_decay: float = 0.998
    epochs: int = 5
    batch_size: int = 45
    beta_decay: bool = False
    plateau_window: int = 20
    plateau_rho: float = 0.01
    plateau_gamma: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0,1]")
        if self.plateau_window < 2:
            raise ValueError("plateau_window must be at least 2")
        if not 0 < self.plateau_gamma <= 1:
            raise ValueError("plateau_gamma must lie in (0,1]")


@dataclass
class RoundMetrics:
    round: int
    test_loss: float = math.nan
    test_acc: float = math.nan
    train_loss: float = math.nan
    theta_norm: float = math.nan
    h_norm: float = math.nan
    gbar_norm: float = math.nan
    cos_h_g: float = math.nan
    lr: float = math.nan
    beta: float = math.nan
    h_prev_norm: float = math.nan
    theta_bar_step: float = math.nan
    participants: int = 0
    registered: int = 0
    infer_loss: float = math.nan
    infer_acc: float = math.nan
    val_loss: float = math.nan
    val_acc: float = math.nan
    wall_time: float = 0.0

    def deterministic(self) -> tuple:
        """Every field except wall-clock time."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "wall_time")


@dataclass
class TraceRecord:
    """Per-round vector snapshots, kept every ``stride`` rounds."""

    stride: int = 1
    theta0: ParamVector | None = None
    rounds: list[int] = field(default_factory=list)
    g_bar: list[ParamVector] = field(default_factory=list)
    h: list[ParamVector] = field(default_factory=list)
    theta: list[ParamVector] = field(default_factory=list)
    theta_bar: list[ParamVector] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    client_models: list[list[ParamVector]] = field(default_factory=list)

    def record(self, t, g_bar, h, theta, theta_bar, beta, models) -> None:
        if (t - 1) % self.stride:
            return
        self.rounds.append(t)
        self.g_bar.append(g_bar)
        self.h.append(h)
        self.theta.append(theta)
        self.theta_bar.append(theta_bar)
        self.beta.append(beta)
        self.client_models.append(list(models))


@dataclass
class MetricsLog:
    rows: list[RoundMetrics]
    final: ServerState | None = None
    trace: TraceRecord | None = None
    decay_rounds: list[int] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def training_rows(self) -> list[RoundMetrics]:
        return [r for r in self.rows if r.round > 0]


# schedules ----------------------------------------------------------------


def lr_at(schedule: ScheduleConfig, round: int) -> float:
    """Local step size after ``round`` completed rounds."""
    if round < 0:
        raise ValueError("round must be non-negative")
    return schedule.lr * schedule.lr_decay ** round


class PlateauDetector:
    """Flags rounds where the windowed mean of ``||h||`` stops moving.

    A plateau is declared once two consecutive full windows of ``window``
    values (counted since the last plateau) have means differing by less
    than ``rho`` relative to the older window.
    """

    def __init__(self, window: int, rho: float):
        self.window = window
        self.rho = rho
        self.values: list[float] = []
        self.start = 0

    def update(self, value: float) -> bool:
        self.values.append(float(value))
        w = self.window
        seg = self.values[self.start:]
        if len(seg) < 2 * w:
            return False
        old = float(np.mean(seg[-2 * w:-w]))
        new = float(np.mean(seg[-w:]))
        if old == 0.0:
            change = 0.0 if new == 0.0 else math.inf
        else:
            change = abs(new - old) / abs(old)
        if change < self.rho:
            self.start = len(self.values)
            return True
        return False


def plateau_rounds(schedule: ScheduleConfig, h_norm_history) -> list[int]:
    """1-based rounds at which the detector fires over a ``||h||`` history."""
    det = PlateauDetector(schedule.plateau_window, schedule.plateau_rho)
    return [t for t, v in enumerate(h_norm_history, start=1) if det.update(v)]


def beta_at(schedule: ScheduleConfig, round: int, h_norm_history, beta0: float) -> float:
    """``beta`` in effect during ``round`` given ``||h||`` of earlier rounds.

    ``h_norm_history[k]`` is ``||h||`` after round ``k + 1``.
    """
    if not schedule.beta_decay:
        return beta0
    fired = plateau_rounds(schedule, list(h_norm_history)[: max(round - 1, 0)])
    return beta0 * schedule.plateau_gamma ** len(fired)


# sampling -----------------------------------------------------------------


def sample_clients(pool: list[ClientState], cfg: SamplerConfig, round: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    if not pool:
        raise ValueError("client pool is empty")
    n = cfg.resolve(len(pool))
    ids = np.array(sorted(c.id for c in pool))
    chosen = rng.choice(ids.size, size=n, replace=False)
    return sorted(int(i) for i in ids[chosen])


def sampling_rng(seed: int, round: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, round])


def local_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, round, client_id])


def inference_model(server: ServerState) -> ParamVector:
    """Running mean of every client model received so far."""
    if server.inference_count < 1 or server.inference_sum is None:
        raise ValueError("no client models have been absorbed yet")
    return server.inference_sum / server.inference_count


# one round ----------------------------------------------------------------


@dataclass
class RoundResult:
    server: ServerState
    clients: dict[int, ClientState]
    metrics: RoundMetrics
    g_bar: ParamVector
    client_models: list[ParamVector]


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDSIM_THREADS", "1")))
    except ValueError:
        return 1


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    pool_ids: list[int],
    spec: AlgorithmSpec,
    schedule: ScheduleConfig,
    sampler: SamplerConfig,
    model: ModelSpec,
    seed: int,
    beta: float | None = None,
    weighted: bool = False,
    check_invariants: bool = False,
    executor: ThreadPoolExecutor | None = None,
) -> RoundResult:
    """Execute round ``server.round + 1``: sample, train locally, aggregate, update estimates.

    ``clients`` maps id to state for every known client; ``pool_ids`` are
    the ones registered this round. Returns new server and client states;
    the inputs are left untouched.
    """
    t = server.round + 1
    start = time.perf_counter()
    lr = lr_at(schedule, t - 1)
    beta = spec.beta if beta is None else beta
    pool = [clients[i] for i in pool_ids]
    chosen = sample_clients(pool, sampler, t, sampling_rng(seed, t))
    local_cfg = LocalRunConfig(lr=lr, epochs=schedule.epochs, batch_size=schedule.batch_size)
    theta_prev = server.theta

    def work(cid: int):
        return run_local(spec, clients[cid], theta_prev, local_cfg, model, server.h, local_rng(seed, t, cid))

    try:
        if executor is not None and len(chosen) > 1:
            results = list(executor.map(work, chosen))
        else:
            results = [work(cid) for cid in chosen]
    except NonFiniteError as exc:
        raise NonFiniteError(str(exc), where=f"round {t}", round=t) from exc

    models = [r.theta for r in results]
    weights = [float(clients[cid].n_examples) for cid in chosen] if weighted else None
    theta_bar = aggregate(models, theta_prev=theta_prev, weights=weights)
    # unweighted: average the pseudo-gradients directly, independent of theta_bar
    g_bar = theta_prev - theta_bar if weighted else mean_pseudo_gradient(theta_prev, models)
    mean_steps = float(np.mean([r.steps for r in results]))
    sizes = RoundSizes(registered=len(pool_ids), participants=len(chosen), local_steps=mean_steps, lr=lr)

    new_clients = dict(clients)
    for cid, res in zip(chosen, results):
        c = clients[cid]
        h_i = update_client_estimate(spec, c.h, res.pseudo_grad, t, c.t_last, sizes=sizes, global_delta=g_bar)
        new_clients[cid] = ClientState(id=c.id, h=h_i, data=c.data, t_last=t)

    h_new = update_server_estimate(spec, server.h, theta_prev, server.theta_bar_prev, theta_bar, sizes=sizes, beta=beta)
    theta_new = cloud_update(spec, theta_bar, h_new)

    if not all_finite(theta_new, h_new, theta_bar):
        raise NonFiniteError("server state became non-finite", where=f"round {t}", round=t)

    h_prev_norm = norm2(server.h)
    h_norm = norm2(h_new)
    g_norm = norm2(g_bar)
    if spec.kind is Kind.ADABEST:
        bound = beta * (h_prev_norm + g_norm)
        # h is a difference of aggregates, so it carries rounding of order eps * ||theta_bar||
        slack = 1e-12 * bound + 1e-13 * (1.0 + norm2(theta_bar))
        if h_norm > bound + slack:
            raise InvariantError(f"round {t}: ||h|| = {h_norm:.6g} exceeds beta (||h_prev|| + ||g_bar||) = {bound:.6g}")
        if check_invariants:
            check_aggregate_drift_identity(server.theta_bar_prev, theta_bar, server.h, g_bar)

    inf_sum = server.inference_sum
    inf_sum = (np.zeros_like(theta_prev) if inf_sum is None else inf_sum.copy())
    for m in models:
        inf_sum += m
    new_server = ServerState(
        theta=theta_new,
        theta_bar_prev=theta_bar,
        h=h_new,
        round=t,
        inference_sum=inf_sum,
        inference_count=server.inference_count + len(models),
    )
    cos = math.nan
    if h_prev_norm > 0 and g_norm > 0:
        cos = cos_angle(server.h, g_bar)
    metrics = RoundMetrics(
        round=t,
        train_loss=float(np.mean([r.train_loss for r in results])),
        theta_norm=norm2(theta_new),
        h_norm=h_norm,
        gbar_norm=g_norm,
        cos_h_g=cos,
        lr=lr,
        beta=float(beta) if spec.kind is Kind.ADABEST else float(spec.beta),
        h_prev_norm=h_prev_norm,
        theta_bar_step=norm2(server.theta_bar_prev - theta_bar),
        participants=len(chosen),
        registered=len(pool_ids),
        wall_time=time.perf_counter() - start,
    )
    return RoundResult(new_server, new_clients, metrics, g_bar, models)


# whole experiment ---------------------------------------------------------


@dataclass
class Federation:
    """Everything a run needs besides the algorithm settings."""

    model: ModelSpec
    clients: dict[int, ClientState]
    join_round: dict[int, int]
    test: Dataset | list[QuadraticProblem]
    validation: Dataset | list[QuadraticProblem] | None = None
    problems: list[QuadraticProblem] | None = None
    optimum: ParamVector | None = None
    partition: datamod.Partition | None = None

    def pool(self, t: int) -> list[int]:
        return sorted(cid for cid, r in self.join_round.items() if r <= t)


def _join_rounds(train_ids: list[int], schedule: tuple[tuple[int, int], ...]) -> dict[int, int]:
    added = sum(k for _, k in schedule)
    if added >= len(train_ids):
        raise ValueError("pool schedule adds more clients than exist beyond the initial pool")
    initial = len(train_ids) - added
    joins = {cid: 1 for cid in train_ids[:initial]}
    pos = initial
    for r, k in sorted(schedule):
        for cid in train_ids[pos:pos + k]:
            joins[cid] = r
        pos += k
    return joins


def build_federation(cfg: "ExperimentConfig") -> Federation:
    d = cfg.data
    m = cfg.model
    part_seed = cfg.seeds.partition
    if d.source == "quadratic":
        problems, optimum = datamod.make_quadratic_federation(
            cfg.clients.count, d.dim, d.spread, (d.curvature_min, d.curvature_max), part_seed
        )
        n_val = datamod.validation_count(cfg.clients.count, cfg.clients.validation_fraction)
        n_train = cfg.clients.count - n_val
        train = problems[:n_train]
        model = ModelSpec("quadratic", input_dim=d.dim, weight_decay=m.weight_decay)
        zero = np.zeros(model.dim)
        clients = {i: ClientState(i, zero, p) for i, p in enumerate(train)}
        return Federation(
            model=model,
            clients=clients,
            join_round=_join_rounds(list(range(n_train)), cfg.clients.pool_schedule),
            test=train,
            validation=problems[n_train:] or None,
            problems=train,
            optimum=datamod.quadratic_optimum(train),
        )

    if d.source == "synthetic":
        full = datamod.make_synthetic_classification(
            d.n_classes, d.dim, d.n_examples + d.n_test, d.separation, part_seed
        )
        train_data = full.subset(np.arange(d.n_examples))
        test = full.subset(np.arange(d.n_examples, d.n_examples + d.n_test))
        n_classes = d.n_classes
    else:
        train_data = load_dataset(d.path)
        test = load_dataset(d.test_path) if d.test_path else train_data
        n_classes = int(max(train_data.labels.max(), test.labels.max())) + 1

    het = datamod.HeterogeneityConfig(d.heterogeneity, d.alpha, d.balance, d.sigma)
    partition = datamod.partition_dataset(
        train_data.labels, cfg.clients.count, het, part_seed, cfg.clients.validation_fraction
    )
    model = ModelSpec(m.kind, input_dim=train_data.dim, n_classes=n_classes, hidden=m.hidden, weight_decay=m.weight_decay)
    zero = np.zeros(model.dim)
    train_ids = partition.clients("train")
    clients = {cid: ClientState(cid, zero, train_data.subset(partition.indices[cid])) for cid in train_ids}
    val_idx = [i for cid in partition.clients("validation") for i in partition.indices[cid]]
    validation = train_data.subset(sorted(val_idx)) if val_idx else None
    return Federation(
        model=model,
        clients=clients,
        join_round=_join_rounds(train_ids, cfg.clients.pool_schedule),
        test=test,
        validation=validation,
        partition=partition,
    )


def algorithm_spec(cfg: "ExperimentConfig") -> AlgorithmSpec:
    return AlgorithmSpec(Kind(cfg.algorithm.kind), mu=cfg.algorithm.mu, beta=cfg.algorithm.beta)


def _evaluate_into(metrics: RoundMetrics, fed: Federation, theta, server: ServerState) -> None:
    metrics.test_loss, metrics.test_acc = evaluate(fed.model, theta, fed.test)
    if server.inference_count > 0:
        metrics.infer_loss, metrics.infer_acc = evaluate(fed.model, inference_model(server), fed.test)
    if fed.validation is not None:
        metrics.val_loss, metrics.val_acc = evaluate(fed.model, theta, fed.validation)


def run_experiment(
    cfg: "ExperimentConfig",
    federation: Federation | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> MetricsLog:
    """Build the federation, run ``cfg.rounds`` rounds and return the log.

    ``on_round`` sees each emitted row as soon as it exists, which lets the
    CLI flush partial output before a numeric abort propagates.
    """
    fed = federation or build_federation(cfg)
    spec = algorithm_spec(cfg)
    schedule = cfg.schedule
    sampler = SamplerConfig(cfg.participation.fraction, cfg.participation.count, cfg.clients.pool_schedule)
    theta0 = init_params(fed.model, np.random.default_rng(cfg.seeds.init))
    server = ServerState.initial(theta0)
    clients = dict(fed.clients)

    row0 = RoundMetrics(round=0, theta_norm=norm2(theta0), h_norm=0.0, lr=lr_at(schedule, 0), beta=spec.beta)
    _evaluate_into(row0, fed, server.theta, server)
    log_ = MetricsLog(rows=[row0], trace=TraceRecord(stride=cfg.trace_stride, theta0=theta0) if cfg.trace else None)
    if on_round:
        on_round(row0)

    detector = PlateauDetector(schedule.plateau_window, schedule.plateau_rho)
    beta = spec.beta
    workers = _worker_count()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            res = run_round(
                server, clients, fed.pool(t), spec, schedule, sampler, fed.model, cfg.seeds.sampling,
                beta=beta, weighted=cfg.weighted_aggregation, check_invariants=cfg.check_invariants,
                executor=executor,
            )
            server, clients = res.server, res.clients
            if log_.trace is not None:
                log_.trace.record(t, res.g_bar, server.h, server.theta, server.theta_bar_prev, beta, res.client_models)
            if spec.kind is Kind.ADABEST and schedule.beta_decay and detector.update(res.metrics.h_norm):
                beta *= schedule.plateau_gamma
                log_.decay_rounds.append(t)
                log.info("round %d: ||h|| plateaued, beta -> %.6g", t, beta)
            if t % cfg.eval_interval == 0 or t == cfg.rounds:
                _evaluate_into(res.metrics, fed, server.theta, server)
                log_.rows.append(res.metrics)
                if on_round:
                    on_round(res.metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    log_.final = server
    return log_


def run_with_federation(cfg: "ExperimentConfig") -> tuple[MetricsLog, Federation]:
    fed = build_federation(cfg)
    return run_experiment(cfg, fed), fed
