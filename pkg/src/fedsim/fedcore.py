"""State transitions for FedAvg, SCAFFOLD/m, FedDyn and AdaBest.

Every function here is pure: it takes immutable snapshots and returns new
vectors. The round loop that strings them together lives in
:mod:`fedsim.runner`.

Notation used in names and docstrings:

* ``theta``: cloud model broadcast to clients
* ``theta_bar``: plain average of the client models received in a round
* ``g_i``: a client's pseudo-gradient, ``theta_in - theta_out``
* ``h`` / ``h_i``: server and client drift estimates
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, NamedTuple

import numpy as np

from .linalg import DimensionError, NonFiniteError, ParamVector, mean_of
from .models import ModelSpec, epoch_batches, loss_and_grad, steps_per_epoch


class Kind(str, Enum):
    FEDAVG = "fedavg"
    SCAFFOLDM = "scaffoldm"
    FEDDYN = "feddyn"
    ADABEST = "adabest"


class InvariantError(AssertionError):
    """An algebraic identity that must hold every round did not."""


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: Kind
    mu: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.mu >= 0:
            raise ValueError("mu must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0,1]")
        if self.kind is Kind.FEDAVG:
            object.__setattr__(self, "mu", 0.0)
            object.__setattr__(self, "beta", 0.0)


@dataclass(frozen=True)
class RoundSizes:
    """Counts entering the SCAFFOLD/m and FedDyn scaling factors.

    ``registered`` is the number of clients registered at this round and
    ``participants`` the number sampled. ``local_steps`` and ``lr`` are the
    ``K`` and ``eta`` of SCAFFOLD/m's ``1/(K eta)`` factor.
    """

    registered: int
    participants: int
    local_steps: float = 1.0
    lr: float = 1.0


@dataclass(frozen=True)
class ClientState:
    id: int
    h: ParamVector
    data: Any
    t_last: int | None = None

    @property
    def n_examples(self) -> int:
        return self.data.n


@dataclass(frozen=True)
class ServerState:
    theta: ParamVector
    theta_bar_prev: ParamVector
    h: ParamVector
    round: int = 0
    inference_sum: ParamVector | None = None
    inference_count: int = 0

    @classmethod
    def initial(cls, theta0: ParamVector) -> "ServerState":
        theta0 = np.array(theta0, dtype=np.float64)
        return cls(
            theta=theta0,
            theta_bar_prev=theta0.copy(),
            h=np.zeros_like(theta0),
            round=0,
            inference_sum=np.zeros_like(theta0),
            inference_count=0,
        )


@dataclass(frozen=True)
class LocalRunConfig:
    lr: float
    epochs: int = 5
    batch_size: int = 45

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def total_steps(self, n_examples: int) -> int:
        return self.epochs * steps_per_epoch(n_examples, self.batch_size)


class LocalResult(NamedTuple):
    theta: ParamVector
    pseudo_grad: ParamVector
    train_loss: float
    steps: int


def _same_dims(*vs: ParamVector) -> None:
    shape = vs[0].shape
    for v in vs[1:]:
        if v.shape != shape:
            raise DimensionError(f"dimension mismatch: {shape} vs {v.shape}")


def local_gradient(
    spec: AlgorithmSpec,
    raw_grad: ParamVector,
    h_i: ParamVector,
    h: ParamVector,
    theta_round_start: ParamVector,
    theta_current: ParamVector,
) -> ParamVector:
    """Drift-corrected local gradient for one mini-batch step.

    ``h_i`` already carries the ``mu`` factor from its own update, so it is
    subtracted as is for both FedDyn and AdaBest.
    """
    _same_dims(raw_grad, h_i, h, theta_round_start, theta_current)
    kind = spec.kind
    if kind is Kind.FEDAVG:
        return raw_grad
    if kind is Kind.ADABEST:
        return raw_grad - h_i
    if kind is Kind.FEDDYN:
        return raw_grad - h_i - spec.mu * (theta_round_start - theta_current)
    return raw_grad - h_i + h


def run_local(
    spec: AlgorithmSpec,
    client: ClientState,
    theta_in: ParamVector,
    cfg: LocalRunConfig,
    model: ModelSpec,
    server_h: ParamVector,
    rng: np.random.Generator,
) -> LocalResult:
    """Run ``epochs * ceil(n_i / batch_size)`` corrected SGD steps from ``theta_in``."""
    _same_dims(theta_in, client.h, server_h)
    data = client.data
    n = data.n
    theta = np.array(theta_in, dtype=np.float64, copy=True)
    # the quadratic testbed is full-batch: one deterministic step per epoch
    full_batch = model.kind == "quadratic"
    losses = 0.0
    steps = 0
    # overflow is caught by the finiteness check below, so keep numpy quiet
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            batches = [None] if full_batch else epoch_batches(n, cfg.batch_size, rng)
            for idx in batches:
                batch = data if idx is None else data.subset(idx)
                loss, grad = loss_and_grad(model, theta, batch)
                step = local_gradient(spec, grad, client.h, server_h, theta_in, theta)
                theta -= cfg.lr * step
                losses += loss
                steps += 1
                if not np.isfinite(loss) or not np.all(np.isfinite(theta)):
                    raise NonFiniteError(
                        f"client {client.id} parameters became non-finite",
                        where=f"epoch {epoch + 1}, local step {steps}",
                    )
    return LocalResult(theta, theta_in - theta, losses / steps, steps)


def update_client_estimate(
    spec: AlgorithmSpec,
    h_i_old: ParamVector,
    g_i: ParamVector,
    t: int,
    t_last: int | None,
    sizes: RoundSizes | None = None,
    global_delta: ParamVector | None = None,
) -> ParamVector:
    """New local drift estimate after client participates in round ``t``.

    SCAFFOLD/m's rule uses the round's global displacement
    ``theta^{t-1} - theta_bar^t`` (``global_delta``) rather than ``g_i``.
    """
    _same_dims(h_i_old, g_i)
    last = 0 if t_last is None else t_last
    if t <= last:
        raise ValueError(f"round {t} is not after the client's last round {last}")
    kind = spec.kind
    if kind is Kind.FEDAVG:
        return np.zeros_like(h_i_old)
    if kind is Kind.ADABEST:
        return h_i_old / (t - last) + spec.mu * g_i
    if kind is Kind.FEDDYN:
        return h_i_old + spec.mu * g_i
    if sizes is None or global_delta is None:
        raise ValueError("SCAFFOLD/m needs round sizes and the global displacement")
    _same_dims(h_i_old, global_delta)
    return _scaffold_step(h_i_old, global_delta, sizes)


def _scaffold_step(prev: ParamVector, delta: ParamVector, sizes: RoundSizes) -> ParamVector:
    s = sizes.registered
    if s < 1:
        raise ValueError("no registered clients")
    out = ((s - 1) / s) * prev
    if sizes.lr > 0 and sizes.local_steps > 0:
        # with lr == 0 the displacement is exactly zero; skip the 0 * inf
        out = out + (sizes.participants / (sizes.local_steps * sizes.lr * s)) * delta
    return out


def mean_pseudo_gradient(theta_prev: ParamVector, client_models: list[ParamVector]) -> ParamVector:
    return mean_of([theta_prev - m for m in client_models])


def aggregate(
    client_models: list[ParamVector],
    theta_prev: ParamVector | None = None,
    weights: list[float] | None = None,
    tol: float = 1e-12,
) -> ParamVector:
    """Average the received client models.

    When ``theta_prev`` is given, also confirm that the average equals one
    unit step from ``theta_prev`` along the mean pseudo-gradient.
    """
    if not client_models:
        raise ValueError("no client models to aggregate")
    theta_bar = mean_of(client_models, weights)
    if theta_prev is not None and weights is None:
        g_bar = mean_pseudo_gradient(theta_prev, client_models)
        err = np.max(np.abs(theta_prev - g_bar - theta_bar), initial=0.0)
        scale = 1.0 + max(np.max(np.abs(theta_prev), initial=0.0), np.max(np.abs(theta_bar), initial=0.0))
        if err > tol * scale:
            raise InvariantError(f"aggregation identity violated by {err:.3e}")
    return theta_bar


def update_server_estimate(
    spec: AlgorithmSpec,
    h_prev: ParamVector,
    theta_prev: ParamVector,
    theta_bar_prev: ParamVector,
    theta_bar: ParamVector,
    sizes: RoundSizes | None = None,
    beta: float | None = None,
) -> ParamVector:
    """Server drift estimate ``h^t``.

    ``beta`` overrides ``spec.beta`` when a decay schedule is active. The
    AdaBest branch never looks at ``sizes``.
    """
    _same_dims(h_prev, theta_prev, theta_bar_prev, theta_bar)
    kind = spec.kind
    if kind is Kind.FEDAVG:
        return np.zeros_like(h_prev)
    if kind is Kind.ADABEST:
        b = spec.beta if beta is None else beta
        if not 0.0 <= b <= 1.0:
            raise ValueError("beta must lie in [0,1]")
        return b * (theta_bar_prev - theta_bar)
    if sizes is None or sizes.registered < 1:
        raise ValueError("this rule needs a positive registered-client count")
    if kind is Kind.FEDDYN:
        return h_prev + (sizes.participants / sizes.registered) * (theta_prev - theta_bar)
    return _scaffold_step(h_prev, theta_prev - theta_bar, sizes)


def cloud_update(spec: AlgorithmSpec, theta_bar: ParamVector, h: ParamVector) -> ParamVector:
    """Model broadcast next round."""
    _same_dims(theta_bar, h)
    if spec.kind in (Kind.FEDDYN, Kind.ADABEST):
        return theta_bar - h
    return theta_bar


def check_aggregate_drift_identity(
    theta_bar_prev: ParamVector,
    theta_bar: ParamVector,
    h_prev: ParamVector,
    g_bar: ParamVector,
    tol: float = 1e-10,
) -> float:
    """AdaBest: ``theta_bar^{t-1} - theta_bar^t`` equals ``h^{t-1} + g_bar^t``.

    Returns the max absolute deviation; raises when it exceeds ``tol``
    (scaled by the magnitude of the quantities involved).
    """
    err = float(np.max(np.abs((theta_bar_prev - theta_bar) - (h_prev + g_bar)), initial=0.0))
    scale = 1.0 + float(max(np.max(np.abs(theta_bar_prev), initial=0.0), np.max(np.abs(theta_bar), initial=0.0)))
    if err > tol * scale:
        raise InvariantError(f"aggregate drift identity violated by {err:.3e}")
    return err
