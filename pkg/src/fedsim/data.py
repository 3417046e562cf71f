"""Synthetic tasks and federated partitioning.

Label skew follows a per-client Dirichlet draw over classes; sample counts
are either equal or log-normal. All randomness comes from one integer seed
per call so a partition can be regenerated exactly from its manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import ParamVector
from .models import Dataset, QuadraticProblem

VALIDATION_FRACTION = 0.1
DEFAULT_LOGNORMAL_SIGMA = 0.3


@dataclass(frozen=True)
class HeterogeneityConfig:
    mode: str = "iid"  # "iid" or "dirichlet"
    alpha: float = 0.3
    balance: str = "balanced"  # "balanced" or "lognormal"
    sigma: float = DEFAULT_LOGNORMAL_SIGMA

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown heterogeneity mode {self.mode!r}")
        if self.balance not in ("balanced", "lognormal"):
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class Partition:
    """Per-client example indices plus a train/validation role per client."""

    indices: tuple[tuple[int, ...], ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.roles):
            raise ValueError("one role per client is required")
        seen: set[int] = set()
        for cid, idx in enumerate(self.indices):
            if self.roles[cid] not in ("train", "validation"):
                raise ValueError(f"bad role {self.roles[cid]!r}")
            if self.roles[cid] == "train" and not idx:
                raise ValueError(f"train client {cid} has no examples")
            overlap = seen.intersection(idx)
            if overlap or len(set(idx)) != len(idx):
                raise ValueError(f"client {cid} shares example indices")
            seen.update(idx)

    @property
    def n_clients(self) -> int:
        return len(self.indices)

    def clients(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    def sizes(self) -> list[int]:
        return [len(idx) for idx in self.indices]

    def to_manifest(self) -> str:
        """One line per client: ``<id> <role> <i1> <i2> ...``."""
        lines = ["# client role indices"]
        for cid, (idx, role) in enumerate(zip(self.indices, self.roles)):
            lines.append(" ".join([str(cid), role, *map(str, idx)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "Partition":
        rows = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            rows[int(parts[0])] = (parts[1], tuple(int(p) for p in parts[2:]))
        if sorted(rows) != list(range(len(rows))):
            raise ValueError("manifest client ids must be 0..n-1")
        return cls(
            indices=tuple(rows[i][1] for i in range(len(rows))),
            roles=tuple(rows[i][0] for i in range(len(rows))),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_manifest())


def largest_remainder(total: int, weights) -> np.ndarray:
    """Apportion ``total`` integer units proportionally to ``weights``.

    Ties in the fractional part go to the lower index, so the result is a
    deterministic function of its inputs and always sums to ``total``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or np.any(w < 0):
        raise ValueError("total and weights must be non-negative")
    if total == 0:
        return np.zeros(w.size, dtype=np.int64)
    s = w.sum()
    if s <= 0:
        raise ValueError("at least one weight must be positive")
    quota = total * w / s
    base = np.floor(quota).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        frac = quota - base
        # stable sort on -frac keeps lower indices first among ties
        order = np.argsort(-frac, kind="stable")
        base[order[:left]] += 1
    return base


def validation_count(n_clients: int, fraction: float = VALIDATION_FRACTION) -> int:
    return int(np.floor(n_clients * fraction))


def _roles(n_clients: int, validation_fraction: float) -> tuple[str, ...]:
    n_val = validation_count(n_clients, validation_fraction)
    return tuple(["train"] * (n_clients - n_val) + ["validation"] * n_val)


def lognormal_sizes(n_clients: int, sigma: float, total: int, rng_seed: int) -> list[int]:
    """Positive client sizes summing to ``total``.

    Relative sizes are drawn as ``exp(N(0, sigma^2))``; each client is given
    one example up front and the rest is apportioned by largest remainder.
    ``sigma == 0`` gives an equal split with the remainder on the first
    clients.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if total < n_clients:
        raise ValueError("total must be at least the number of clients")
    rng = np.random.default_rng(rng_seed)
    weights = np.exp(sigma * rng.standard_normal(n_clients)) if sigma > 0 else np.ones(n_clients)
    sizes = 1 + largest_remainder(total - n_clients, weights)
    return [int(s) for s in sizes]


def iid_partition(
    n_examples: int,
    n_clients: int,
    rng_seed: int,
    sizes: list[int] | None = None,
    validation_fraction: float = VALIDATION_FRACTION,
) -> Partition:
    if n_clients > n_examples:
        raise ValueError(f"{n_clients} clients but only {n_examples} examples")
    rng = np.random.default_rng(rng_seed)
    if sizes is None:
        sizes = lognormal_sizes(n_clients, 0.0, n_examples, 0)
    if sum(sizes) > n_examples:
        raise ValueError("requested client sizes exceed the number of examples")
    order = rng.permutation(n_examples)
    bounds = np.cumsum([0, *sizes])
    indices = tuple(tuple(int(i) for i in sorted(order[a:b])) for a, b in zip(bounds[:-1], bounds[1:]))
    return Partition(indices, _roles(n_clients, validation_fraction))


def dirichlet_partition(
    labels,
    n_clients: int,
    alpha: float,
    rng_seed: int,
    sizes: list[int] | None = None,
    validation_fraction: float = VALIDATION_FRACTION,
) -> Partition:
    """Label-skewed partition.

    Each client draws class proportions ``p_i ~ Dir(alpha * 1)``. Its demand
    for class ``c`` is ``size_i * p_ic``; the supply of class ``c`` is then
    split across clients in proportion to that demand by largest-remainder
    apportionment, which exhausts every class exactly. Clients left empty by
    rounding receive one example from the largest holder of the class they
    want most.
    """
    y = np.asarray(labels, dtype=np.int64)
    n = y.size
    if n_clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_clients > n:
        raise ValueError(f"{n_clients} clients but only {n} examples")
    rng = np.random.default_rng(rng_seed)
    classes = np.unique(y)
    if sizes is None:
        sizes = lognormal_sizes(n_clients, 0.0, n, 0)
    props = rng.dirichlet(np.full(classes.size, float(alpha)), size=n_clients)
    demand = np.asarray(sizes, dtype=np.float64)[:, None] * props

    counts = np.zeros((n_clients, classes.size), dtype=np.int64)
    pools = []
    for k, c in enumerate(classes):
        pool = rng.permutation(np.flatnonzero(y == c))
        pools.append(pool)
        weights = demand[:, k]
        if weights.sum() <= 0:
            weights = np.ones(n_clients)
        counts[:, k] = largest_remainder(pool.size, weights)

    for cid in range(n_clients):
        if counts[cid].sum() > 0:
            continue
        for k in np.argsort(-props[cid], kind="stable"):
            donor = int(np.argmax(counts[:, k]))
            if counts[donor, k] > 0 and counts[donor].sum() > 1:
                counts[donor, k] -= 1
                counts[cid, k] += 1
                break

    per_client: list[list[int]] = [[] for _ in range(n_clients)]
    for k, pool in enumerate(pools):
        bounds = np.cumsum([0, *counts[:, k]])
        for cid in range(n_clients):
            per_client[cid].extend(int(i) for i in pool[bounds[cid]:bounds[cid + 1]])
    indices = tuple(tuple(sorted(idx)) for idx in per_client)
    return Partition(indices, _roles(n_clients, validation_fraction))


def partition_dataset(
    labels,
    n_clients: int,
    het: HeterogeneityConfig,
    rng_seed: int,
    validation_fraction: float = VALIDATION_FRACTION,
) -> Partition:
    """Apply a :class:`HeterogeneityConfig` to a label vector."""
    y = np.asarray(labels)
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    size_seed = int(seeds[0].generate_state(1)[0])
    assign_seed = int(seeds[1].generate_state(1)[0])
    sigma = het.sigma if het.balance == "lognormal" else 0.0
    sizes = lognormal_sizes(n_clients, sigma, y.size, size_seed)
    if het.mode == "iid":
        return iid_partition(y.size, n_clients, assign_seed, sizes, validation_fraction)
    return dirichlet_partition(y, n_clients, het.alpha, assign_seed, sizes, validation_fraction)


# synthetic tasks ----------------------------------------------------------


def random_spd(dim: int, low: float, high: float, rng: np.random.Generator) -> np.ndarray:
    """Random rotation of a diagonal with eigenvalues in ``[low, high]``."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eig = rng.uniform(low, high, size=dim)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def quadratic_optimum(problems: list[QuadraticProblem]) -> ParamVector:
    """Minimiser of the summed objective: solves ``sum_i A_i (x - c_i) = 0``."""
    a_sum = sum(p.curvature for p in problems)
    b_sum = sum(p.curvature @ p.center for p in problems)
    try:
        return np.linalg.solve(a_sum, b_sum)
    except np.linalg.LinAlgError as exc:
        raise ValueError("accumulated curvature is singular") from exc


def make_quadratic_federation(
    n_clients: int,
    dim: int,
    spread: float,
    curvature_range: tuple[float, float],
    rng_seed: int,
) -> tuple[list[QuadraticProblem], ParamVector]:
    """Clients with distinct SPD curvatures and centers ``c_i ~ N(0, spread^2 I)``.

    Returns the problems and the exact minimiser of their sum.
    """
    low, high = curvature_range
    if not 0 < low <= high < np.inf:
        raise ValueError("curvature_range must satisfy 0 < low <= high < inf")
    if n_clients < 1 or dim < 1:
        raise ValueError("need at least one client and one dimension")
    rng = np.random.default_rng(rng_seed)
    problems = []
    for _ in range(n_clients):
        a = random_spd(dim, low, high, rng)
        c = spread * rng.standard_normal(dim)
        problems.append(QuadraticProblem(a, c))
    return problems, quadratic_optimum(problems)


def class_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centers whose pairwise distance is ``separation``.

    With ``dim >= n_classes`` the centers are a scaled, randomly rotated
    simplex; otherwise they are random unit directions scaled the same way
    (pairwise distances are then only approximately equal).
    """
    if dim >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
        base = q.T
    else:
        base = rng.standard_normal((n_classes, dim))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
    return base * (separation / np.sqrt(2.0))


def make_synthetic_classification(
    n_classes: int,
    dim: int,
    n_examples: int,
    class_separation: float,
    rng_seed: int,
) -> Dataset:
    """Balanced Gaussian clusters with unit noise around separated means."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_examples < 1:
        raise ValueError("need at least one example")
    rng = np.random.default_rng(rng_seed)
    means = class_means(n_classes, dim, class_separation, rng)
    labels = rng.permutation(np.arange(n_examples) % n_classes)
    features = means[labels] + rng.standard_normal((n_examples, dim))
    return Dataset(features, labels.astype(np.int64))
