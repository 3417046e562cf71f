"""Local empirical risks with exact gradients.

Three model families are supported:

* ``quadratic``: ``0.5 (theta - c)^T A (theta - c)`` for a client-specific
  SPD curvature ``A`` and center ``c``. Used as a convex testbed where the
  global optimum is known in closed form.
* ``softmax``: multinomial logistic regression, weights stored row-major
  as ``(input_dim, n_classes)`` followed by the bias.
* ``mlp``: fully connected tanh network ending in a softmax layer.

Every loss includes the ``weight_decay / 2 * ||theta||^2`` term so the
finite-difference oracle covers it too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .linalg import DimensionError, ParamVector

MODEL_KINDS = ("quadratic", "softmax", "mlp")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        y = np.asarray(self.labels)
        if y.shape[0] != x.shape[0]:
            raise ValueError("one label per feature row is required")
        if x.shape[0] < 1:
            raise ValueError("a dataset needs at least one example")
        if np.issubdtype(y.dtype, np.integer) and y.min() < 0:
            raise ValueError("class labels must be non-negative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index])


@dataclass(frozen=True)
class QuadraticProblem:
    """One client's ``0.5 (theta - c)^T A (theta - c)`` objective."""

    curvature: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.curvature, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if a.shape != (c.size, c.size):
            raise DimensionError("curvature must be square and match the center")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12):
            raise ValueError("curvature must be symmetric")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("curvature must be positive definite")
        object.__setattr__(self, "curvature", a)
        object.__setattr__(self, "center", c)

    @property
    def n(self) -> int:
        # a quadratic client behaves like a single full-batch example
        return 1

    @property
    def dim(self) -> int:
        return int(self.center.size)


Batch = Union[Dataset, QuadraticProblem]


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int = 0
    n_classes: int = 0
    hidden: tuple[int, ...] = field(default_factory=tuple)
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind != "quadratic" and self.n_classes < 2:
            raise ValueError("classification models need at least two classes")
        if self.kind == "mlp" and (not self.hidden or min(self.hidden) < 1):
            raise ValueError("mlp needs at least one positive hidden width")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_sizes(self) -> list[int]:
        if self.kind == "quadratic":
            return [self.input_dim]
        if self.kind == "softmax":
            return [self.input_dim, self.n_classes]
        return [self.input_dim, *self.hidden, self.n_classes]

    @property
    def dim(self) -> int:
        if self.kind == "quadratic":
            return self.input_dim
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"


def quadratic_spec(dim: int, weight_decay: float = 0.0) -> ModelSpec:
    return ModelSpec("quadratic", input_dim=dim, weight_decay=weight_decay)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Small random starting point.

    Dense layers use ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and
    biases; quadratics start from ``N(0, 0.01^2)``.
    """
    if spec.kind == "quadratic":
        return 0.01 * rng.standard_normal(spec.dim)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def _unpack_layers(spec: ModelSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sums)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -float(log_probs[rows, labels].mean())
    dlogits = exp / sums
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def _check_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.ndim != 1 or params.shape[0] != spec.dim:
        raise DimensionError(f"expected {spec.dim} parameters, got {params.shape}")


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if spec.kind == "quadratic":
        if not isinstance(batch, QuadraticProblem):
            raise TypeError("quadratic models take a QuadraticProblem as their batch")
        if batch.dim != spec.dim:
            raise DimensionError("quadratic problem dimension does not match the model")
        return
    if not isinstance(batch, Dataset):
        raise TypeError("classification models take a Dataset as their batch")
    if batch.dim != spec.input_dim:
        raise DimensionError(f"features have {batch.dim} columns, model expects {spec.input_dim}")


def _data_loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, np.ndarray]:
    if spec.kind == "quadratic":
        diff = params - batch.center
        grad = batch.curvature @ diff
        return 0.5 * float(diff @ grad), grad

    labels = batch.labels.astype(np.int64, copy=False)
    if labels.max() >= spec.n_classes:
        raise ValueError("label index exceeds the model's class count")
    layers = _unpack_layers(spec, params)
    # forward, keeping every activation for the backward pass
    acts = [batch.features]
    for w, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ w + b))
    w_out, b_out = layers[-1]
    loss, delta = _softmax_xent(acts[-1] @ w_out + b_out, labels)

    grads: list[np.ndarray] = []
    for depth in range(len(layers) - 1, -1, -1):
        w, _ = layers[depth]
        a_in = acts[depth]
        grads.append(delta.sum(axis=0))
        grads.append((a_in.T @ delta).reshape(-1))
        if depth > 0:
            delta = (delta @ w.T) * (1.0 - a_in * a_in)
    grads.reverse()
    return loss, np.concatenate(grads)


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Loss (with weight decay) and its exact gradient on ``batch``."""
    _check_params(spec, params)
    _check_batch(spec, batch)
    loss, grad = _data_loss_and_grad(spec, params, batch)
    if spec.weight_decay:
        loss += 0.5 * spec.weight_decay * float(params @ params)
        grad = grad + spec.weight_decay * params
    return loss, grad


def loss_only(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    return loss_and_grad(spec, params, batch)[0]


def finite_diff_grad(spec: ModelSpec, params: ParamVector, batch: Batch, eps: float = 1e-6) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(params, dtype=np.float64, copy=True)
    out = np.empty_like(base)
    for k in range(base.size):
        orig = base[k]
        base[k] = orig + eps
        plus = loss_only(spec, base, batch)
        base[k] = orig - eps
        minus = loss_only(spec, base, batch)
        base[k] = orig
        out[k] = (plus - minus) / (2.0 * eps)
    return out


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    layers = _unpack_layers(spec, params)
    a = np.asarray(features, dtype=np.float64)
    for w, b in layers[:-1]:
        a = np.tanh(a @ w + b)
    w_out, b_out = layers[-1]
    return np.argmax(a @ w_out + b_out, axis=1)


def evaluate(spec: ModelSpec, params: ParamVector, dataset) -> tuple[float, float]:
    """Mean loss and top-1 accuracy.

    ``dataset`` may be a :class:`Dataset`, a single quadratic problem, or a
    list of quadratic problems (the loss is then averaged over them).
    Quadratic objectives report an accuracy of 0.
    """
    _check_params(spec, params)
    if spec.kind == "quadratic":
        problems = [dataset] if isinstance(dataset, QuadraticProblem) else list(dataset)
        if not problems:
            raise ValueError("cannot evaluate on an empty set of problems")
        # a diverging model may still be finite while its loss overflows; report inf
        with np.errstate(over="ignore"):
            losses = [loss_only(spec, params, p) for p in problems]
        return float(np.mean(losses)), 0.0
    if not isinstance(dataset, Dataset):
        raise TypeError("classification models evaluate on a Dataset")
    loss = loss_only(spec, params, dataset)
    acc = float(np.mean(predict(spec, params, dataset.features) == dataset.labels))
    return loss, acc


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_examples / batch_size))


def epoch_batches(n_examples: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches for one epoch.

    A short final batch is filled up to ``batch_size`` by bootstrap
    resampling from the whole local set.
    """
    order = rng.permutation(n_examples)
    batches = [order[i:i + batch_size] for i in range(0, n_examples, batch_size)]
    short = batch_size - batches[-1].size
    if short > 0:
        batches[-1] = np.concatenate([batches[-1], rng.integers(0, n_examples, size=short)])
    return batches


# delimited text loader ------------------------------------------------


def load_dataset(path: str | Path) -> Dataset:
    """Read ``label f1 f2 ...`` rows (whitespace or comma separated).

    Blank lines and lines starting with ``#`` are skipped. Integer-looking
    labels become class indices; anything else is kept as a real target.
    """
    labels: list[str] = []
    rows: list[list[float]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected a label and at least one feature")
        labels.append(parts[0])
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no examples found")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: rows have inconsistent feature counts")
    try:
        y = np.array([int(v) for v in labels], dtype=np.int64)
    except ValueError:
        y = np.array([float(v) for v in labels], dtype=np.float64)
    return Dataset(np.array(rows, dtype=np.float64), y)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    lines = []
    for label, row in zip(dataset.labels, dataset.features):
        lines.append(" ".join([str(label)] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")
