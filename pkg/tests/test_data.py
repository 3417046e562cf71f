import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.data import (
    HeterogeneityConfig,
    Partition,
    dirichlet_partition,
    iid_partition,
    largest_remainder,
    lognormal_sizes,
    make_quadratic_federation,
    make_synthetic_classification,
    partition_dataset,
    validation_count,
)
from fedsim.models import ModelSpec, QuadraticProblem, evaluate, loss_and_grad
from fedsim.data import quadratic_optimum


def class_histograms(part, labels, n_classes):
    return np.array([np.bincount(labels[list(idx)], minlength=n_classes) for idx in part.indices])


def test_dirichlet_huge_alpha_is_uniform():
    labels = np.arange(1000) % 10
    part = dirichlet_partition(labels, 10, 1e6, 0, validation_fraction=0.0)
    hist = class_histograms(part, labels, 10)
    assert np.max(np.abs(hist - 10)) <= 2


def test_dirichlet_small_alpha_is_skewed():
    # Monte Carlo over 50 seeds; the smallest observed median share was 0.852
    labels = np.arange(5000) % 10
    medians = []
    for seed in range(50):
        part = dirichlet_partition(labels, 100, 0.03, seed)
        hist = class_histograms(part, labels, 10)
        share = hist.max(axis=1) / np.maximum(hist.sum(axis=1), 1)
        medians.append(np.median(share))
    assert min(medians) > 0.8


def test_dirichlet_deterministic_and_exhaustive():
    labels = np.random.default_rng(0).integers(0, 7, size=800)
    a = dirichlet_partition(labels, 30, 0.3, 5)
    b = dirichlet_partition(labels, 30, 0.3, 5)
    assert a == b
    assert sorted(i for idx in a.indices for i in idx) == list(range(800))
    assert all(len(idx) > 0 for idx in a.indices)


def test_dirichlet_errors():
    with pytest.raises(ValueError, match="clients"):
        dirichlet_partition(np.zeros(3, dtype=int), 5, 0.3, 0)
    with pytest.raises(ValueError):
        dirichlet_partition(np.zeros(30, dtype=int), 5, 0.0, 0)
    with pytest.raises(ValueError):
        iid_partition(3, 5, 0)


def test_lognormal_examples():
    assert lognormal_sizes(10, 0.0, 100, 0) == [10] * 10
    assert lognormal_sizes(3, 0.0, 11, 0) == [4, 4, 3]


def test_lognormal_dispersion():
    # Monte Carlo over 50 seeds gave coefficients of variation in [0.228, 0.338]
    for seed in range(50):
        sizes = np.array(lognormal_sizes(100, 0.3, 10000, seed))
        cv = sizes.std() / sizes.mean()
        assert 0.2 <= cv <= 0.45


@given(st.integers(1, 50), st.floats(0, 2), st.integers(0, 500), st.integers(0, 2**31))
@settings(max_examples=100)
def test_lognormal_conserves_total(n, sigma, extra, seed):
    sizes = lognormal_sizes(n, sigma, n + extra, seed)
    assert sum(sizes) == n + extra
    assert min(sizes) >= 1


@given(st.integers(0, 1000), st.lists(st.floats(0, 10), min_size=1, max_size=20))
def test_largest_remainder_sums(total, weights):
    if sum(weights) <= 0:
        return
    out = largest_remainder(total, weights)
    assert out.sum() == total
    quota = total * np.asarray(weights) / sum(weights)
    assert np.all(np.abs(out - quota) < 1.0 + 1e-9)


def test_validation_split_is_ninety_ten():
    assert validation_count(100) == 10
    assert validation_count(19) == 1
    assert validation_count(9) == 0
    part = iid_partition(1000, 100, 0)
    assert part.clients("validation") == list(range(90, 100))
    assert len(part.clients("train")) == 90


def test_partition_invariants_enforced():
    with pytest.raises(ValueError, match="shares"):
        Partition(((0, 1), (1, 2)), ("train", "train"))
    with pytest.raises(ValueError, match="no examples"):
        Partition(((0,), ()), ("train", "train"))
    Partition(((0,), ()), ("train", "validation"))


def test_manifest_round_trip(tmp_path):
    labels = np.arange(300) % 4
    part = partition_dataset(labels, 12, HeterogeneityConfig("dirichlet", 0.5, "lognormal", 0.3), 9)
    path = tmp_path / "manifest.txt"
    part.save(path)
    assert Partition.from_manifest(path.read_text()) == part


def test_partition_dataset_is_seeded():
    labels = np.arange(500) % 5
    het = HeterogeneityConfig("iid", balance="lognormal")
    assert partition_dataset(labels, 20, het, 1) == partition_dataset(labels, 20, het, 1)
    assert partition_dataset(labels, 20, het, 1) != partition_dataset(labels, 20, het, 2)


def test_heterogeneity_config_validation():
    with pytest.raises(ValueError):
        HeterogeneityConfig("dirichlet", alpha=-1.0)
    with pytest.raises(ValueError):
        HeterogeneityConfig(sigma=-0.1)


def test_quadratic_federation_examples():
    problems, opt = make_quadratic_federation(1, 4, 1.0, (0.5, 2.0), 0)
    np.testing.assert_allclose(opt, problems[0].center, atol=1e-12)

    c1, c2 = np.array([1.0, -2.0]), np.array([3.0, 4.0])
    opt = quadratic_optimum([QuadraticProblem(np.eye(2), c1), QuadraticProblem(np.eye(2), c2)])
    np.testing.assert_allclose(opt, (c1 + c2) / 2, atol=1e-15)

    problems, opt = make_quadratic_federation(5, 6, 2.0, (0.5, 2.0), 3)
    resid = sum(p.curvature @ (opt - p.center) for p in problems)
    assert np.linalg.norm(resid) < 1e-10
    for p in problems:
        eig = np.linalg.eigvalsh(p.curvature)
        assert eig.min() >= 0.5 - 1e-12 and eig.max() <= 2.0 + 1e-12


def test_quadratic_federation_rejects_bad_range():
    with pytest.raises(ValueError):
        make_quadratic_federation(2, 2, 1.0, (0.0, 1.0), 0)


def test_synthetic_classification_deterministic():
    a = make_synthetic_classification(4, 6, 100, 3.0, 8)
    b = make_synthetic_classification(4, 6, 100, 3.0, 8)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [25] * 4


def test_zero_separation_is_chance():
    data = make_synthetic_classification(5, 10, 5000, 0.0, 0)
    spec = ModelSpec("softmax", input_dim=10, n_classes=5)
    params = _train_softmax(spec, data, steps=100)
    held_out = make_synthetic_classification(5, 10, 5000, 0.0, 1)
    assert abs(evaluate(spec, params, held_out)[1] - 0.2) < 0.03


def test_large_separation_is_linearly_separable():
    data = make_synthetic_classification(10, 20, 2000, 12.0, 0)
    spec = ModelSpec("softmax", input_dim=20, n_classes=10)
    params = _train_softmax(spec, data, steps=300)
    assert evaluate(spec, params, data)[1] > 0.99


def _train_softmax(spec, data, steps, lr=0.5):
    params = np.zeros(spec.dim)
    for _ in range(steps):
        _, g = loss_and_grad(spec, params, data)
        params = params - lr * g
    return params
