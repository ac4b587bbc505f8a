import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfgnn.evaluation import (
    LogisticProbe,
    ProbeConfig,
    ProbeError,
    collapse_metrics,
    effective_rank,
    kfold_accuracy,
    logistic_probe,
    split_accuracy,
    stratified_folds,
    stratified_split,
)
from selfgnn.graph import SPLIT_CODES


def _blobs(n=100, gap=8.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 3)) + gap * y[:, None]
    return x, y


def test_split_exact_counts():
    labels = np.repeat([0, 1], 50)
    s = stratified_split(labels, seed=0)
    for c in (0, 1):
        part = s[labels == c]
        counts = [np.sum(part == SPLIT_CODES[t]) for t in ("train", "val", "test")]
        assert counts == [35, 5, 10]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(3, 40), min_size=1, max_size=5), st.integers(0, 10))
def test_split_rounding_and_cover(sizes, seed):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    s = stratified_split(labels, seed=seed)
    assert np.all(s != SPLIT_CODES["none"])
    for c, size in enumerate(sizes):
        n_train = np.sum(s[labels == c] == SPLIT_CODES["train"])
        assert abs(n_train - 0.7 * size) <= 1
    assert np.array_equal(s, stratified_split(labels, seed=seed))


def test_split_skips_unlabeled_and_rejects_small_classes():
    labels = np.array([0, 0, 0, 1, 1, 1, -1])
    assert stratified_split(labels)[-1] == SPLIT_CODES["none"]
    with pytest.raises(ProbeError):
        stratified_split(np.array([0, 0, 0, 1, 1]))
    with pytest.raises(ValueError):
        stratified_split(labels, ratios=(0.5, 0.5, 0.5))


def test_probe_separable():
    x, y = _blobs()
    probe = LogisticProbe().fit(x, y)
    assert np.mean(probe.predict(x) == y) == 1.0
    xt, yt = _blobs(seed=1)
    assert logistic_probe(x, y, xt, yt) == 1.0


def test_probe_train_accuracy_at_least_test():
    x, y = _blobs(gap=4.0)
    xt, yt = _blobs(gap=4.0, seed=1)
    assert logistic_probe(x, y, x, y) >= logistic_probe(x, y, xt, yt)


def test_probe_permutation_null():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 5))
    y = rng.permutation(np.arange(1000) % 2)
    acc = logistic_probe(x[:500], y[:500], x[500:], y[500:])
    assert 0.4 <= acc <= 0.6


def test_probe_objective_is_init_independent():
    x, y = _blobs(gap=1.0)
    xt, yt = _blobs(gap=1.0, seed=2)
    cfg = ProbeConfig(max_iter=3000, tol=1e-12)
    a = logistic_probe(x, y, xt, yt, cfg, init_scale=0.5, init_seed=1)
    b = logistic_probe(x, y, xt, yt, cfg, init_scale=0.5, init_seed=2)
    assert abs(a - b) <= 1e-4


def test_probe_loss_decreases_and_ties_go_low():
    x, y = _blobs(gap=1.0)
    p = LogisticProbe().fit(x, y)
    assert p.loss_history[-1] < p.loss_history[0]
    p.weight = np.zeros_like(p.weight)
    p.bias = np.zeros_like(p.bias)
    assert not p.predict(x).any()


def test_probe_errors():
    with pytest.raises(ProbeError):
        logistic_probe(np.ones((4, 2)), np.zeros(4, int), np.ones((2, 2)), np.zeros(2, int))
    with pytest.raises(ValueError):
        logistic_probe(np.ones((4, 2)), np.array([0, 1, 0, 1]), np.ones((2, 3)), np.zeros(2, int))
    with pytest.raises(ValueError):
        ProbeConfig(l2=-1)
    with pytest.raises(ValueError):
        ProbeConfig(folds=1)


def test_folds_partition():
    labels = np.arange(10) % 2
    fold = stratified_folds(labels, 2)
    assert sorted(np.bincount(fold)) == [5, 5]
    with pytest.raises(ProbeError):
        stratified_folds(np.array([0, 0, 1]), 2)


def test_kfold_separable_has_zero_std():
    x, y = _blobs()
    mean, std, accs = kfold_accuracy(x, y)
    assert mean == 1.0 and std == 0.0 and len(accs) == 5


def test_kfold_mean_is_pooled_accuracy_for_equal_folds():
    x, y = _blobs(gap=1.0)
    cfg = ProbeConfig()
    mean, _, accs = kfold_accuracy(x, y, cfg)
    fold = stratified_folds(y, cfg.folds, cfg.seed)
    correct = 0
    for f in range(cfg.folds):
        te = fold == f
        correct += round(accs[f] * te.sum())
    assert mean == pytest.approx(correct / len(y))


def test_split_accuracy_uses_tags():
    x, y = _blobs()
    split = np.array(([SPLIT_CODES["train"]] * 2 + [SPLIT_CODES["test"]] * 2) * 25, dtype=np.int8)
    assert split_accuracy(x, y, split) == 1.0
    with pytest.raises(ProbeError):
        split_accuracy(x, y, split, "train", "val")


def test_collapse_constant_rows():
    m = collapse_metrics(np.ones((10, 4)))
    assert m.mean_std == 0.0 and m.effective_rank == pytest.approx(1.0)
    assert effective_rank(np.zeros((3, 3))) == 1.0


def test_collapse_orthonormal_and_scaling():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(20, 6)))
    assert effective_rank(q.T) == pytest.approx(6.0)
    e = np.random.default_rng(1).normal(size=(30, 5))
    a, b = collapse_metrics(e), collapse_metrics(-3 * e)
    np.testing.assert_allclose(b.per_dim_std, 3 * a.per_dim_std)
    assert b.effective_rank == pytest.approx(a.effective_rank)
    with pytest.raises(ValueError):
        collapse_metrics(np.ones((1, 3)))
