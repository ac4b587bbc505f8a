"""Linear-probe node classification and representation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SPLIT_CODES


class ProbeError(ValueError):
    """The requested evaluation is infeasible for the given labels."""


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-4
    max_iter: int = 500
    lr: float = 0.1
    tol: float = 1e-7
    folds: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.l2 < 0:
            raise ValueError("l2 penalty must be >= 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.max_iter < 1 or self.lr <= 0:
            raise ValueError("max_iter and lr must be positive")


def stratified_split(labels, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> np.ndarray:
    """Per-class proportional train/val/test assignment.

    Counts are floored and the first leftover node goes to train, so the
    train count stays within one node of ``ratios[0] * class_size``.
    Unlabeled nodes (label < 0) get ``none``.
    """
    labels = np.asarray(labels)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    rng = np.random.default_rng(seed)
    split = np.full(len(labels), SPLIT_CODES["none"], dtype=np.int8)
    for c in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 3:
            raise ProbeError(f"class {c} has {len(idx)} labeled nodes; need at least 3")
        idx = rng.permutation(idx)
        exact = np.asarray(ratios) * len(idx)
        counts = np.floor(exact + 1e-9).astype(int)
        left = len(idx) - counts.sum()
        if left:
            # first leftover node to train, a second one to the larger val/test remainder
            counts[0] += 1
            if left > 1:
                frac = exact - np.floor(exact + 1e-9)
                counts[1 if frac[1] > frac[2] else 2] += 1
        n_train, n_val, n_test = (int(c) for c in counts)
        split[idx[:n_train]] = SPLIT_CODES["train"]
        split[idx[n_train:n_train + n_val]] = SPLIT_CODES["val"]
        split[idx[n_train + n_val:]] = SPLIT_CODES["test"]
    return split


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return lambda z: (z - mean) / std


def _softmax(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


class LogisticProbe:
    """Multinomial logistic regression fitted by full-batch gradient descent."""

    def __init__(self, cfg: ProbeConfig = ProbeConfig()):
        self.cfg = cfg
        self.weight: np.ndarray | None = None
        self.bias: np.ndarray | None = None
        self.loss_history: list[float] = []

    def _objective(self, x, onehot, w, b):
        p = _softmax(x @ w + b)
        n = x.shape[0]
        loss = -np.sum(onehot * np.log(np.maximum(p, 1e-300))) / n + 0.5 * self.cfg.l2 * np.sum(w * w)
        return loss, p

    def fit(self, x: np.ndarray, y: np.ndarray, num_classes: int | None = None,
            init_scale: float = 0.0, init_seed: int | None = None) -> "LogisticProbe":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise ProbeError("probe needs at least two classes in the training set")
        k = int(num_classes if num_classes is not None else y.max() + 1)
        n, d = x.shape
        onehot = np.zeros((n, k))
        onehot[np.arange(n), y] = 1.0
        rng = np.random.default_rng(self.cfg.seed if init_seed is None else init_seed)
        w = rng.normal(scale=init_scale, size=(d, k)) if init_scale else np.zeros((d, k))
        b = np.zeros(k)
        prev, p = self._objective(x, onehot, w, b)
        self.loss_history = [prev]
        for _ in range(self.cfg.max_iter):
            err = (p - onehot) / n
            w = w - self.cfg.lr * (x.T @ err + self.cfg.l2 * w)
            b = b - self.cfg.lr * err.sum(axis=0)
            loss, p = self._objective(x, onehot, w, b)
            self.loss_history.append(loss)
            if abs(prev - loss) < self.cfg.tol:
                break
            prev = loss
        self.weight, self.bias = w, b
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax picks the lowest class id on ties
        return np.argmax(np.asarray(x, dtype=np.float64) @ self.weight + self.bias, axis=1)


def logistic_probe(train_emb, train_labels, test_emb, test_labels,
                   cfg: ProbeConfig = ProbeConfig(), num_classes: int | None = None,
                   init_scale: float = 0.0, init_seed: int | None = None) -> float:
    """Test accuracy of a probe fitted on standardized training embeddings."""
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    if train_emb.shape[1] != test_emb.shape[1]:
        raise ValueError("train and test embeddings differ in width")
    if len(train_emb) != len(train_labels) or len(test_emb) != len(test_labels):
        raise ValueError("embedding and label counts differ")
    scale = _standardizer(train_emb)
    if num_classes is None:
        num_classes = int(max(np.max(train_labels), np.max(test_labels))) + 1
    probe = LogisticProbe(cfg).fit(scale(train_emb), train_labels, num_classes, init_scale, init_seed)
    if len(test_labels) == 0:
        return float("nan")
    return float(np.mean(probe.predict(scale(test_emb)) == np.asarray(test_labels)))


def stratified_folds(labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold id per sample: each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < folds:
            raise ProbeError(f"class {c} has {len(idx)} samples, fewer than {folds} folds")
        fold[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return fold


def kfold_accuracy(emb, labels, cfg: ProbeConfig = ProbeConfig()) -> tuple[float, float, list[float]]:
    """Stratified k-fold probe accuracy: (mean, population std, per-fold)."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    fold = stratified_folds(labels, cfg.folds, cfg.seed)
    k = int(labels.max()) + 1
    accs = []
    for f in range(cfg.folds):
        test = fold == f
        accs.append(logistic_probe(emb[~test], labels[~test], emb[test], labels[test], cfg, k))
    return float(np.mean(accs)), float(np.std(accs)), accs


def split_accuracy(emb, labels, split, train_tag: str = "train", test_tag: str = "test",
                   cfg: ProbeConfig = ProbeConfig(), num_classes: int | None = None) -> float:
    """Protocol A: probe on one split tag, score on another."""
    emb = np.asarray(emb)
    labels = np.asarray(labels)
    tr = (split == SPLIT_CODES[train_tag]) & (labels >= 0)
    te = (split == SPLIT_CODES[test_tag]) & (labels >= 0)
    if not tr.any() or not te.any():
        raise ProbeError(f"split has no labeled {train_tag!r} or {test_tag!r} nodes")
    return logistic_probe(emb[tr], labels[tr], emb[te], labels[te], cfg, num_classes)


@dataclass(frozen=True)
class CollapseMetrics:
    per_dim_std: np.ndarray
    mean_std: float
    effective_rank: float


def effective_rank(emb: np.ndarray) -> float:
    """``exp`` of the entropy of the normalized singular values."""
    s = np.linalg.svd(np.asarray(emb, dtype=np.float64), compute_uv=False)
    total = s.sum()
    if total <= 0:
        return 1.0
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def collapse_metrics(emb) -> CollapseMetrics:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] < 2:
        raise ValueError("collapse metrics need at least two rows")
    std = emb.std(axis=0)
    return CollapseMetrics(std, float(std.mean()), effective_rank(emb))
