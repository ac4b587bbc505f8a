"""Feature-space augmentations: split, standardize, LDP, paste, permutation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

LDP_WIDTH = 5


@dataclass(frozen=True, eq=False)
class FeatureView:
    matrix: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise ValueError("feature view must be a matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("feature view contains non-finite values")

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


def split(x: np.ndarray) -> tuple[FeatureView, FeatureView]:
    """Column halves; the first view takes the extra column when F is odd."""
    x = np.asarray(x)
    f = x.shape[1]
    if f < 2:
        raise ValueError("split needs at least two feature columns")
    cut = (f + 1) // 2
    return (
        FeatureView(x[:, :cut].copy(), {"aug": "split", "part": 0, "columns": (0, cut)}),
        FeatureView(x[:, cut:].copy(), {"aug": "split", "part": 1, "columns": (cut, f)}),
    )


def standardize(x: np.ndarray) -> FeatureView:
    """Per-feature z-score with population std; constant columns become 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("standardize needs at least one row")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    centered = x - mean
    # exact constancy test: a constant column's float std can be ~1e-16, not 0
    live = (np.ptp(x, axis=0) > 0) & (std > 0)
    out = np.divide(centered, std, out=np.zeros_like(centered), where=live)
    return FeatureView(out, {"aug": "standardize"})


def ldp(g: Graph) -> np.ndarray:
    """Local degree profile: degree and min/max/mean/std of neighbor degrees."""
    adj = g.adjacency
    deg = np.diff(adj.row_ptr).astype(np.float64)
    out = np.zeros((g.num_nodes, LDP_WIDTH))
    out[:, 0] = deg
    nbr_deg = deg[adj.col_idx]
    for i in np.flatnonzero(deg > 0):
        d = nbr_deg[adj.row_ptr[i]:adj.row_ptr[i + 1]]
        out[i, 1:] = d.min(), d.max(), d.mean(), d.std()
    return out


def ldp_padded(g: Graph, width: int) -> FeatureView:
    if width < LDP_WIDTH:
        raise ValueError(f"LDP view needs width >= {LDP_WIDTH}")
    out = np.zeros((g.num_nodes, width))
    out[:, :LDP_WIDTH] = ldp(g)
    return FeatureView(out, {"aug": "ldp", "width": width})


def paste(x: np.ndarray, g: Graph) -> tuple[FeatureView, FeatureView]:
    """``[X | 0]`` and ``[X | LDP]``, both ``F + 5`` wide."""
    x = np.asarray(x, dtype=np.float64)
    zeros = np.zeros((x.shape[0], LDP_WIDTH))
    return (
        FeatureView(np.hstack([x, zeros]), {"aug": "paste", "part": 0}),
        FeatureView(np.hstack([x, ldp(g)]), {"aug": "paste", "part": 1}),
    )


def random_permutation(num_features: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(num_features)


def permute_features(x: np.ndarray, perm=None, seed: int | None = None) -> np.ndarray:
    """Reorder columns so that output column ``j`` is input column ``perm[j]``.

    ``perm`` may be omitted when ``seed`` is given.
    """
    x = np.asarray(x)
    f = x.shape[1]
    if perm is None:
        if seed is None:
            raise ValueError("give a permutation or a seed")
        perm = random_permutation(f, seed)
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (f,) or not np.array_equal(np.sort(perm), np.arange(f)):
        raise ValueError("perm must be a bijection on the feature columns")
    return x[:, perm]


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv
