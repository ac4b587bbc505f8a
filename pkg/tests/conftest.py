from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from selfgnn.graph import Graph, graph_from_edges, write_graph_bundle

ROOT = Path(__file__).resolve().parents[1]
CORA = ROOT / "data" / "cora"


def random_graph(n: int, p: float, seed: int, f: int = 6, classes: int = 3,
                 connected: bool = False) -> Graph:
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    if connected:
        # a random spanning path guarantees one component
        order = rng.permutation(n)
        edges = np.vstack([edges, np.stack([order[:-1], order[1:]], axis=1)])
    x = rng.normal(size=(n, f))
    labels = rng.integers(classes, size=n)
    return graph_from_edges(n, edges, x, labels)


def two_cliques(size: int = 50) -> Graph:
    edges = [(i, j) for i in range(size) for j in range(i + 1, size)]
    edges += [(i + size, j + size) for i, j in edges]
    return graph_from_edges(2 * size, np.array(edges), np.eye(2 * size)[:, :8])


def planted_graph(n: int = 120, classes: int = 3, f: int = 20, seed: int = 0,
                  p_in: float = 0.15, p_out: float = 0.01) -> Graph:
    """Stochastic block model with class-dependent features and a split."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, 1)
    edges = np.argwhere(upper)
    centers = rng.normal(scale=2.0, size=(classes, f))
    x = (centers[labels] + rng.normal(size=(n, f)) > 1.0).astype(float)
    split = np.array(["train", "val", "test", "test"] * (n // 4 + 1))[:n]
    return graph_from_edges(n, edges, x, labels, split)


@pytest.fixture
def small_graph() -> Graph:
    return random_graph(30, 0.15, 0, connected=True)


@pytest.fixture
def planted() -> Graph:
    return planted_graph()


@pytest.fixture
def planted_bundle(tmp_path) -> Path:
    d = tmp_path / "planted"
    write_graph_bundle(planted_graph(), d)
    return d


@pytest.fixture(scope="session")
def cora_path() -> Path:
    if not (CORA / "meta.tsv").exists():
        pytest.skip("Cora bundle not generated (run scripts/make_cora_bundle.py)")
    return CORA
