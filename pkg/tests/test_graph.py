import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from selfgnn.graph import (
    GraphFormatError,
    SparseMatrix,
    adjacency_from_edges,
    degree_vector,
    graph_from_edges,
    load_graph_bundle,
    read_matrix_tsv,
    spmm,
    symmetric_renormalize,
    write_graph_bundle,
    write_matrix_tsv,
)

from conftest import random_graph


def test_edges_are_symmetrized_deduped_and_loop_free():
    a = adjacency_from_edges(4, np.array([[0, 1], [1, 0], [0, 1], [2, 2], [3, 2]]))
    dense = a.to_dense()
    assert np.array_equal(dense, dense.T)
    assert np.all(np.diag(dense) == 0)
    assert a.nnz == 4 and set(np.unique(a.values)) == {1.0}


def test_out_of_range_edge_rejected():
    with pytest.raises(GraphFormatError):
        adjacency_from_edges(3, np.array([[0, 3]]))


def test_path_graph_renormalization():
    # path 0-1-2: degrees of A+I are 2, 3, 2
    a = symmetric_renormalize(graph_from_edges(3, [(0, 1), (1, 2)])).to_dense()
    expect = np.array([
        [1 / 2, 1 / np.sqrt(6), 0],
        [1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6)],
        [0, 1 / np.sqrt(6), 1 / 2],
    ])
    np.testing.assert_allclose(a, expect, rtol=0, atol=1e-15)


def test_isolated_node_gets_unit_self_loop():
    a = symmetric_renormalize(graph_from_edges(3, [(0, 1)])).to_dense()
    assert a[2, 2] == 1.0
    assert a[2, :2].sum() == 0


def test_regular_graph_rows_sum_to_one():
    cycle = graph_from_edges(6, [(i, (i + 1) % 6) for i in range(6)])
    np.testing.assert_allclose(symmetric_renormalize(cycle).row_sums(), 1.0, atol=1e-15)


def test_star_row_sum_exceeds_one():
    # the hub row of D^-1/2 (A+I) D^-1/2 is 1/4 + 3/sqrt(8) > 1
    star = graph_from_edges(4, [(0, 1), (0, 2), (0, 3)])
    assert symmetric_renormalize(star).row_sums()[0] == pytest.approx(0.25 + 3 / np.sqrt(8))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.0, 0.5), st.integers(0, 10_000))
def test_renormalized_operator_properties(n, p, seed):
    g = random_graph(n, p, seed)
    a = symmetric_renormalize(g)
    dense = a.to_dense()
    assert np.array_equal(dense, dense.T)
    assert np.all(dense >= 0) and np.all(np.diag(dense) > 0)
    # similar to the random-walk matrix of A+I, so the spectrum lies in [-1, 1]
    assert np.max(np.abs(np.linalg.eigvalsh(dense))) <= 1 + 1e-12


def test_spmm_matches_dense_and_checks_shapes():
    rng = np.random.default_rng(0)
    m = sp.random(7, 5, density=0.4, random_state=1, format="csr")
    s = SparseMatrix.from_scipy(m)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(spmm(s, x), m.toarray() @ x, atol=1e-14)
    assert spmm(s, x.astype(np.float32)).dtype == np.float32
    with pytest.raises(ValueError):
        spmm(s, rng.normal(size=(4, 3)))


def test_sparse_matrix_validation():
    with pytest.raises(ValueError):
        SparseMatrix(2, 2, np.array([0, 1]), np.array([0]), np.array([1.0]))
    eye = SparseMatrix.identity(3)
    assert np.array_equal(eye.to_dense(), np.eye(3))
    assert eye.is_symmetric()


def test_bundle_roundtrip(tmp_path):
    g = random_graph(25, 0.2, 3)
    g = graph_from_edges(25, np.argwhere(np.triu(g.adjacency.to_dense())), g.features,
                         g.labels, ["train", "val", "test", "none", "train"] * 5)
    write_graph_bundle(g, tmp_path / "b")
    h = load_graph_bundle(tmp_path / "b")
    assert np.array_equal(h.adjacency.to_dense(), g.adjacency.to_dense())
    assert np.array_equal(h.features, g.features)
    assert np.array_equal(h.labels, g.labels)
    assert np.array_equal(h.split, g.split)
    assert h.num_classes == g.num_classes


@pytest.mark.parametrize("breakage", ["missing", "row_count", "non_numeric", "bad_split"])
def test_bundle_errors(tmp_path, breakage):
    g = graph_from_edges(3, [(0, 1)], np.ones((3, 2)), [0, 1, 0], ["train", "val", "test"])
    d = tmp_path / "b"
    write_graph_bundle(g, d)
    if breakage == "missing":
        (d / "features.tsv").unlink()
    elif breakage == "row_count":
        (d / "features.tsv").write_text("1\t1\n1\t1\n")
    elif breakage == "non_numeric":
        (d / "features.tsv").write_text("1\t1\n1\tx\n1\t1\n")
    else:
        (d / "split.tsv").write_text("train\nfoo\ntest\n")
    with pytest.raises(GraphFormatError):
        load_graph_bundle(d)


def test_matrix_tsv_roundtrip_is_exact(tmp_path):
    x = np.random.default_rng(0).normal(size=(4, 3))
    x[0, 0] = 2.0
    write_matrix_tsv(x, tmp_path / "m.tsv")
    assert np.array_equal(read_matrix_tsv(tmp_path / "m.tsv"), x)


def test_degree_vector():
    g = graph_from_edges(4, [(0, 1), (0, 2), (0, 3)])
    assert degree_vector(g).tolist() == [3, 1, 1, 1]


def test_cora_bundle_counts(cora_path):
    g = load_graph_bundle(cora_path)
    assert (g.num_nodes, g.num_edges, g.num_features, g.num_classes) == (2708, 5278, 1433, 7)
    assert [int(g.mask(t).sum()) for t in ("train", "val", "test")] == [140, 500, 1000]
