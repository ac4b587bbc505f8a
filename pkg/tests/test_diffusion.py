import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from selfgnn.diffusion import (
    DiffusionConfig,
    DiffusionError,
    diffusion_operator,
    heat_kernel_diffusion,
    heat_terms,
    katz_diffusion,
    ppr_diffusion,
    random_walk_operator,
    sparsify,
    track_dense_allocations,
)
from selfgnn.graph import graph_from_edges, symmetric_renormalize

from conftest import random_graph

PATH2 = graph_from_edges(2, [(0, 1)])
A2 = symmetric_renormalize(PATH2)


def test_path2_renormalized_is_half_everywhere():
    assert np.array_equal(A2.to_dense(), np.full((2, 2), 0.5))


@pytest.mark.parametrize("solver", ["dense", "iterative"])
def test_ppr_two_node_closed_form(solver):
    # alpha (I - c/2 J)^-1 with c = 1 - alpha reduces to [[1 - c/2, c/2], [c/2, 1 - c/2]]
    h = ppr_diffusion(A2, DiffusionConfig(alpha=0.15, solver=solver))
    c = 0.85
    np.testing.assert_allclose(h, [[1 - c / 2, c / 2], [c / 2, 1 - c / 2]], atol=1e-9)


@pytest.mark.parametrize("solver", ["dense", "iterative"])
def test_ppr_alpha_one_is_identity(solver, small_graph):
    a = symmetric_renormalize(small_graph)
    h = ppr_diffusion(a, DiffusionConfig(alpha=1.0, solver=solver))
    assert np.array_equal(h, np.eye(small_graph.num_nodes))


def test_ppr_rows_sum_to_one_on_regular_graph():
    cycle = graph_from_edges(8, [(i, (i + 1) % 8) for i in range(8)])
    h = ppr_diffusion(symmetric_renormalize(cycle), DiffusionConfig())
    np.testing.assert_allclose(h.sum(axis=1), 1.0, atol=1e-10)


@pytest.mark.parametrize("solver", ["dense", "iterative"])
def test_katz_two_node_closed_form(solver):
    # (0.5 J)^k = 0.5 J, so H = 0.5 J * beta / (1 - beta) = J / 18 for beta = 0.1
    h = katz_diffusion(A2, DiffusionConfig(kind="katz", beta=0.1, solver=solver))
    np.testing.assert_allclose(h, np.full((2, 2), 1 / 18), atol=1e-10)


def test_katz_beta_zero_is_zero(small_graph):
    h = katz_diffusion(symmetric_renormalize(small_graph), DiffusionConfig(beta=0.0))
    assert not h.any()


def test_heat_two_node_closed_form():
    # exp(t (P - I)) with P the swap matrix
    t = 3.0
    h = heat_kernel_diffusion(PATH2, DiffusionConfig(kind="heat", t=t))
    e = math.exp(-2 * t)
    np.testing.assert_allclose(h, [[(1 + e) / 2, (1 - e) / 2], [(1 - e) / 2, (1 + e) / 2]], atol=1e-10)


def test_heat_t_zero_is_identity(small_graph):
    h = heat_kernel_diffusion(small_graph, DiffusionConfig(kind="heat", t=0.0))
    assert np.array_equal(h, np.eye(small_graph.num_nodes))


def test_heat_matches_expm_and_is_column_stochastic():
    g = random_graph(25, 0.2, 7, connected=True)
    h = heat_kernel_diffusion(g, DiffusionConfig(kind="heat", t=3.0))
    p = random_walk_operator(g).toarray()
    np.testing.assert_allclose(h, scipy.linalg.expm(3.0 * (p - np.eye(25))), atol=1e-9)
    np.testing.assert_allclose(h.sum(axis=0), 1.0, atol=1e-8)


def test_heat_isolated_policy():
    g = graph_from_edges(3, [(0, 1)])
    h = heat_kernel_diffusion(g, DiffusionConfig(kind="heat"))
    # the isolated node diffuses nothing: its column keeps only the e^-t identity term
    assert h[2, 2] == pytest.approx(math.exp(-3.0))
    with pytest.raises(DiffusionError):
        heat_kernel_diffusion(g, DiffusionConfig(kind="heat", isolated="reject"))


def test_heat_terms_rule():
    k = heat_terms(3.0, 1e-10, 10_000)
    coef = lambda j: math.exp(-3) * 3 ** j / math.factorial(j)
    assert coef(k + 1) < 1e-10 <= coef(k)
    assert heat_terms(3.0, 1e-10, 5) == 5


def test_heat_truncation_is_monotone():
    g = random_graph(20, 0.25, 2, connected=True)
    ref = heat_kernel_diffusion(g, DiffusionConfig(kind="heat", tol=1e-16))
    errs = [
        np.abs(heat_kernel_diffusion(g, DiffusionConfig(kind="heat", max_terms=m, tol=1e-16)) - ref).max()
        for m in range(1, 25)
    ]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_iterative_cap_raises():
    cfg = DiffusionConfig(alpha=0.01, solver="iterative", max_terms=3)
    with pytest.raises(DiffusionError):
        ppr_diffusion(A2, cfg)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 60), st.floats(0.02, 0.4), st.integers(0, 10_000),
       st.floats(0.05, 0.95), st.floats(0.0, 0.9))
def test_residual_identities(n, p, seed, alpha, beta):
    g = random_graph(n, p, seed)
    a = symmetric_renormalize(g)
    ad = a.to_dense()
    eye = np.eye(n)
    cfg = DiffusionConfig(alpha=alpha, beta=beta)
    h = ppr_diffusion(a, cfg)
    assert np.abs((eye - (1 - alpha) * ad) @ h - alpha * eye).max() < 10 * cfg.tol
    hi = ppr_diffusion(a, cfg.with_(solver="iterative"))
    assert np.abs(hi - h).max() < 10 * cfg.tol
    k = katz_diffusion(a, cfg)
    assert np.abs((eye - beta * ad) @ k - beta * ad).max() < 10 * cfg.tol
    ki = katz_diffusion(a, cfg.with_(solver="iterative"))
    assert np.abs(ki - k).max() < 10 * cfg.tol
    assert h.min() >= -1e-12 and k.min() >= -1e-12


def test_sparsify_modes():
    h = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.1], [0.0, 0.0, 1.0]])
    assert sparsify(h, DiffusionConfig(epsilon=2.0)).nnz == 0
    assert sparsify(h, DiffusionConfig(sparsify="top_k", top_k=5)).nnz == 7
    assert sparsify(h, DiffusionConfig(sparsify="none")).nnz == 7
    top2 = sparsify(h, DiffusionConfig(sparsify="top_k", top_k=2)).to_dense()
    assert top2[0].tolist() == [0.5, 0.3, 0.0]
    # ties go to the lower column index
    assert top2[1].tolist() == [0.1, 0.1, 0.0]
    eps = sparsify(h, DiffusionConfig(epsilon=0.2)).to_dense()
    assert eps[0].tolist() == [0.5, 0.3, 0.2] and not eps[1].any()


def test_sparsify_rejects_non_square():
    with pytest.raises(ValueError):
        sparsify(np.ones((2, 3)), DiffusionConfig())


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(beta=1.0), dict(tol=0.0), dict(epsilon=0.0),
                                dict(top_k=0), dict(kind="foo"), dict(t=-1.0), dict(max_terms=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DiffusionConfig(**kw)


def test_alpha_one_operator_is_identity(small_graph):
    h = diffusion_operator(small_graph, DiffusionConfig(alpha=1.0))
    assert np.array_equal(h.to_dense(), np.eye(small_graph.num_nodes))


def test_renormalize_flag_gives_symmetric_operator(small_graph):
    h = diffusion_operator(small_graph, DiffusionConfig(kind="heat", renormalize=True)).to_dense()
    np.testing.assert_allclose(h, h.T, atol=1e-15)


@pytest.mark.parametrize("kind", ["ppr", "heat", "katz"])
@pytest.mark.parametrize("solver", ["dense", "iterative"])
def test_allocation_counter_bounded_by_n_squared(kind, solver):
    g = random_graph(40, 0.1, 1)
    with track_dense_allocations() as c:
        diffusion_operator(g, DiffusionConfig(kind=kind, solver=solver))
    assert c.count > 0 and c.peak == 40 * 40
