"""Graph diffusion operators: personalized PageRank, heat kernel and Katz.

Each operator is available as a dense solve and as a truncated power
series; :func:`sparsify` turns the dense result into a propagation
operator.  All dense ``n x n`` buffers are reported to the active
:class:`AllocationCounter` so callers can bound peak memory.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .graph import Graph, SparseMatrix, symmetric_renormalize

DENSE_NODE_LIMIT = 20_000

KINDS = ("ppr", "heat", "katz")
SOLVERS = ("dense", "iterative")
SPARSIFY_MODES = ("none", "epsilon", "top_k")
ISOLATED_POLICIES = ("zero", "reject")


class DiffusionError(ArithmeticError):
    """Series did not converge within ``max_terms`` or input was rejected."""


@dataclass(frozen=True)
class DiffusionConfig:
    kind: str = "ppr"
    alpha: float = 0.15
    t: float = 3.0
    beta: float = 0.1
    solver: str = "dense"
    tol: float = 1e-10
    max_terms: int = 10_000
    sparsify: str = "epsilon"
    epsilon: float = 1e-4
    top_k: int = 64
    renormalize: bool = False
    isolated: str = "zero"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.sparsify not in SPARSIFY_MODES:
            raise ValueError(f"unknown sparsify mode {self.sparsify!r}")
        if self.isolated not in ISOLATED_POLICIES:
            raise ValueError(f"unknown isolated-node policy {self.isolated!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def with_(self, **kw) -> "DiffusionConfig":
        return replace(self, **kw)


class AllocationCounter:
    """Records the largest dense buffer (in elements) the diffusion code made."""

    def __init__(self) -> None:
        self.peak = 0
        self.count = 0

    def record(self, rows: int, cols: int) -> None:
        self.count += 1
        self.peak = max(self.peak, rows * cols)


_counters: list[AllocationCounter] = []


@contextlib.contextmanager
def track_dense_allocations():
    counter = AllocationCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _note(rows: int, cols: int) -> None:
    for c in _counters:
        c.record(rows, cols)


def _dense(rows: int, cols: int, fill: str = "zeros") -> np.ndarray:
    _note(rows, cols)
    if fill == "eye":
        return np.eye(rows, cols)
    return np.zeros((rows, cols))


def _guard(n: int) -> None:
    if n > DENSE_NODE_LIMIT:
        raise MemoryError(
            f"dense diffusion refused for {n} nodes (limit {DENSE_NODE_LIMIT}); "
            "use cluster mode"
        )


def _sparse(m: SparseMatrix | sp.spmatrix) -> sp.csr_matrix:
    return m.to_scipy() if isinstance(m, SparseMatrix) else sp.csr_matrix(m)


def _neumann(op: sp.csr_matrix, first: np.ndarray, ratio: float, cfg: DiffusionConfig,
             out: np.ndarray) -> np.ndarray:
    """Accumulate ``sum_k op^k first`` in place.

    Stops once the tail bound ``max|term| * ratio / (1 - ratio)`` drops
    below ``tol``; ``ratio`` is the geometric decay of the terms.
    """
    term = first
    out += term
    tail = ratio / (1.0 - ratio) if ratio < 1.0 else math.inf
    for _ in range(cfg.max_terms):
        if np.abs(term).max(initial=0.0) * tail < cfg.tol:
            return out
        term = op @ term
        out += term
    raise DiffusionError(f"series did not reach tol={cfg.tol} within {cfg.max_terms} terms")


def ppr_diffusion(a_tilde: SparseMatrix, cfg: DiffusionConfig) -> np.ndarray:
    """``alpha (I - (1 - alpha) Ã)^-1``."""
    n = a_tilde.rows
    _guard(n)
    a = cfg.alpha
    if cfg.solver == "dense":
        m = _dense(n, n, "eye")
        _note(n, n)
        m -= (1.0 - a) * a_tilde.to_dense()
        rhs = _dense(n, n, "eye") * a
        return np.linalg.solve(m, rhs)
    op = _sparse(a_tilde) * (1.0 - a)
    first = _dense(n, n, "eye") * a
    out = _dense(n, n)
    return _neumann(op, first, 1.0 - a, cfg, out)


def katz_diffusion(a_tilde: SparseMatrix, cfg: DiffusionConfig) -> np.ndarray:
    """``(I - beta Ã)^-1 beta Ã``."""
    n = a_tilde.rows
    _guard(n)
    b = cfg.beta
    out = _dense(n, n)
    if b == 0.0:
        return out
    if cfg.solver == "dense":
        m = _dense(n, n, "eye")
        dense_a = a_tilde.to_dense()
        _note(n, n)
        m -= b * dense_a
        return np.linalg.solve(m, b * dense_a)
    op = _sparse(a_tilde) * b
    first = op.toarray()
    _note(n, n)
    return _neumann(op, first, b, cfg, out)


def random_walk_operator(g: Graph, isolated: str = "zero") -> sp.csr_matrix:
    """Column-stochastic ``A D^-1``; isolated columns are zero or rejected."""
    deg = np.diff(g.adjacency.row_ptr).astype(np.float64)
    if np.any(deg == 0):
        if isolated == "reject":
            raise DiffusionError("graph has isolated nodes; heat kernel undefined")
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(g.adjacency.to_scipy() @ sp.diags(inv))


def heat_terms(t: float, tol: float, max_terms: int) -> int:
    """Index ``K`` of the last series term kept.

    ``K`` is the first index whose successor coefficient
    ``e^-t t^(K+1) / (K+1)!`` is below ``tol``, capped at ``max_terms``.
    """
    coef = math.exp(-t)
    k = 0
    while k < max_terms:
        nxt = coef * t / (k + 1)
        if nxt < tol:
            break
        coef = nxt
        k += 1
    return k


def heat_kernel_diffusion(g: Graph, cfg: DiffusionConfig) -> np.ndarray:
    """``exp(t A D^-1 - t)`` by its truncated Taylor series."""
    n = g.num_nodes
    _guard(n)
    if cfg.t > 0:
        op = random_walk_operator(g, cfg.isolated)
    k_max = heat_terms(cfg.t, cfg.tol, cfg.max_terms) if cfg.t > 0 else 0
    coef = math.exp(-cfg.t)
    term = _dense(n, n, "eye")
    out = term * coef
    _note(n, n)
    for k in range(1, k_max + 1):
        term = op @ term
        coef *= cfg.t / k
        out += coef * term
    return out


def diffuse(g: Graph, cfg: DiffusionConfig, a_tilde: SparseMatrix | None = None) -> np.ndarray:
    if cfg.kind == "heat":
        return heat_kernel_diffusion(g, cfg)
    if a_tilde is None:
        a_tilde = symmetric_renormalize(g)
    if cfg.kind == "ppr":
        return ppr_diffusion(a_tilde, cfg)
    return katz_diffusion(a_tilde, cfg)


def sparsify(h: np.ndarray, cfg: DiffusionConfig) -> SparseMatrix:
    """Keep the significant entries of a dense diffusion matrix."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("diffusion matrix must be square")
    if cfg.sparsify == "none":
        keep = h != 0
    elif cfg.sparsify == "epsilon":
        keep = np.abs(h) >= cfg.epsilon
    else:
        n = h.shape[1]
        k = min(cfg.top_k, n)
        # stable sort on -h: equal values keep ascending column order
        order = np.argsort(-h, axis=1, kind="stable")[:, :k]
        keep = np.zeros(h.shape, dtype=bool)
        np.put_along_axis(keep, order, True, axis=1)
    _note(*h.shape)
    return SparseMatrix.from_scipy(sp.csr_matrix(np.where(keep, h, 0.0)))


def diffusion_operator(g: Graph, cfg: DiffusionConfig,
                       a_tilde: SparseMatrix | None = None) -> SparseMatrix:
    """Diffuse, sparsify and optionally renormalize: the augmented ``H``."""
    h = sparsify(diffuse(g, cfg, a_tilde), cfg)
    if cfg.renormalize:
        h = _renormalize_weighted(h)
    return h


def _renormalize_weighted(h: SparseMatrix) -> SparseMatrix:
    m = h.to_scipy()
    m = (m + m.T) * 0.5
    deg = np.asarray(np.abs(m).sum(axis=1)).ravel()
    inv = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    d = sp.diags(inv)
    return SparseMatrix.from_scipy(d @ m @ d)
