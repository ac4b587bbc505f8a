"""Central finite-difference checks for every differentiable operation.

Each case builds a scalar loss from double-precision leaves, runs the tape
backward, and compares every leaf gradient with ``(f(x+h) - f(x-h)) / 2h``.
The error reported is the norm-wise relative error
``|g_tape - g_num| / max(|g_tape| + |g_num|, 1e-8)``.  The floor matters
for gradients that are exactly zero in theory, such as a bias feeding a
train-mode batch norm, where both sides are pure roundoff.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .graph import SparseMatrix, graph_from_edges, symmetric_renormalize
from .model import ModelConfig, encoder_forward, init_params, mlp_forward

STEP = 1e-5
TOL = 1e-5
TOL_BATCH_NORM = 1e-4
ZERO_FLOOR = 1e-8


@dataclass
class GradCase:
    name: str
    leaves: list[np.ndarray]
    loss: Callable[..., ad.Tensor]
    tol: float = TOL


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), ZERO_FLOOR)
    return float(num / den)


def tape_gradients(case: GradCase) -> list[np.ndarray]:
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in case.leaves]
    with ad.Tape() as tape:
        loss = case.loss(*tensors)
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def numeric_gradients(case: GradCase, h: float = STEP) -> list[np.ndarray]:
    out = []
    for i, leaf in enumerate(case.leaves):
        g = np.zeros_like(leaf)
        for idx in np.ndindex(*leaf.shape):
            vals = []
            for sign in (1.0, -1.0):
                args = [x.copy() for x in case.leaves]
                args[i][idx] += sign * h
                vals.append(case.loss(*[ad.Tensor(a) for a in args]).item())
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def check(case: GradCase) -> GradResult:
    tape = tape_gradients(case)
    num = numeric_gradients(case)
    err = max(relative_error(a, b) for a, b in zip(tape, num))
    return GradResult(case.name, err, case.tol)


def _project(y: ad.Tensor, r: np.ndarray) -> ad.Tensor:
    """Scalar ``sum(r * y)`` as a 1x1 product of the flattened operands."""
    flat_r = ad.Tensor(r.reshape(1, -1))
    flat_y = _reshape(y, (-1, 1))
    return ad.matmul(flat_r, flat_y)


def _reshape(x: ad.Tensor, shape) -> ad.Tensor:
    orig = x.shape
    return ad._emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def _sparse_graph(n: int, seed: int, symmetric: bool) -> SparseMatrix:
    rng = np.random.default_rng(seed)
    if symmetric:
        iu = np.triu_indices(n, 1)
        keep = rng.random(len(iu[0])) < 0.4
        g = graph_from_edges(n, np.stack([iu[0][keep], iu[1][keep]], 1))
        return symmetric_renormalize(g)
    dense = rng.random((n, n)) * (rng.random((n, n)) < 0.4)
    return SparseMatrix.from_dense(dense)


def gradient_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)
    away = lambda *s: np.sign(r(*s)) * rng.uniform(0.2, 1.5, size=s)  # no entry near the kink
    s_sym = _sparse_graph(6, seed, True)
    s_gen = _sparse_graph(6, seed + 1, False)
    proj43, proj63 = r(4, 3), r(6, 3)
    mask = (rng.random((4, 3)) >= 0.3) / 0.7
    target = r(4, 3)

    def bn_state(width):
        return ad.BatchNormState.create(width, np.float64, requires_grad=False)

    def bn_loss(x, gamma, beta):
        st = bn_state(3)
        st.gamma, st.beta = gamma, beta
        return _project(ad.batch_norm(x, st, "train"), proj43)

    def bn_eval_loss(x, gamma, beta):
        st = bn_state(3)
        st.gamma, st.beta = gamma, beta
        st.running_mean = np.array([0.1, -0.2, 0.3])
        st.running_var = np.array([0.5, 1.5, 2.0])
        return _project(ad.batch_norm(x, st, "eval"), proj43)

    cases = [
        GradCase("matmul", [r(4, 5), r(5, 3)], lambda a, b: _project(ad.matmul(a, b), proj43)),
        GradCase("add_bias", [r(4, 3), r(3)], lambda x, b: _project(ad.add_bias(x, b), proj43)),
        GradCase("add", [r(4, 3), r(4, 3)], lambda a, b: _project(ad.add(a, b), proj43)),
        GradCase("scale", [r(4, 3)], lambda x: _project(ad.scale(x, -1.7), proj43)),
        GradCase("relu", [away(4, 3)], lambda x: _project(ad.relu(x), proj43)),
        GradCase("prelu", [away(4, 3), np.array([0.25])],
                 lambda x, s: _project(ad.prelu(x, s), proj43)),
        GradCase("spmm_fixed (symmetric)", [r(6, 3)],
                 lambda x: _project(ad.spmm_fixed(s_sym, x), proj63)),
        GradCase("spmm_fixed (general)", [r(6, 3)],
                 lambda x: _project(ad.spmm_fixed(s_gen, x), proj63)),
        GradCase("batch_norm (train)", [r(4, 3), 1 + 0.3 * r(3), r(3)], bn_loss, TOL_BATCH_NORM),
        GradCase("batch_norm (eval)", [r(4, 3), 1 + 0.3 * r(3), r(3)], bn_eval_loss),
        GradCase("dropout (fixed mask)", [r(4, 3)],
                 lambda x: _project(ad.dropout(x, 0.3, mask=mask), proj43)),
        GradCase("cosine_mse_loss (matrix)", [r(4, 3)],
                 lambda p: ad.cosine_mse_loss(p, ad.Tensor(target), "matrix")),
        GradCase("cosine_mse_loss (per_node)", [r(4, 3)],
                 lambda p: ad.cosine_mse_loss(p, ad.Tensor(target), "per_node")),
    ]
    cases.append(_composite_case(seed))
    return cases


def _composite_case(seed: int) -> GradCase:
    """Two-layer encoder + predictor + loss; every student parameter is a leaf."""
    n, f = 8, 5
    rng = np.random.default_rng(seed + 7)
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < 0.35
    h_op = symmetric_renormalize(graph_from_edges(n, np.stack([iu[0][keep], iu[1][keep]], 1)))
    x = ad.Tensor(rng.normal(size=(n, f)))
    cfg = ModelConfig(f, (6, 4), predictor_hidden=5, precision="f64")
    params = init_params(cfg, seed)
    named = params.student_parameters()
    # perturb away from the identity-like init so batch norm sees varied scales
    leaves = [t.data + 0.1 * rng.normal(size=t.shape) for _, t in named]
    target = ad.Tensor(rng.normal(size=(n, 4)))

    def loss(*tensors):
        # rebind the live tensors so the tape tracks the leaves passed in
        swap = {id(t): new for (_, t), new in zip(named, tensors)}
        enc = _rebind(params.student.encoder, swap)
        pred = _rebind(params.student.predictor, swap)
        z = encoder_forward(enc, h_op, x, "train", 0.2, np.random.default_rng(5))
        return ad.cosine_mse_loss(mlp_forward(pred, z, "train"), target, "matrix")

    return GradCase("encoder + predictor composite", leaves, loss, TOL_BATCH_NORM)


def _rebind(obj, swap: dict):
    """Shallow structural copy with tensors replaced according to ``swap``."""
    if isinstance(obj, ad.Tensor):
        return swap.get(id(obj), obj)
    if isinstance(obj, list):
        return [_rebind(o, swap) for o in obj]
    if hasattr(obj, "__dataclass_fields__"):
        dup = copy.copy(obj)
        for name in obj.__dataclass_fields__:
            setattr(dup, name, _rebind(getattr(obj, name), swap))
        return dup
    return obj


def gradient_suite(seed: int = 0) -> list[GradResult]:
    return [check(c) for c in gradient_cases(seed)]
