"""A small tape-based reverse-mode autodiff over dense numpy arrays.

Only the operations the encoder/predictor need are provided.  Operations
record themselves on the innermost active :class:`Tape` when at least one
input requires a gradient; outside a tape (or with constant inputs) they are
plain numpy computations.  That is how the teacher network runs: its
parameters never require gradients, so no gradient buffer is ever created
for them.

Example::

    w = Tensor(np.eye(3), requires_grad=True)
    with Tape() as tape:
        y = matmul(Tensor(x), w)
        loss = cosine_mse_loss(y, Tensor(target))
    tape.backward(loss)
    w.grad  # dL/dw
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .graph import SparseMatrix, spmm

_ids = itertools.count()
_local = threading.local()


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed operations; replayed once in reverse."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("tape already replayed")
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
            # intermediate gradients are not needed once propagated
            rec.output.grad = None if rec.output is not loss else rec.output.grad

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def tensors(self) -> Iterable[Tensor]:
        for r in self.records:
            yield from r.inputs
            yield r.output


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _check_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ValueError(f"{op} expects a matrix, got shape {x.shape}")


# --------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _emit("matmul", (a, b), ad @ bd, backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    _check_2d(x, "add_bias")
    if b.shape != (x.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match width {x.shape[1]}")

    def backward(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", (x, b), x.data + b.data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _emit("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """``max(0, x) + slope * min(0, x)`` with a single learned slope."""
    if slope.data.size != 1:
        raise ValueError("prelu slope must be a scalar tensor")
    s = slope.data.reshape(())
    pos = x.data > 0
    xd = x.data

    def backward(g):
        gx = g * np.where(pos, 1, s).astype(g.dtype)
        gs = np.sum(g * np.where(pos, 0, xd)).reshape(slope.shape)
        return gx, gs

    return _emit("prelu", (x, slope), np.where(pos, xd, s * xd).astype(x.dtype), backward)


_transpose_cache: dict[int, tuple[SparseMatrix, SparseMatrix]] = {}


def _transpose_of(s: SparseMatrix) -> SparseMatrix:
    hit = _transpose_cache.get(id(s))
    if hit is not None and hit[0] is s:
        return hit[1]
    t = s if s.is_symmetric() else s.transpose()
    if len(_transpose_cache) > 64:
        _transpose_cache.clear()
    _transpose_cache[id(s)] = (s, t)
    return t


def spmm_fixed(s: SparseMatrix, x: Tensor) -> Tensor:
    """``S @ x`` for a constant sparse ``S``; gradient flows to ``x`` only."""
    _check_2d(x, "spmm_fixed")
    if s.cols != x.shape[0]:
        raise ValueError(f"spmm shape mismatch: {s.shape} @ {x.shape}")

    def backward(g):
        return (spmm(_transpose_of(s), g),)

    return _emit("spmm", (x,), spmm(s, x.data), backward)


@dataclass
class BatchNormState:
    """Per-feature batch normalization parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, width: int, dtype=np.float32, requires_grad: bool = True,
               eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(width, dtype=dtype), requires_grad=requires_grad),
            beta=Tensor(np.zeros(width, dtype=dtype), requires_grad=requires_grad),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, st: BatchNormState, mode: str | None = None) -> Tensor:
    """Normalize each column.

    In train mode batch statistics are used (biased variance) and the running
    estimates move by ``momentum``; in eval mode the running estimates are
    used as constants.
    """
    _check_2d(x, "batch_norm")
    mode = mode or st.mode
    n, f = x.shape
    if f != st.width:
        raise ValueError(f"batch_norm width {f} != state width {st.width}")
    gamma, beta = st.gamma, st.beta
    if mode == "train":
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + st.eps)
        xhat = centered * inv_std
        m = st.momentum
        st.running_mean = ((1 - m) * st.running_mean + m * mu).astype(st.running_mean.dtype)
        st.running_var = ((1 - m) * st.running_var + m * var).astype(st.running_var.dtype)

        def backward(g):
            gd = g * gamma.data
            gx = inv_std / n * (n * gd - gd.sum(axis=0) - xhat * (gd * xhat).sum(axis=0))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(st.running_var + st.eps)
        xhat = (x.data - st.running_mean) * inv_std

        def backward(g):
            return g * (gamma.data * inv_std), (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    out = (gamma.data * xhat + beta.data).astype(x.dtype)
    return _emit("batch_norm", (x, gamma, beta), out, backward)


def dropout(x: Tensor, p: float, training: bool = True,
            rng: np.random.Generator | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout.  A precomputed ``mask`` (already scaled) may be passed."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if not training or (p == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng or a mask")
        keep = rng.random(x.shape) >= p
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * mask,)

    return _emit("dropout", (x,), x.data * mask, backward)


def cosine_mse_loss(p: Tensor, z: Tensor, mode: str = "matrix") -> Tensor:
    """``2 - 2 cos(p, z)``; ``z`` is treated as a constant.

    ``matrix`` compares the flattened matrices (Frobenius inner product),
    ``per_node`` averages the row-wise loss.
    """
    if p.shape != z.shape:
        raise ValueError(f"loss shape mismatch: {p.shape} vs {z.shape}")
    pd = p.data.astype(np.float64)
    zd = z.data.astype(np.float64)
    if mode == "matrix":
        pn = np.sqrt(np.sum(pd * pd))
        zn = np.sqrt(np.sum(zd * zd))
        if pn == 0 or zn == 0:
            raise ValueError("cosine loss undefined for a zero-norm input")
        dot = np.sum(pd * zd)
        cos = dot / (pn * zn)
        value = 2.0 - 2.0 * cos

        def backward(g):
            gp = -2.0 * (zd / (pn * zn) - cos * pd / (pn * pn))
            return ((g * gp).astype(p.dtype),)
    elif mode == "per_node":
        if pd.ndim != 2:
            raise ValueError("per_node loss expects matrices")
        pn = np.sqrt(np.sum(pd * pd, axis=1, keepdims=True))
        zn = np.sqrt(np.sum(zd * zd, axis=1, keepdims=True))
        if np.any(pn == 0) or np.any(zn == 0):
            raise ValueError("cosine loss undefined for a zero-norm row")
        cos = np.sum(pd * zd, axis=1, keepdims=True) / (pn * zn)
        value = np.mean(2.0 - 2.0 * cos)
        n = pd.shape[0]

        def backward(g):
            gp = -2.0 / n * (zd / (pn * zn) - cos * pd / (pn * pn))
            return ((g * gp).astype(p.dtype),)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return _emit("cosine_mse", (p,), np.asarray(value, dtype=np.float64), backward)


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, Tensor]], st: AdamState) -> None:
    """One bias-corrected Adam update, in place.  Params without grad are skipped."""
    st.step += 1
    c1 = 1.0 - st.beta1 ** st.step
    c2 = 1.0 - st.beta2 ** st.step
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        update = st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        p.data = (p.data - update).astype(p.dtype)
