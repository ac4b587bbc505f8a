"""Encoder, predictor and optional projection head.

The student holds encoder + predictor (+ projector); the teacher holds an
encoder (+ projector) of identical shapes whose tensors never require
gradients.  Parameter names are stable and used as checkpoint section names,
e.g. ``student.enc.0.W`` or ``teacher.enc.1.bn.gamma``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    add_bias,
    batch_norm,
    dropout,
    matmul,
    prelu,
    relu,
    spmm_fixed,
)
from .graph import SparseMatrix
from .seeding import substream

DTYPES = {"f32": np.float32, "f64": np.float64}
SPARSE_INPUT_DENSITY = 0.1


@dataclass(frozen=True)
class ModelConfig:
    in_features: int
    layers: tuple[int, ...] = (512, 128)
    predictor_hidden: int = 512
    activation: str = "prelu"
    projector: bool = False
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.in_features < 1 or not self.layers or min(self.layers) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in ("prelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.precision not in DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def embedding_width(self) -> int:
        return self.layers[-1]


@dataclass
class Activation:
    kind: str
    slope: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope) if self.kind == "prelu" else relu(x)


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add_bias(out, self.bias) if self.bias is not None else out


@dataclass
class GCNLayer:
    weight: Tensor
    bn: BatchNormState
    act: Activation


@dataclass
class EncoderParams:
    layers: list[GCNLayer]

    @property
    def in_features(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class MLPParams:
    """Linear -> BatchNorm -> activation -> Linear (predictor or projector)."""

    lin1: Linear
    bn: BatchNormState
    act: Activation
    lin2: Linear


@dataclass
class StudentParams:
    encoder: EncoderParams
    predictor: MLPParams
    projector: MLPParams | None = None


@dataclass
class TeacherParams:
    encoder: EncoderParams
    projector: MLPParams | None = None


@dataclass
class ModelParams:
    config: ModelConfig
    student: StudentParams
    teacher: TeacherParams
    meta: dict = field(default_factory=dict)

    def student_parameters(self) -> list[tuple[str, Tensor]]:
        out = _encoder_params("student.enc", self.student.encoder)
        out += _mlp_params("student.pred", self.student.predictor)
        if self.student.projector is not None:
            out += _mlp_params("student.proj", self.student.projector)
        return out

    def teacher_parameters(self) -> list[tuple[str, Tensor]]:
        out = _encoder_params("teacher.enc", self.teacher.encoder)
        if self.teacher.projector is not None:
            out += _mlp_params("teacher.proj", self.teacher.projector)
        return out

    def ema_pairs(self) -> list[tuple[Tensor, Tensor]]:
        """(student, teacher) tensor pairs covered by the moving average."""
        pairs = list(zip(
            (t for _, t in _encoder_params("s", self.student.encoder)),
            (t for _, t in _encoder_params("t", self.teacher.encoder)),
        ))
        if self.teacher.projector is not None:
            pairs += list(zip(
                (t for _, t in _mlp_params("s", self.student.projector)),
                (t for _, t in _mlp_params("t", self.teacher.projector)),
            ))
        return pairs

    def buffers(self) -> list[tuple[str, BatchNormState]]:
        out = [(f"student.enc.{i}.bn", l.bn) for i, l in enumerate(self.student.encoder.layers)]
        out.append(("student.pred.bn", self.student.predictor.bn))
        if self.student.projector is not None:
            out.append(("student.proj.bn", self.student.projector.bn))
        out += [(f"teacher.enc.{i}.bn", l.bn) for i, l in enumerate(self.teacher.encoder.layers)]
        if self.teacher.projector is not None:
            out.append(("teacher.proj.bn", self.teacher.projector.bn))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: t.data.copy() for n, t in self.student_parameters() + self.teacher_parameters()}
        for name, bn in self.buffers():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.student_parameters() + self.teacher_parameters())
        expected = set(params) | {
            f"{n}.{k}" for n, _ in self.buffers() for k in ("running_mean", "running_var")
        }
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:3]}...")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
            t.data = state[name].astype(t.dtype).copy()
        for name, bn in self.buffers():
            bn.running_mean = state[f"{name}.running_mean"].astype(bn.running_mean.dtype).copy()
            bn.running_var = state[f"{name}.running_var"].astype(bn.running_var.dtype).copy()

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)


def _encoder_params(prefix: str, enc: EncoderParams) -> list[tuple[str, Tensor]]:
    out = []
    for i, layer in enumerate(enc.layers):
        out.append((f"{prefix}.{i}.W", layer.weight))
        out.append((f"{prefix}.{i}.bn.gamma", layer.bn.gamma))
        out.append((f"{prefix}.{i}.bn.beta", layer.bn.beta))
        if layer.act.slope is not None:
            out.append((f"{prefix}.{i}.act.slope", layer.act.slope))
    return out


def _mlp_params(prefix: str, mlp: MLPParams) -> list[tuple[str, Tensor]]:
    out = [(f"{prefix}.lin1.W", mlp.lin1.weight)]
    if mlp.lin1.bias is not None:
        out.append((f"{prefix}.lin1.b", mlp.lin1.bias))
    out += [(f"{prefix}.bn.gamma", mlp.bn.gamma), (f"{prefix}.bn.beta", mlp.bn.beta)]
    if mlp.act.slope is not None:
        out.append((f"{prefix}.act.slope", mlp.act.slope))
    out.append((f"{prefix}.lin2.W", mlp.lin2.weight))
    if mlp.lin2.bias is not None:
        out.append((f"{prefix}.lin2.b", mlp.lin2.bias))
    return out


# ------------------------------------------------------------------ init


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    lim = glorot_limit(fan_in, fan_out)
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _activation(kind: str, dtype) -> Activation:
    if kind == "prelu":
        return Activation("prelu", Tensor(np.full(1, 0.25, dtype=dtype), requires_grad=True))
    return Activation("relu")


def _init_mlp(rng, width: int, hidden: int, cfg: ModelConfig) -> MLPParams:
    dt = cfg.dtype
    return MLPParams(
        lin1=Linear(Tensor(_glorot(rng, width, hidden, dt), True), Tensor(np.zeros(hidden, dt), True)),
        bn=BatchNormState.create(hidden, dt),
        act=_activation(cfg.activation, dt),
        lin2=Linear(Tensor(_glorot(rng, hidden, width, dt), True), Tensor(np.zeros(width, dt), True)),
    )


def _frozen_copy(obj):
    """Deep copy whose tensors never require gradients (teacher side)."""
    dup = copy.deepcopy(obj)
    stack = [dup]
    while stack:
        item = stack.pop()
        if isinstance(item, Tensor):
            item.requires_grad = False
            item.grad = None
        elif isinstance(item, BatchNormState):
            stack += [item.gamma, item.beta]
        elif isinstance(item, list):
            stack += item
        elif hasattr(item, "__dataclass_fields__"):
            stack += [getattr(item, f) for f in item.__dataclass_fields__]
    return dup


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform student; the teacher starts as an exact copy."""
    rng = substream(seed, "init")
    dt = cfg.dtype
    widths = (cfg.in_features,) + tuple(cfg.layers)
    layers = [
        GCNLayer(
            weight=Tensor(_glorot(rng, fi, fo, dt), requires_grad=True),
            bn=BatchNormState.create(fo, dt),
            act=_activation(cfg.activation, dt),
        )
        for fi, fo in zip(widths[:-1], widths[1:])
    ]
    encoder = EncoderParams(layers)
    d = cfg.embedding_width
    projector = _init_mlp(rng, d, cfg.predictor_hidden, cfg) if cfg.projector else None
    predictor = _init_mlp(rng, d, cfg.predictor_hidden, cfg)
    student = StudentParams(encoder, predictor, projector)
    teacher = TeacherParams(
        _frozen_copy(encoder), _frozen_copy(projector) if projector is not None else None
    )
    return ModelParams(cfg, student, teacher)


# --------------------------------------------------------------- forward


def as_input(x, dtype=np.float32):
    """Wrap a constant feature matrix; sparse ones become CSR operands."""
    if isinstance(x, (Tensor, SparseMatrix)):
        return x
    x = np.asarray(x)
    if x.size and np.count_nonzero(x) / x.size < SPARSE_INPUT_DENSITY:
        return SparseMatrix.from_dense(x)
    return Tensor(x.astype(dtype))


def encoder_forward(enc: EncoderParams, h_op: SparseMatrix, x, mode: str = "train",
                    dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Per layer: ``dropout(act(batch_norm(H X W)))``; computed as ``H (X W)``."""
    training = mode == "train"
    h = as_input(x, enc.layers[0].weight.dtype)
    width = h.shape[1]
    if width != enc.in_features:
        raise ValueError(f"input width {width} != encoder fan-in {enc.in_features}")
    if h_op.shape != (h.shape[0], h.shape[0]):
        raise ValueError(f"propagation operator {h_op.shape} does not match {h.shape[0]} nodes")
    for layer in enc.layers:
        xw = spmm_fixed(h, layer.weight) if isinstance(h, SparseMatrix) else matmul(h, layer.weight)
        h = spmm_fixed(h_op, xw)
        h = batch_norm(h, layer.bn, mode)
        h = layer.act(h)
        h = dropout(h, dropout_p, training=training, rng=rng)
    return h


def mlp_forward(p: MLPParams, z: Tensor, mode: str = "train") -> Tensor:
    if z.shape[1] != p.lin1.weight.shape[0]:
        raise ValueError(f"input width {z.shape[1]} != {p.lin1.weight.shape[0]}")
    h = p.lin1(z)
    h = batch_norm(h, p.bn, mode)
    h = p.act(h)
    return p.lin2(h)


predictor_forward = mlp_forward


def projector_forward(p: MLPParams | None, z: Tensor, mode: str = "train") -> Tensor:
    if p is None:
        raise RuntimeError("projection head is disabled in this model")
    return mlp_forward(p, z, mode)
