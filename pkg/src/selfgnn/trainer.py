"""Student/teacher training loop.

One step: the student encodes view 1 and predicts, the teacher encodes view
2 without recording anything, the cosine loss between the two drives an Adam
update of the student only, and the teacher then moves towards the student
by an exponential moving average.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as fa
from .autodiff import (
    AdamState,
    NonFiniteError,
    Tape,
    Tensor,
    adam_step,
    add,
    cosine_mse_loss,
    scale,
)
from .diffusion import DiffusionConfig, diffusion_operator
from .evaluation import ProbeConfig, ProbeError, split_accuracy
from .graph import Graph, SparseMatrix, symmetric_renormalize
from .model import (
    ModelConfig,
    ModelParams,
    as_input,
    encoder_forward,
    init_params,
    mlp_forward,
)
from .seeding import substream

log = logging.getLogger(__name__)

TOPOLOGY_VARIANTS = ("ppr", "heat", "katz")
FEATURE_VARIANTS = ("split", "standardize", "ldp", "paste")
VARIANTS = TOPOLOGY_VARIANTS + FEATURE_VARIANTS
PAIRINGS = ("original-student", "augmented-student")


@dataclass(frozen=True)
class AugSpec:
    variant: str = "ppr"
    diffusion: DiffusionConfig = DiffusionConfig()
    pairing: str = "original-student"
    permutation_seed: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown augmentation {self.variant!r}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {self.pairing!r}")

    def diffusion_config(self) -> DiffusionConfig:
        return self.diffusion.with_(kind=self.variant)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-4
    dropout: float = 0.2
    tau: float = 0.99
    loss: str = "matrix"
    symmetric: bool = False
    seed: int = 0
    eval_every: int = 25
    layers: tuple[int, ...] = (512, 128)
    predictor_hidden: int = 512
    activation: str = "prelu"
    projector: bool = False
    precision: str = "f32"
    embed: str = "student"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.loss not in ("matrix", "per_node"):
            raise ValueError(f"unknown loss mode {self.loss!r}")
        if self.embed not in ("student", "concat"):
            raise ValueError(f"unknown embedding mode {self.embed!r}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def model_config(self, in_features: int) -> ModelConfig:
        return ModelConfig(in_features, tuple(self.layers), self.predictor_hidden,
                           self.activation, self.projector, self.precision)


@dataclass(frozen=True, eq=False)
class View:
    operator: SparseMatrix
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.operator.rows

    @property
    def width(self) -> int:
        return self.features.shape[1]


def make_views(g: Graph, spec: AugSpec, a_tilde: SparseMatrix | None = None) -> tuple[View, View]:
    """(View 1, View 2): original and augmented, before any pairing swap."""
    a_tilde = a_tilde if a_tilde is not None else symmetric_renormalize(g)
    x = g.features
    if spec.permutation_seed is not None:
        x = fa.permute_features(x, seed=spec.permutation_seed)
    v = spec.variant
    if v in TOPOLOGY_VARIANTS:
        h = diffusion_operator(g, spec.diffusion_config(), a_tilde)
        return View(a_tilde, x), View(h, x)
    if v == "split":
        x1, x2 = fa.split(x)
        return View(a_tilde, x1.matrix), View(a_tilde, x2.matrix)
    if v == "standardize":
        return View(a_tilde, x), View(a_tilde, fa.standardize(x).matrix)
    if v == "ldp":
        return View(a_tilde, x), View(a_tilde, fa.ldp_padded(g, x.shape[1]).matrix)
    x1, x2 = fa.paste(x, g)
    return View(a_tilde, x1.matrix), View(a_tilde, x2.matrix)


def _pad_to(x: np.ndarray, width: int) -> np.ndarray:
    if x.shape[1] == width:
        return x
    return np.hstack([x, np.zeros((x.shape[0], width - x.shape[1]), dtype=x.dtype)])


@dataclass
class Batch:
    """Views prepared for the model: inputs padded to one width and wrapped."""

    view1: View
    view2: View
    input1: object
    input2: object
    node_ids: np.ndarray | None = None

    @classmethod
    def prepare(cls, views: tuple[View, View], spec: AugSpec, dtype,
                node_ids: np.ndarray | None = None) -> "Batch":
        v1, v2 = views
        if spec.pairing == "augmented-student":
            v1, v2 = v2, v1
        width = max(v1.width, v2.width)
        v1 = View(v1.operator, _pad_to(v1.features, width))
        v2 = View(v2.operator, _pad_to(v2.features, width))
        return cls(v1, v2, as_input(v1.features, dtype), as_input(v2.features, dtype), node_ids)

    @property
    def width(self) -> int:
        return self.view1.width

    @property
    def num_nodes(self) -> int:
        return self.view1.num_nodes


def ema_update(theta, phi, tau: float) -> None:
    """``phi <- tau * phi + (1 - tau) * theta`` in place.

    Accepts sequences of tensors/arrays or a list of (student, teacher) pairs
    via :meth:`ModelParams.ema_pairs`.
    """
    if len(theta) != len(phi):
        raise ValueError("student and teacher parameter lists differ in length")
    for s, t in zip(theta, phi):
        sd = s.data if isinstance(s, Tensor) else s
        td = t.data if isinstance(t, Tensor) else t
        if sd.shape != td.shape:
            raise ValueError(f"EMA shape mismatch: {sd.shape} vs {td.shape}")
        new = tau * td + (1.0 - tau) * sd
        if isinstance(t, Tensor):
            t.data = new.astype(td.dtype)
        else:
            t[...] = new


@dataclass
class TrainState:
    params: ModelParams
    opt: AdamState
    rng: np.random.Generator


def _student_out(params: ModelParams, op, x, cfg: TrainConfig, rng) -> Tensor:
    s = encoder_forward(params.student.encoder, op, x, "train", cfg.dropout, rng)
    if params.student.projector is not None:
        s = mlp_forward(params.student.projector, s, "train")
    return mlp_forward(params.student.predictor, s, "train")


def _teacher_out(params: ModelParams, op, x, cfg: TrainConfig, rng) -> Tensor:
    t = encoder_forward(params.teacher.encoder, op, x, "train", cfg.dropout, rng)
    if params.teacher.projector is not None:
        t = mlp_forward(params.teacher.projector, t, "train")
    return t


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> float:
    """One student update plus one teacher EMA update; returns the loss."""
    p = state.params
    rng = state.rng
    # teacher runs before any tape exists: nothing of it is recorded
    target = _teacher_out(p, batch.view2.operator, batch.input2, cfg, rng)
    target_swap = None
    if cfg.symmetric:
        target_swap = _teacher_out(p, batch.view1.operator, batch.input1, cfg, rng)
    with Tape() as tape:
        pred = _student_out(p, batch.view1.operator, batch.input1, cfg, rng)
        loss = cosine_mse_loss(pred, target, cfg.loss)
        if cfg.symmetric:
            pred2 = _student_out(p, batch.view2.operator, batch.input2, cfg, rng)
            loss = scale(add(loss, cosine_mse_loss(pred2, target_swap, cfg.loss)), 0.5)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value} at optimizer step {state.opt.step + 1}")
    tape.backward(loss)
    student = p.student_parameters()
    adam_step(student, state.opt)
    for _, t in student:
        t.zero_grad()
    pairs = p.ema_pairs()
    ema_update([s for s, _ in pairs], [t for _, t in pairs], cfg.tau)
    return value


def embed_batch(params: ModelParams, batch: Batch, mode: str = "student") -> np.ndarray:
    """Eval-mode embeddings of one batch (student on view 1, optionally + teacher on view 2)."""
    z = encoder_forward(params.student.encoder, batch.view1.operator, batch.input1, "eval")
    out = z.data
    if mode == "concat":
        zt = encoder_forward(params.teacher.encoder, batch.view2.operator, batch.input2, "eval")
        out = np.hstack([out, zt.data])
    return out.astype(np.float64)


def embed_batches(params: ModelParams, batches: list[Batch], num_nodes: int,
                  mode: str = "student") -> np.ndarray:
    """Embed every batch and scatter rows back to global node ids."""
    if len(batches) == 1 and batches[0].node_ids is None:
        return embed_batch(params, batches[0], mode)
    out = None
    for b in batches:
        e = embed_batch(params, b, mode)
        if out is None:
            out = np.zeros((num_nodes, e.shape[1]))
        out[b.node_ids] = e
    return out


def embed(params: ModelParams, g: Graph, spec: AugSpec, mode: str = "student",
          views: tuple[View, View] | None = None) -> np.ndarray:
    views = views if views is not None else make_views(g, spec)
    batch = Batch.prepare(views, spec, params.config.dtype)
    return embed_batch(params, batch, mode)


@dataclass
class HistoryRow:
    epoch: int
    loss: float
    val_acc: float = float("nan")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryRow]
    best_epoch: int
    best_val: float
    final_params: ModelParams | None = None
    meta: dict = field(default_factory=dict)


def fit_batches(g: Graph, batches: list[Batch], cfg: TrainConfig,
                probe_cfg: ProbeConfig = ProbeConfig(), callback=None) -> TrainResult:
    """Shared loop for full-graph (one batch) and clustered training."""
    model_cfg = cfg.model_config(batches[0].width)
    params = init_params(model_cfg, cfg.seed)
    state = TrainState(params, AdamState(lr=cfg.lr), substream(cfg.seed, "dropout"))
    order_rng = substream(cfg.seed, "batch-order")

    can_probe = (
        cfg.eval_every > 0 and g.split is not None and g.labels is not None
        and g.mask("train").any() and g.mask("val").any()
    )
    history: list[HistoryRow] = []
    best = (-1.0, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(batches)) if len(batches) > 1 else [0]
        losses = [train_step(state, batches[i], cfg) for i in order]
        row = HistoryRow(epoch, float(np.mean(losses)))
        if can_probe and epoch % cfg.eval_every == 0:
            emb = embed_batches(params, batches, g.num_nodes, cfg.embed)
            try:
                row.val_acc = split_accuracy(emb, g.labels, g.split, "train", "val", probe_cfg,
                                             g.num_classes)
            except ProbeError as exc:
                log.warning("validation probe skipped: %s", exc)
            if row.val_acc > best[0]:
                best = (row.val_acc, epoch, params.clone())
        history.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d loss %.6f val %.4f", epoch, row.loss, row.val_acc)
    if best[2] is None:
        return TrainResult(params, history, cfg.epochs, float("nan"), params)
    return TrainResult(best[2], history, best[1], best[0], params)


def train(g: Graph, spec: AugSpec, cfg: TrainConfig, probe_cfg: ProbeConfig = ProbeConfig(),
          callback=None) -> TrainResult:
    """Full-batch training; keeps the parameters with the best validation probe."""
    views = make_views(g, spec)
    batch = Batch.prepare(views, spec, cfg.model_config(1).dtype)
    result = fit_batches(g, [batch], cfg, probe_cfg, callback)
    result.meta["batches"] = [batch]
    return result


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
