import numpy as np
import pytest

from selfgnn import autodiff as ad
from selfgnn.diffusion import DiffusionConfig
from selfgnn.model import init_params
from selfgnn.seeding import substream
from selfgnn.trainer import (
    VARIANTS,
    AugSpec,
    Batch,
    TrainConfig,
    TrainState,
    embed,
    ema_update,
    make_views,
    train,
    train_step,
)

from conftest import planted_graph, random_graph

SMALL = dict(layers=(16, 8), predictor_hidden=16, precision="f64")


def _state(g, spec, cfg):
    batch = Batch.prepare(make_views(g, spec), spec, np.float64)
    params = init_params(cfg.model_config(batch.width), cfg.seed)
    return TrainState(params, ad.AdamState(lr=cfg.lr), substream(cfg.seed, "dropout")), batch


@pytest.mark.parametrize("variant", VARIANTS)
def test_views_have_n_rows(variant):
    g = planted_graph(60)
    v1, v2 = make_views(g, AugSpec(variant))
    assert v1.features.shape[0] == v2.features.shape[0] == 60
    assert v1.operator.rows == v2.operator.rows == 60


def test_split_view_widths_on_odd_f():
    g = random_graph(10, 0.3, 0, f=1433)
    v1, v2 = make_views(g, AugSpec("split"))
    assert (v1.width, v2.width) == (717, 716)
    b = Batch.prepare((v1, v2), AugSpec("split"), np.float64)
    assert b.view1.width == b.view2.width == 717


def test_ppr_alpha_one_gives_identity_operator():
    g = random_graph(12, 0.3, 0)
    _, v2 = make_views(g, AugSpec("ppr", DiffusionConfig(alpha=1.0)))
    assert np.array_equal(v2.operator.to_dense(), np.eye(12))


def test_pairing_swaps_views():
    g = planted_graph(40)
    views = make_views(g, AugSpec("ppr"))
    b = Batch.prepare(views, AugSpec("ppr", pairing="augmented-student"), np.float64)
    assert b.view1.operator is views[1].operator and b.view2.operator is views[0].operator


def test_ema_examples():
    phi = [np.zeros(3)]
    ema_update([np.full(3, 2.0)], phi, 0.5)
    assert phi[0].tolist() == [1.0, 1.0, 1.0]
    theta = [np.random.default_rng(0).normal(size=(2, 2))]
    phi = [np.ones((2, 2))]
    ema_update(theta, phi, 1.0)
    assert np.array_equal(phi[0], np.ones((2, 2)))
    ema_update(theta, phi, 0.0)
    assert np.array_equal(phi[0], theta[0])
    with pytest.raises(ValueError):
        ema_update([np.ones(2)], [np.ones(3)], 0.5)


def test_ema_geometric_convergence():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(4, 3))
    phi0 = rng.normal(size=(4, 3))
    phi = [phi0.copy()]
    tau = 0.9
    for k in range(1, 30):
        ema_update([theta], phi, tau)
        expect = tau ** k * np.linalg.norm(phi0 - theta)
        assert np.linalg.norm(phi[0] - theta) == pytest.approx(expect, rel=1e-9)


def test_adam_never_touches_teacher():
    g = planted_graph(50)
    cfg = TrainConfig(tau=1.0, **SMALL)  # tau=1 freezes the EMA as well
    state, batch = _state(g, AugSpec("ppr"), cfg)
    before = {n: t.data.copy() for n, t in state.params.teacher_parameters()}
    for _ in range(3):
        train_step(state, batch, cfg)
    for n, t in state.params.teacher_parameters():
        assert np.array_equal(t.data, before[n]) and t.grad is None


def test_teacher_moves_only_by_ema():
    g = planted_graph(50)
    cfg = TrainConfig(tau=0.9, lr=1e-2, **SMALL)
    state, batch = _state(g, AugSpec("ppr"), cfg)
    teacher_before = [t.data.copy() for _, t in state.params.ema_pairs()]
    train_step(state, batch, cfg)
    for (s, t), t0 in zip(state.params.ema_pairs(), teacher_before):
        np.testing.assert_array_equal(t.data, 0.9 * t0 + (1 - 0.9) * s.data)


def test_lr_zero_tau_one_freezes_everything():
    g = planted_graph(50)
    cfg = TrainConfig(lr=0.0, tau=1.0, **SMALL)
    state, batch = _state(g, AugSpec("ppr"), cfg)
    before = {n: t.copy() for n, t in state.params.state_dict().items() if "running" not in n}
    for _ in range(10):
        train_step(state, batch, cfg)
    after = state.params.state_dict()
    for n, v in before.items():
        assert np.array_equal(after[n], v), n


def test_loss_non_increasing_early():
    g = planted_graph(50, f=12)
    cfg = TrainConfig(lr=1e-3, dropout=0.0, tau=1.0, **SMALL)
    state, batch = _state(g, AugSpec("ppr"), cfg)
    losses = [train_step(state, batch, cfg) for _ in range(6)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert all(0 <= v <= 4 for v in losses)


def test_history_length_and_determinism():
    g = planted_graph(60)
    cfg = TrainConfig(epochs=1, **SMALL)
    assert len(train(g, AugSpec("ppr"), cfg).history) == 1
    cfg = TrainConfig(epochs=6, eval_every=3, **SMALL)
    a = train(g, AugSpec("split"), cfg)
    b = train(g, AugSpec("split"), cfg)
    assert [(r.loss, r.val_acc) for r in a.history] == [(r.loss, r.val_acc) for r in b.history]
    assert np.isnan(a.history[0].val_acc) and not np.isnan(a.history[2].val_acc)
    assert a.best_epoch in (3, 6)
    ea = embed(a.params, g, AugSpec("split"))
    assert np.array_equal(ea, embed(b.params, g, AugSpec("split")))


def test_no_probe_keeps_last_epoch():
    g = planted_graph(40)
    cfg = TrainConfig(epochs=3, eval_every=0, **SMALL)
    r = train(g, AugSpec("ppr"), cfg)
    assert r.best_epoch == 3 and r.params is r.final_params


def test_embed_shapes_and_eval_determinism():
    g = planted_graph(45)
    p = init_params(TrainConfig(**SMALL).model_config(g.num_features), 0)
    e = embed(p, g, AugSpec("ppr"))
    assert e.shape == (45, 8) and np.array_equal(e, embed(p, g, AugSpec("ppr")))
    p = init_params(TrainConfig().model_config(g.num_features), 0)
    assert embed(p, g, AugSpec("ppr"), "concat").shape == (45, 256)


def test_non_finite_loss_aborts():
    g = planted_graph(40)
    cfg = TrainConfig(**SMALL)
    state, batch = _state(g, AugSpec("ppr"), cfg)
    for _, t in state.params.student_parameters():
        t.data = np.full_like(t.data, np.nan)
    with pytest.raises(ad.NonFiniteError), np.errstate(invalid="ignore"):
        train_step(state, batch, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=1.5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        AugSpec("bogus")
