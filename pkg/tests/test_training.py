import json

import numpy as np
import pytest

from pvad import checkpoint, training, vad
from pvad.errors import ConfigError, DivergenceError
from pvad.training import Adam, TrainConfig, fit, init_state, target_labels, train_step

from conftest import toy_batch, toy_model


def toy_state(kind, seed=0, **kw):
    model = toy_model(kind, seed)
    cfg = TrainConfig(mode=kind, embed_dim=3, **kw)
    return init_state(cfg, model=model)


def test_adam_matches_textbook_updates():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(5).astype(np.float32)
    opt = Adam({"p": 5}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    params = {"p": x.copy()}
    ref, m, v = x.astype(np.float64), np.zeros(5), np.zeros(5)
    for t in range(1, 4):
        g = rng.standard_normal(5).astype(np.float32)
        opt.update(params, {"p": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["p"], ref, rtol=1e-5)


def test_gradients_are_clipped_to_global_norm(monkeypatch):
    state = toy_state("hywa", grad_clip=1e-3)
    seen = {}
    monkeypatch.setattr(state.optimizer, "update", lambda p, g: seen.update(g))
    train_step(state, toy_batch(0))
    total = np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in seen.values()))
    assert total == pytest.approx(1e-3, rel=1e-6)
    assert np.sqrt(sum(n * n for n in state.last_grad_norm.values())) > 1e-3


@pytest.mark.parametrize("kind", ["concat", "hywa"])
def test_frozen_statistics_never_move(kind):
    state = toy_state(kind, lr=0.05)
    frozen = {k: (st.values[~state.masks[k]].copy()) for k, st in
              (("vad", state.model.vad), ("cond", state.model.cond))}
    for i in range(5):
        train_step(state, toy_batch(i))
    np.testing.assert_array_equal(state.model.vad.values[~state.masks["vad"]], frozen["vad"])
    np.testing.assert_array_equal(state.model.cond.values[~state.masks["cond"]], frozen["cond"])


@pytest.mark.parametrize("kind", ["none", "concat", "add", "mul", "film", "hywa"])
def test_overfits_a_single_batch(kind):
    state = toy_state(kind, seed=1, lr=0.02)
    batch = toy_batch(1, n=2, T=6)
    first = train_step(state, batch)
    for _ in range(150):
        last = train_step(state, batch)
    assert last < 0.5 * first


def test_divergence_is_reported_with_last_finite_loss():
    state = toy_state("add")
    loss = train_step(state, toy_batch(0))
    state.model.vad["head.bias"][0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_step(state, toy_batch(0))
    assert err.value.last_finite_loss == loss
    assert err.value.exit_code == 3


def test_plain_vad_merges_ntss_into_speech():
    labels = np.array([0, 1, 2, 2, 0])
    assert target_labels(labels, TrainConfig(mode="none").conditioning).tolist() == [0, 1, 1, 1, 0]
    assert target_labels(labels, TrainConfig(mode="film").conditioning).tolist() == labels.tolist()


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "hywa", "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="gate")
    with pytest.raises(ConfigError):
        TrainConfig(class_weights="balanced")
    cfg = TrainConfig.from_dict({"mode": "mul", "seed": 4})
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_fit_is_deterministic(tiny_examples):
    cfg = TrainConfig(mode="film", max_epochs=1, seed=5)
    a, ra = fit(cfg, tiny_examples["train"], tiny_examples["valid"])
    b, rb = fit(cfg, tiny_examples["train"], tiny_examples["valid"])
    assert checkpoint.checkpoint_bytes(a) == checkpoint.checkpoint_bytes(b)
    assert ra.train_loss == rb.train_loss


def test_fit_estimates_frozen_statistics(tiny_examples):
    ckpt, _ = fit(TrainConfig(mode="hywa", max_epochs=1), tiny_examples["train"], tiny_examples["valid"])
    frames = np.concatenate([e.features for e in tiny_examples["train"]])
    np.testing.assert_allclose(ckpt.model.vad["input_norm.shift"], frames.mean(axis=0), rtol=1e-4, atol=1e-4)
    assert (ckpt.model.cond["embed_norm.scale"] > 0).all()


def test_early_stopping_restores_best_epoch(tiny_examples, monkeypatch):
    losses = iter([1.0, 0.5, 0.6, 0.7, 0.8, 0.9])
    snapshots = []
    real = training.validation_scores

    def fake(model, examples):
        snapshots.append(model.vad.values.copy())
        real(model, examples)
        return next(losses), 0.5

    monkeypatch.setattr(training, "validation_scores", fake)
    cfg = TrainConfig(mode="none", max_epochs=6, patience=2)
    ckpt, report = fit(cfg, tiny_examples["train"], tiny_examples["valid"])
    assert report.stopped_early and len(report.val_loss) == 4
    assert report.best_epoch == 1 and report.best_val_loss == 0.5
    np.testing.assert_array_equal(ckpt.model.vad.values, snapshots[1])
    recs = report.log_records()
    assert {r["split"] for r in recs} == {"train", "valid"} and len(recs) == 8


def test_patience_zero_stops_at_first_non_improving_epoch(tiny_examples, monkeypatch):
    losses = iter([1.0, 0.9, 0.95, 0.5])
    monkeypatch.setattr(training, "validation_scores", lambda model, examples: (next(losses), 0.5))
    _, report = fit(TrainConfig(mode="none", max_epochs=4, patience=0), tiny_examples["train"],
                    tiny_examples["valid"])
    assert len(report.val_loss) == 3 and report.best_epoch == 1


def test_joint_training_moves_trunk_and_hypernetwork():
    state = toy_state("hywa")
    before = state.model.vad.values.copy(), state.model.cond.values.copy()
    train_step(state, toy_batch(3))
    assert state.last_grad_norm["vad"] > 0 and state.last_grad_norm["cond"] > 0
    assert not np.array_equal(state.model.vad.values, before[0])
    assert not np.array_equal(state.model.cond.values, before[1])


def test_single_class_batch_is_well_posed():
    state = toy_state("film")
    batch = toy_batch(2)
    for e in batch:
        e.labels[:] = 1
    loss = train_step(state, batch)
    assert np.isfinite(loss) and all(np.isfinite(n) for n in state.last_grad_norm.values())


def test_warm_start_from_checkpoint(tiny_checkpoints, tiny_examples):
    cfg = TrainConfig(mode="hywa", init_from=str(tiny_checkpoints["none"]))
    model = training.build_model(cfg)
    base = checkpoint.load_checkpoint(tiny_checkpoints["none"]).model.vad
    np.testing.assert_array_equal(model.vad.values, base.values)
    with pytest.raises(ConfigError):
        training.build_model(TrainConfig(mode="concat", init_from=str(tiny_checkpoints["none"])))


def test_inverse_class_weights(tiny_examples):
    mode = TrainConfig(mode="hywa").conditioning
    w = training._inverse_frequency(tiny_examples["train"], mode)
    y = np.concatenate([e.labels for e in tiny_examples["train"]])
    counts = np.bincount(y, minlength=3)
    np.testing.assert_allclose(w * counts, counts.sum() / 3, rtol=1e-5)


def test_trainable_parameters_exclude_statistics():
    model = training.build_model(TrainConfig(mode="hywa"))
    assert vad.trainable_mask(model.vad).sum() == model.vad.size - 80
    assert vad.trainable_mask(model.cond).sum() == model.cond.size - 128
