import math

import numpy as np
import pytest

from conftest import TINY_HEADS, TINY_PATCH
from tame.errors import ConfigError, ContractError, NumericError
from tame.evaluate import evaluate
from tame.model import ModelParams, Variant
from tame.training import (
    AdamState,
    TrainConfig,
    TrainedModel,
    adam_step,
    clip_gradients,
    load_checkpoint,
    prepare,
    save_checkpoint,
    train,
)


def tiny_config(**kw):
    base = dict(batch_size=8, learning_rate=1e-3, epochs=1, preset="J16", patch=TINY_PATCH, heads=TINY_HEADS)
    base.update(kw)
    return TrainConfig(**base)


# -- Adam -------------------------------------------------------------------------
def _params(rng):
    return ModelParams.from_arrays({"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)})


def test_adam_first_step_is_lr_sign(rng):
    p = _params(rng)
    before = {k: t.data.copy() for k, t in p.items()}
    grads = {k: rng.standard_normal(t.shape) for k, t in p.items()}
    adam_step(p, grads, AdamState.zeros(p), lr=1e-3)
    for k, t in p.items():
        step = before[k] - t.data
        np.testing.assert_allclose(step, 1e-3 * np.sign(grads[k]), rtol=1e-6)


def test_adam_zero_gradients_leave_params(rng):
    p = _params(rng)
    before = {k: t.data.copy() for k, t in p.items()}
    state = AdamState.zeros(p)
    for _ in range(5):
        adam_step(p, {k: np.zeros(t.shape) for k, t in p.items()}, state, lr=1e-2)
    for k, t in p.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_adam_scalar_oracle(rng):
    p = _params(rng)
    flat0 = {k: t.data.reshape(-1).tolist() for k, t in p.items()}
    grads_seq = [{k: rng.standard_normal(t.shape) for k, t in p.items()} for _ in range(5)]
    state = AdamState.zeros(p)
    for g in grads_seq:
        adam_step(p, g, state, lr=3e-3)
    lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
    for k, t in p.items():
        for i, theta in enumerate(flat0[k]):
            m = v = 0.0
            for step, g in enumerate(grads_seq, start=1):
                gi = float(g[k].reshape(-1)[i])
                m = b1 * m + (1 - b1) * gi
                v = b2 * v + (1 - b2) * gi * gi
                theta -= lr * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
            assert abs(t.data.reshape(-1)[i] - theta) < 1e-12
    assert state.step == 5


def test_adam_rejects_non_finite(rng):
    p = _params(rng)
    with pytest.raises(NumericError, match="'b'"):
        adam_step(p, {"a": np.zeros((3, 2)), "b": np.array([0.0, np.inf, 0.0, 0.0])}, AdamState.zeros(p), 1e-3)


def test_clip_gradients():
    grads = {"a": np.array([3.0, 4.0]), "b": None}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose(np.linalg.norm(grads["a"]), 1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- training --------------------------------------------------------------------------
def test_single_sample_loss_decreases(tiny_data):
    _, train_set, _ = tiny_data
    result = train(train_set[:1], tiny_config(batch_size=1, epochs=51, learning_rate=5e-5))
    losses = np.asarray(result.step_losses)
    assert len(losses) == 51
    decreasing = np.sum(np.diff(losses[1:]) < 0) + (losses[1] < losses[0])
    assert decreasing >= 0.9 * 50


def test_metrics_log_deterministic(tiny_data, tmp_path):
    _, train_set, _ = tiny_data
    cfg = tiny_config(epochs=2)
    a = train(train_set, cfg, log_path=tmp_path / "a.csv")
    b = train(train_set, cfg, log_path=tmp_path / "b.csv")
    strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]  # noqa: E731
    assert strip(tmp_path / "a.csv") == strip(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,l_total,l_cls,l_pos,wall_seconds"
    assert a.step_losses == b.step_losses
    assert a.checkpoint.params.fingerprint() == b.checkpoint.params.fingerprint()


def test_different_seed_differs(tiny_data):
    _, train_set, _ = tiny_data
    a = train(train_set, tiny_config(seed=0))
    b = train(train_set, tiny_config(seed=1))
    assert a.step_losses != b.step_losses


def test_tmamba_only_has_no_spectral_or_neck_params(tiny_data):
    _, train_set, _ = tiny_data
    names = train(train_set, tiny_config(variant=Variant.TMAMBA_ONLY, max_steps=1)).checkpoint.params.names()
    assert all(not n.startswith(("smamba.", "tfe.")) for n in names)
    assert any(n.startswith("tmamba.") for n in names)


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_trains(tiny_data, variant):
    _, train_set, test_set = tiny_data
    result = train(train_set, tiny_config(variant=variant, max_steps=2))
    assert len(result.step_losses) == 2 and all(np.isfinite(result.step_losses))
    report = evaluate(result.model, test_set)
    assert report.n == len(test_set)


def test_checkpoint_round_trip(tiny_data, tmp_path):
    _, train_set, test_set = tiny_data
    result = train(train_set, tiny_config(epochs=2, max_steps=3))
    save_checkpoint(tmp_path / "c.tame", result.checkpoint)
    loaded = load_checkpoint(tmp_path / "c.tame")
    assert loaded.params.fingerprint() == result.checkpoint.params.fingerprint()
    assert loaded.optimizer.step == 3
    for k in result.checkpoint.optimizer.m:
        assert loaded.optimizer.m[k].tobytes() == result.checkpoint.optimizer.m[k].tobytes()
        assert loaded.optimizer.v[k].tobytes() == result.checkpoint.optimizer.v[k].tobytes()
    a_pos, a_log = result.model.predict(test_set)
    b_pos, b_log = TrainedModel.from_checkpoint(loaded).predict(test_set)
    assert a_pos.tobytes() == b_pos.tobytes() and a_log.tobytes() == b_log.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.tame").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.tame")


def test_label_outside_classes(tiny_data):
    _, train_set, _ = tiny_data
    with pytest.raises(ContractError):
        train(train_set, tiny_config(n_classes=2))


def test_prepare_normalizes_positions(tiny_data):
    _, train_set, _ = tiny_data
    X, Y, labels = prepare(train_set, TrainConfig().volume)
    assert X.shape == (16, 4, 64, 16)
    assert np.all(np.abs(Y) <= 1.0)
    np.testing.assert_allclose(X.mean(axis=(1, 2, 3)), 0.0, atol=1e-9)
