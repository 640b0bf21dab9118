import math

import numpy as np
import pytest

from mmfuse.checkpoint import load, to_bytes
from mmfuse.core import ModalityKind as M
from mmfuse.fusion import FusionModel, MlpConfig
from mmfuse.training import (
    REPRODUCTION_BATCH_SIZE,
    REPRODUCTION_EPOCHS,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adamw_step,
    batch_cross_entropy,
    cross_entropy,
    eval_report,
    evaluate,
    load_model,
    reproduction_preset,
    save_model,
    train,
)

# ------------------------------------------------------------ loss


def test_uniform_loss_is_ln3():
    loss, grad = cross_entropy([0.0, 0.0, 0.0], 0)
    assert abs(loss - math.log(3)) < 1e-15
    np.testing.assert_allclose(grad, [1 / 3 - 1, 1 / 3, 1 / 3], atol=1e-15)


def test_loss_decreases_with_margin():
    e = np.eye(4)[2]
    assert cross_entropy(10 * e, 2)[0] < cross_entropy(e, 2)[0]


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=6)
    _, g = cross_entropy(z, 4)
    eps = 1e-5
    num = np.array([(cross_entropy(z + eps * np.eye(6)[i], 4)[0] - cross_entropy(z - eps * np.eye(6)[i], 4)[0]) / (2 * eps) for i in range(6)])
    assert np.max(np.abs(g - num) / np.maximum(np.abs(g) + np.abs(num), 1e-12)) < 1e-5


def test_batch_loss_is_mean_of_rows():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 3))
    y = np.array([0, 2, 1, 1, 0])
    loss, grad = batch_cross_entropy(z, y)
    rows = [cross_entropy(z[i], y[i]) for i in range(5)]
    assert abs(loss - np.mean([r[0] for r in rows])) < 1e-14
    np.testing.assert_allclose(grad, np.array([r[1] for r in rows]) / 5, atol=1e-15)


def test_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy([0.0, 0.0], 2)


# ------------------------------------------------------------ optimizer


def test_adamw_zero_grad_zero_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    out, _ = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert out["w"].tolist() == [1.0, -2.0]


def test_adamw_zero_grad_shrinks_by_decay():
    p = {"w": np.array([1.0, -2.0])}
    state = OptimizerState(lr=0.1, weight_decay=0.01)
    for step in range(1, 4):
        p, state = adamw_step(p, {"w": np.zeros(2)}, state)
        np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) * (1 - 0.001) ** step, rtol=0, atol=1e-15)


# w=1, g=0.5, lr=0.1, wd=0.01: m_hat=0.5, v_hat=0.25,
# w' = 1 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * 0.01 * 1 = 0.899000002 (to 1e-16)
ADAMW_ONE_STEP = 0.899000002


def test_adamw_single_step_closed_form():
    p, state = adamw_step({"w": np.array(1.0)}, {"w": np.array(0.5)}, OptimizerState(lr=0.1, weight_decay=0.01))
    assert abs(float(p["w"]) - ADAMW_ONE_STEP) < 1e-12
    assert state.step == 1


def _plain_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adaptive-moment reference written out longhand on python floats."""
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            w[i] -= lr * mh / (math.sqrt(vh) + eps)
    return w


def test_adamw_without_decay_matches_plain_adam():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=5)
    grads = rng.normal(size=(100, 5))
    p = {"w": w0.copy()}
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    for g in grads:
        p, state = adamw_step(p, {"w": g}, state)
    ref = _plain_adam(w0.tolist(), grads.tolist(), 0.01)
    assert np.abs(p["w"] - ref).max() < 1e-10


def test_adamw_non_finite_names_parameter():
    with pytest.raises(FloatingPointError, match="'layer.W'"):
        adamw_step({"layer.W": np.ones(2)}, {"layer.W": np.array([1.0, np.nan])}, OptimizerState())


# ------------------------------------------------------------ config


def test_reproduction_preset_snapshot():
    cfg = reproduction_preset("fusion")
    assert (cfg.batch_size, cfg.max_epochs, cfg.max_steps, cfg.optimizer) == (16, 5, None, "adamw")
    assert (REPRODUCTION_BATCH_SIZE, REPRODUCTION_EPOCHS) == (16, 5)
    assert reproduction_preset("video").max_epochs == 10


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")


# ------------------------------------------------------------ loop


def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    centers = np.array([[-2.0, -2.0, 0.0, 1.0], [2.0, 2.0, 0.0, -1.0]])
    return centers[y] + 0.3 * rng.normal(size=(n, 4)), y


def _nearest_centroid_accuracy(x, y):
    cents = np.array([x[y == c].mean(axis=0) for c in (0, 1)])
    pred = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    return float((pred == y).mean())


def _model(seed=0):
    return FusionModel(MlpConfig(hidden_sizes=(8,), dropout=0.0), {M.TEXT: 4}, {M.TEXT}, 2, seed=seed)


def test_separable_toy_reaches_full_accuracy():
    x, y = _blobs()
    assert _nearest_centroid_accuracy(x, y) == 1.0
    res = train(_model(), (x, y), None, TrainConfig(batch_size=8, max_epochs=100, max_steps=50, lr=0.05, weight_decay=0.0))
    assert res.steps == 50
    assert evaluate(res.model, x, y).accuracy == 1.0


def test_training_is_deterministic():
    x, y = _blobs()
    cfg = TrainConfig(batch_size=8, max_epochs=3, seed=4)
    a = train(_model(), (x, y), (x[:20], y[:20]), cfg)
    b = train(_model(), (x, y), (x[:20], y[:20]), cfg)
    for ra, rb in zip(a.history, b.history):
        assert abs(ra["train_loss"] - rb["train_loss"]) < 1e-7
        assert ra["dev_accuracy"] == rb["dev_accuracy"]
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)


def test_zero_steps_returns_initial_model():
    x, y = _blobs()
    m = _model()
    before = {k: v.copy() for k, v in m.params.items()}
    res = train(m, (x, y), None, TrainConfig(max_steps=0))
    assert res.history == [] and res.steps == 0
    assert all(np.array_equal(before[k], res.model.params[k]) for k in before)


def test_history_fields_and_best_selection():
    x, y = _blobs()
    res = train(_model(), (x, y), (x, y), TrainConfig(batch_size=16, max_epochs=4))
    assert [h["epoch"] for h in res.history] == [0, 1, 2, 3]
    assert set(res.history[0]) == {"epoch", "steps", "train_loss", "dev_accuracy", "wall_time"}
    best = max(h["dev_accuracy"] for h in res.history)
    assert res.history[res.best_epoch]["dev_accuracy"] == best
    assert evaluate(res.model, x, y).accuracy == best


def test_empty_split():
    with pytest.raises(TrainingError):
        train(_model(), (np.zeros((0, 4)), np.zeros(0)), None, TrainConfig())


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    save_model(tmp_path / "m.ckpt", m)
    back, ckpt = load_model(tmp_path / "m.ckpt")
    assert ckpt.kind == "fusion_mlp" and ckpt.extra["layout"][0]["modality"] == "text"
    x, _ = _blobs(5)
    np.testing.assert_allclose(back.logits(x), m.logits(x), atol=1e-5)
    assert (tmp_path / "m.ckpt").read_bytes() == to_bytes(load(tmp_path / "m.ckpt"))


# ------------------------------------------------------------ evaluation


class _Oracle:
    n_labels = 3

    def logits(self, inputs):
        return np.eye(3)[np.asarray(inputs)]


class _Constant:
    n_labels = 3

    def logits(self, inputs):
        return np.tile([1.0, 0.0, 0.0], (len(inputs), 1))


def test_oracle_model_diagonal():
    y = np.array([0, 1, 2, 2, 1])
    rep = evaluate(_Oracle(), y, y)
    assert rep.accuracy == 1.0
    assert np.array_equal(rep.confusion, np.diag([1, 2, 2]))


def test_constant_model_majority_share():
    y = np.array([0] * 5 + [1] * 3 + [2] * 2)
    rep = evaluate(_Constant(), y, y)
    assert rep.accuracy == 0.5
    assert rep.confusion.sum(axis=1).tolist() == [5, 3, 2]
    assert rep.confusion.sum() == rep.n_examples == 10
    assert rep.recall == [1.0, 0.0, 0.0] and rep.precision[0] == 0.5


def test_random_model_near_chance():
    n = 7000
    rng = np.random.default_rng(0)
    y = rng.integers(0, 7, size=n)
    pred = rng.integers(0, 7, size=n)
    rep = eval_report(pred, y, 7)
    p = 1 / 7
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(rep.accuracy - p) < 3 * sigma
    assert rep.accuracy == np.trace(rep.confusion) / rep.confusion.sum()
